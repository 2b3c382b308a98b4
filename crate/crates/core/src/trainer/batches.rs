//! Deterministic batch assembly under a frame budget.
//!
//! Utterances are shuffled once per epoch with a generator keyed by
//! `(seed, epoch)`, over-long utterances get a seeded random crop, and
//! batches fill greedily up to the frame budget. Because every draw is keyed
//! by epoch and position, `advance_to(step)` reproduces the exact batch the
//! uninterrupted run would see at that step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Purpose};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub utt_index: usize,
    pub crop_start: usize,
    pub crop_len: usize,
}

#[derive(Debug, Clone)]
pub struct BatchStream {
    frame_counts: Vec<usize>,
    frame_budget: usize,
    crop_frames: usize,
    seed: u64,
    epoch: u64,
    epoch_batches: Vec<Vec<BatchItem>>,
    pos: usize,
}

impl BatchStream {
    pub fn new(
        frame_counts: Vec<usize>,
        frame_budget: usize,
        crop_frames: usize,
        seed: u64,
    ) -> Result<Self> {
        if frame_counts.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if crop_frames == 0 || frame_budget == 0 {
            return Err(Error::InvalidConfig(
                "frame budget and crop length must be positive".into(),
            ));
        }
        if frame_budget < crop_frames {
            return Err(Error::InvalidConfig(format!(
                "batch budget {frame_budget} below crop length {crop_frames}"
            )));
        }
        let mut stream = Self {
            frame_counts,
            frame_budget,
            crop_frames,
            seed,
            epoch: 0,
            epoch_batches: Vec::new(),
            pos: 0,
        };
        stream.epoch_batches = stream.build_epoch(0);
        Ok(stream)
    }

    fn build_epoch(&self, epoch: u64) -> Vec<Vec<BatchItem>> {
        let n = self.frame_counts.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream_rng(self.seed, Purpose::Shuffle, epoch);
        for i in 0..n {
            let j = rng.random_range(i..n);
            order.swap(i, j);
        }
        let mut crop_rng = stream_rng(self.seed, Purpose::Crop, epoch);
        let mut batches: Vec<Vec<BatchItem>> = Vec::new();
        let mut current: Vec<BatchItem> = Vec::new();
        let mut used = 0usize;
        for utt_index in order {
            let t_len = self.frame_counts[utt_index];
            let (crop_start, crop_len) = if t_len > self.crop_frames {
                let start = crop_rng.random_range(0..=t_len - self.crop_frames);
                (start, self.crop_frames)
            } else {
                (0, t_len)
            };
            if !current.is_empty() && used + crop_len > self.frame_budget {
                batches.push(std::mem::take(&mut current));
                used = 0;
            }
            used += crop_len;
            current.push(BatchItem {
                utt_index,
                crop_start,
                crop_len,
            });
        }
        if !current.is_empty() {
            batches.push(current);
        }
        batches
    }

    /// The batch consumed at the next training step.
    pub fn next_batch(&mut self) -> Vec<BatchItem> {
        if self.pos >= self.epoch_batches.len() {
            self.epoch += 1;
            self.epoch_batches = self.build_epoch(self.epoch);
            self.pos = 0;
        }
        let batch = self.epoch_batches[self.pos].clone();
        self.pos += 1;
        batch
    }

    /// Fast-forwards a fresh stream so the next call to `next_batch` returns
    /// the batch for training step `step`.
    pub fn advance_to(&mut self, step: u64) {
        self.epoch = 0;
        self.epoch_batches = self.build_epoch(0);
        self.pos = 0;
        let mut remaining = step;
        loop {
            let in_epoch = (self.epoch_batches.len() - self.pos) as u64;
            if remaining < in_epoch {
                self.pos += remaining as usize;
                return;
            }
            remaining -= in_epoch;
            self.epoch += 1;
            self.epoch_batches = self.build_epoch(self.epoch);
            self.pos = 0;
        }
    }
}
