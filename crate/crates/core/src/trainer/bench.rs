//! Loader throughput: whole-container in-RAM iteration vs per-utterance
//! file-open streaming over the same corpus.

use std::path::Path;
use std::time::Instant;

use crate::error::Result;
use crate::store::{read_manifest, read_utterance_streaming, PackedDataset};

#[derive(Debug, Clone)]
pub struct ThroughputReport {
    pub utterances: usize,
    pub total_frames: u64,
    pub in_ram_frames_per_sec: f64,
    pub streaming_frames_per_sec: f64,
    /// in-RAM over streaming.
    pub ratio: f64,
    /// Identical code checksums on both paths.
    pub checksums_equal: bool,
    pub repetitions: usize,
}

impl ThroughputReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "corpus: {} utterances, {} frames\n",
            self.utterances, self.total_frames
        ));
        s.push_str(&format!(
            "in-RAM:     {:>12.0} frames/s\nstreaming:  {:>12.0} frames/s\nratio:      {:.2}x\n",
            self.in_ram_frames_per_sec, self.streaming_frames_per_sec, self.ratio
        ));
        s.push_str(&format!(
            "checksums equal: {}  (repetitions: {}, best-of)\n",
            self.checksums_equal, self.repetitions
        ));
        s.push_str(
            "reference (not measured here): end-to-end pretraining speedup 2.3x with precomputed discrete inputs\n",
        );
        s
    }
}

fn checksum(seq: &crate::units::CodecUnitSequence) -> u64 {
    let mut acc = 0u64;
    for &code in seq.codes.iter() {
        acc = acc
            .wrapping_mul(0x100000001b3)
            .wrapping_add(code as u64 + 1);
    }
    acc
}

/// Measures both paths `repetitions` times and keeps each path's best run.
/// Decode work is identical on both sides; the streaming path additionally
/// re-opens the file and seeks per utterance.
pub fn bench_throughput<P: AsRef<Path>>(path: P, repetitions: usize) -> Result<ThroughputReport> {
    let path = path.as_ref();
    let reps = repetitions.max(1);

    // Warm the page cache so the comparison is about access pattern.
    let _ = std::fs::read(path)?;

    let mut ram_best = f64::INFINITY;
    let mut ram_checksum = 0u64;
    let mut total_frames = 0u64;
    let mut utterances = 0usize;
    for _ in 0..reps {
        let started = Instant::now();
        let ds = PackedDataset::load(path)?;
        let mut acc = 0u64;
        let mut frames = 0u64;
        for idx in 0..ds.manifest().n_utterances() {
            let seq = ds.unpack_index(idx)?;
            frames += seq.frames() as u64;
            acc ^= checksum(&seq);
        }
        let elapsed = started.elapsed().as_secs_f64();
        ram_best = ram_best.min(elapsed);
        ram_checksum = acc;
        total_frames = frames;
        utterances = ds.manifest().n_utterances();
    }

    let mut stream_best = f64::INFINITY;
    let mut stream_checksum = 0u64;
    for _ in 0..reps {
        let started = Instant::now();
        let (manifest, payload_offset) = read_manifest(path)?;
        let mut acc = 0u64;
        for id in &manifest.utterance_ids {
            let seq = read_utterance_streaming(path, &manifest, payload_offset, id)?;
            acc ^= checksum(&seq);
        }
        let elapsed = started.elapsed().as_secs_f64();
        stream_best = stream_best.min(elapsed);
        stream_checksum = acc;
    }

    let in_ram_fps = total_frames as f64 / ram_best;
    let streaming_fps = total_frames as f64 / stream_best;
    Ok(ThroughputReport {
        utterances,
        total_frames,
        in_ram_frames_per_sec: in_ram_fps,
        streaming_frames_per_sec: streaming_fps,
        ratio: in_ram_fps / streaming_fps,
        checksums_equal: ram_checksum == stream_checksum,
        repetitions: reps,
    })
}
