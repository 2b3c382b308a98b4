//! EMA teacher with per-layer online codebooks.
//!
//! The teacher is an exponential moving average of the student and only ever
//! sees unmasked input. Each clustered layer keeps a codebook; frames are
//! assigned to their nearest codeword (those assignments are the student's
//! targets) and assigned codewords move toward the batch mean of their
//! latents at a fixed decay. Codewords unassigned for a run of steps are
//! reseeded from a current latent.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::encoder::{embed_units_with, EncoderConfig, EncoderParams, EncoderState, LayerOutputs};
use crate::error::{Error, Result};
use crate::num::{c, Real};
use crate::rng::{stream_rng, Purpose};
use crate::units::CodecUnitSequence;

use super::TargetAssignment;

/// Steps a codeword may go unassigned before it is reseeded.
pub const DEAD_CODEWORD_STEPS: u32 = 1000;

/// Teacher parameter decay schedule: linear from `start` to `end` over
/// `warmup_steps`, constant until `freeze_step`, 1.0 after.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaSchedule {
    pub start: f64,
    pub end: f64,
    pub warmup_steps: u64,
    pub freeze_step: u64,
}

impl Default for EmaSchedule {
    fn default() -> Self {
        Self {
            start: 0.999,
            end: 0.9999,
            warmup_steps: 30_000,
            freeze_step: 200_000,
        }
    }
}

impl EmaSchedule {
    pub fn decay_at(&self, step: u64) -> f64 {
        ema_decay_at(step, self.start, self.end, self.warmup_steps, self.freeze_step)
    }
}

/// Decay value at `step` under the warmup/constant/frozen schedule.
pub fn ema_decay_at(
    step: u64,
    warmup_start: f64,
    warmup_end: f64,
    warmup_steps: u64,
    freeze_step: u64,
) -> f64 {
    if step >= freeze_step {
        return 1.0;
    }
    if step >= warmup_steps {
        return warmup_end;
    }
    if warmup_steps == 0 {
        return warmup_end;
    }
    let frac = step as f64 / warmup_steps as f64;
    warmup_start + (warmup_end - warmup_start) * frac
}

/// In-place EMA update: every teacher tensor becomes
/// `decay * teacher + (1 - decay) * student`.
pub fn ema_update_teacher<F: Real>(
    teacher: &mut EncoderParams<F>,
    student: &EncoderParams<F>,
    decay: f64,
) {
    let d = c::<F>(decay);
    let one_minus = c::<F>(1.0 - decay);
    let mut mine = teacher.tensors_mut();
    let theirs = student.tensors();
    assert_eq!(mine.len(), theirs.len(), "teacher/student shapes differ");
    for ((_, t), (_, s)) in mine.iter_mut().zip(theirs.iter()) {
        ndarray::Zip::from(&mut **t).and(*s).for_each(|tv, &sv| {
            *tv = d * *tv + one_minus * sv;
        });
    }
}

/// EMA copy of the encoder plus per-layer online codebooks.
#[derive(Debug, Clone)]
pub struct TeacherState<F> {
    pub params: EncoderParams<F>,
    /// 1-based indices of the clustered layers.
    pub clustered_layers: Vec<usize>,
    pub codebook_size: usize,
    /// One V x d codebook per clustered layer; empty until the first batch.
    pub codebooks: Vec<Array2<F>>,
    /// Consecutive unassigned steps per codeword, per layer.
    pub dead_counters: Vec<Vec<u32>>,
    pub frozen: bool,
    /// Unmasked teacher forward passes observed (instrumentation; the
    /// masked-input counter has no code path that can increment it).
    pub unmasked_forwards: u64,
}

impl<F: Real> TeacherState<F> {
    /// Starts the teacher as an exact copy of the student.
    pub fn from_student(
        student: &EncoderState<F>,
        clustered_layers: Vec<usize>,
        codebook_size: usize,
    ) -> Result<Self> {
        if clustered_layers.is_empty() {
            return Err(Error::InvalidConfig("no clustered layers".into()));
        }
        for &l in &clustered_layers {
            if l == 0 || l > student.config.n_layers {
                return Err(Error::InvalidConfig(format!(
                    "clustered layer {l} outside 1..={}",
                    student.config.n_layers
                )));
            }
        }
        if codebook_size == 0 {
            return Err(Error::InvalidConfig("codebook size must be >= 1".into()));
        }
        Ok(Self {
            params: student.params.clone(),
            clustered_layers,
            codebook_size,
            codebooks: Vec::new(),
            dead_counters: Vec::new(),
            frozen: false,
            unmasked_forwards: 0,
        })
    }

    pub fn codebooks_initialized(&self) -> bool {
        !self.codebooks.is_empty()
    }

    /// EMA parameter update; a no-op once frozen (or at decay exactly 1.0),
    /// leaving the teacher bit-identical.
    pub fn ema_update(&mut self, student: &EncoderParams<F>, decay: f64) {
        if self.frozen || decay >= 1.0 {
            return;
        }
        ema_update_teacher(&mut self.params, student, decay);
    }

    /// Teacher forward over unmasked, full-codebook input. There is no
    /// masked variant of this path.
    pub fn forward_unmasked(
        &mut self,
        config: &EncoderConfig,
        units: &CodecUnitSequence,
    ) -> Result<LayerOutputs<F>> {
        let z = embed_units_with(&self.params, config, units, config.n_codebooks())?;
        let (outputs, _) = crate::encoder::forward_stack(&self.params, config, &z)?;
        self.unmasked_forwards += 1;
        Ok(outputs)
    }

    /// Initializes each layer's codebook from that layer's latents, sampled
    /// uniformly without replacement.
    fn init_codebooks(&mut self, per_layer_latents: &[Array2<F>], seed: u64) -> Result<()> {
        let v = self.codebook_size;
        let mut codebooks = Vec::with_capacity(per_layer_latents.len());
        for (li, latents) in per_layer_latents.iter().enumerate() {
            let n = latents.nrows();
            if n < v {
                return Err(Error::InvalidConfig(format!(
                    "first batch has {n} frames, fewer than codebook size {v}"
                )));
            }
            let mut rng = stream_rng(seed, Purpose::CodebookInit, li as u64);
            // Partial Fisher-Yates: first v entries of a shuffled index set.
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..v {
                let j = rng.random_range(i..n);
                idx.swap(i, j);
            }
            let mut cb = Array2::<F>::zeros((v, latents.ncols()));
            for (row, &src) in idx[..v].iter().enumerate() {
                cb.row_mut(row).assign(&latents.row(src));
            }
            codebooks.push(cb);
        }
        self.codebooks = codebooks;
        self.dead_counters = vec![vec![0; v]; per_layer_latents.len()];
        Ok(())
    }

    /// Derives one batch of online targets and applies the codebook update.
    ///
    /// Per clustered layer: run the teacher on each utterance's unmasked
    /// units, assign every frame to its nearest codeword (ties to the lowest
    /// index) — these assignments are the emitted targets — then move each
    /// assigned codeword toward the batch mean of its latents:
    /// `v <- decay * v + (1 - decay) * mean`. Unassigned codewords are left
    /// alone and their dead counters advance.
    ///
    /// Codebooks initialize from the first batch seen. `step` and `seed` key
    /// the deterministic reseeding draws.
    pub fn online_targets_and_update(
        &mut self,
        config: &EncoderConfig,
        batch: &[&CodecUnitSequence],
        codebook_decay: f64,
        seed: u64,
        step: u64,
    ) -> Result<Vec<TargetAssignment>> {
        if !(0.0..=1.0).contains(&codebook_decay) {
            return Err(Error::InvalidConfig(format!(
                "codebook decay {codebook_decay} outside [0, 1]"
            )));
        }
        let n_layers = self.clustered_layers.len();
        // Teacher latents per utterance per clustered layer.
        let mut per_utt: Vec<Vec<Array2<F>>> = Vec::with_capacity(batch.len());
        for units in batch {
            let outputs = self.forward_unmasked(config, units)?;
            let latents: Vec<Array2<F>> = self
                .clustered_layers
                .iter()
                .map(|&l| outputs.layer(l).clone())
                .collect();
            per_utt.push(latents);
        }

        if !self.codebooks_initialized() {
            let stacked: Vec<Array2<F>> = (0..n_layers)
                .map(|li| {
                    let views: Vec<_> = per_utt.iter().map(|u| u[li].view()).collect();
                    ndarray::concatenate(ndarray::Axis(0), &views).expect("matching dims")
                })
                .collect();
            self.init_codebooks(&stacked, seed)?;
        }
        if self.codebooks.is_empty() {
            return Err(Error::InvalidConfig("codebooks uninitialized".into()));
        }

        // Assign against the pre-update codebooks.
        let v = self.codebook_size;
        let mut assignments: Vec<Vec<Vec<u32>>> = Vec::with_capacity(batch.len());
        let mut sums: Vec<Array2<F>> = self
            .codebooks
            .iter()
            .map(|cb| Array2::<F>::zeros(cb.raw_dim()))
            .collect();
        let mut counts: Vec<Vec<usize>> = vec![vec![0; v]; n_layers];
        for latents in &per_utt {
            let mut streams = Vec::with_capacity(n_layers);
            for (li, layer_latents) in latents.iter().enumerate() {
                let cb = &self.codebooks[li];
                let labels: Vec<u32> = layer_latents
                    .outer_iter()
                    .map(|frame| nearest_codeword_index(&frame.to_owned(), cb))
                    .collect();
                for (t, &label) in labels.iter().enumerate() {
                    let mut sum_row = sums[li].row_mut(label as usize);
                    sum_row += &layer_latents.row(t);
                    counts[li][label as usize] += 1;
                }
                streams.push(labels);
            }
            assignments.push(streams);
        }

        // EMA codebook update; unassigned codewords unchanged.
        let d = c::<F>(codebook_decay);
        let one_minus = c::<F>(1.0 - codebook_decay);
        for li in 0..n_layers {
            for cw in 0..v {
                if counts[li][cw] > 0 {
                    let inv = c::<F>(1.0 / counts[li][cw] as f64);
                    let mean = &sums[li].row(cw) * inv;
                    let mut row = self.codebooks[li].row_mut(cw);
                    for (rv, &mv) in row.iter_mut().zip(mean.iter()) {
                        *rv = d * *rv + one_minus * mv;
                    }
                    self.dead_counters[li][cw] = 0;
                } else {
                    self.dead_counters[li][cw] += 1;
                    if self.dead_counters[li][cw] >= DEAD_CODEWORD_STEPS {
                        // Reseed from a random latent of this batch.
                        let mut rng = stream_rng(
                            seed,
                            Purpose::CodebookReseed,
                            step.wrapping_mul(1_000_003)
                                .wrapping_add((li * v + cw) as u64),
                        );
                        let total: usize = per_utt.iter().map(|u| u[li].nrows()).sum();
                        let mut pick = rng.random_range(0..total);
                        for latents in &per_utt {
                            let n = latents[li].nrows();
                            if pick < n {
                                self.codebooks[li]
                                    .row_mut(cw)
                                    .assign(&latents[li].row(pick));
                                break;
                            }
                            pick -= n;
                        }
                        self.dead_counters[li][cw] = 0;
                    }
                }
            }
        }

        Ok(assignments
            .into_iter()
            .map(|streams| TargetAssignment {
                streams,
                vocab_sizes: vec![v; n_layers],
            })
            .collect())
    }
}

fn nearest_codeword_index<F: Real>(frame: &Array1<F>, codebook: &Array2<F>) -> u32 {
    let mut best = 0usize;
    let mut best_d = F::infinity();
    for (j, row) in codebook.outer_iter().enumerate() {
        let dist: F = frame
            .iter()
            .zip(row.iter())
            .map(|(&a, &b)| {
                let d = a - b;
                d * d
            })
            .sum();
        if dist < best_d {
            best_d = dist;
            best = j;
        }
    }
    best as u32
}
