//! Pretraining loop binding masking, encoder, and target strategies.

pub mod batches;
pub mod bench;
pub mod metrics;
pub mod schedule;

pub use batches::{BatchItem, BatchStream};
pub use bench::{bench_throughput, ThroughputReport};
pub use metrics::{read_metrics, MetricsLog, TrainMetrics, METRICS_SCHEMA};
pub use schedule::{lr_dino, lr_hubert};

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{encoder_config_to_flat, FlatConfig};
use crate::encoder::checkpoint::{Checkpoint, TeacherCheckpoint};
use crate::encoder::{
    sample_quantizer_dropout, AdamConfig, EncoderConfig, EncoderState, HeadSpec, SequenceExample,
};
use crate::error::{Error, Result};
use crate::masking::sample_mask;
use crate::rng::{stream_rng, Purpose};
use crate::store::PackedDataset;
use crate::targets::online::{EmaSchedule, TeacherState};
use crate::targets::TargetStore;
use crate::units::CodecUnitSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Reconstruction,
    OfflineKmeans,
    Online,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Reconstruction => "reconstruction",
            Strategy::OfflineKmeans => "offline_kmeans",
            Strategy::Online => "online",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(Strategy::Reconstruction),
            "offline_kmeans" => Ok(Strategy::OfflineKmeans),
            "online" => Ok(Strategy::Online),
            other => Err(Error::InvalidConfig(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrScheduleKind {
    Hubert,
    Dino,
}

impl LrScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LrScheduleKind::Hubert => "hubert",
            LrScheduleKind::Dino => "dino",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hubert" => Ok(LrScheduleKind::Hubert),
            "dino" => Ok(LrScheduleKind::Dino),
            other => Err(Error::InvalidConfig(format!(
                "unknown lr schedule {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub dataset: PathBuf,
    /// Label store for the offline strategy.
    pub targets_path: Option<PathBuf>,
    /// Codec file backing embedding initialization.
    pub codec_path: Option<PathBuf>,
    pub init_from_codec: bool,
    pub encoder: EncoderConfig,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub batch_frames: usize,
    pub crop_frames: usize,
    pub mask_span: usize,
    pub mask_start_prob: f64,
    pub lr_kind: LrScheduleKind,
    pub peak_lr: f64,
    pub lr_warmup: u64,
    /// Decay endpoint for the hubert shape.
    pub lr_total: u64,
    /// Constant-phase length for the dino shape.
    pub lr_constant: u64,
    /// Decay-phase length for the dino shape.
    pub lr_decay: u64,
    pub adam: AdamConfig,
    /// Global-norm clip; 0 disables.
    pub clip_norm: f64,
    pub online_codebook_size: usize,
    pub online_codebook_decay: f64,
    /// "upper_half", an inclusive range "5-12", or a comma list "2,4".
    pub clustered_layers: String,
    pub ema: EmaSchedule,
}

impl TrainConfig {
    pub fn seed(&self) -> u64 {
        self.encoder.seed
    }

    /// Desk-scale recipe: a few hundred steps, 2-layer encoder. Codebook
    /// sizes bind from the dataset manifest at run start.
    pub fn desk(strategy: Strategy) -> Self {
        let total = 600;
        Self {
            strategy,
            dataset: PathBuf::new(),
            targets_path: None,
            codec_path: None,
            init_from_codec: false,
            encoder: EncoderConfig::desk_scale(Vec::new(), 0),
            total_steps: total,
            checkpoint_every: 200,
            log_every: 20,
            batch_frames: 1500,
            crop_frames: 400,
            mask_span: 10,
            mask_start_prob: 0.08,
            lr_kind: match strategy {
                Strategy::Online => LrScheduleKind::Dino,
                _ => LrScheduleKind::Hubert,
            },
            peak_lr: 2e-3,
            lr_warmup: total / 10,
            lr_total: total,
            lr_constant: total * 47 / 100,
            lr_decay: total / 2,
            adam: AdamConfig::default(),
            clip_norm: 10.0,
            online_codebook_size: 64,
            online_codebook_decay: 0.9,
            clustered_layers: "upper_half".to_string(),
            ema: EmaSchedule {
                start: 0.99,
                end: 0.999,
                warmup_steps: total * 3 / 40,
                freeze_step: total / 2,
            },
        }
    }

    /// Paper-scale recipe; exists for schedule fidelity, not execution.
    pub fn paper(strategy: Strategy) -> Self {
        let minutes = match strategy {
            Strategy::Online => 63,
            _ => 47,
        };
        Self {
            strategy,
            dataset: PathBuf::new(),
            targets_path: None,
            codec_path: None,
            init_from_codec: true,
            encoder: EncoderConfig::paper_scale(Vec::new(), 0),
            total_steps: 400_000,
            checkpoint_every: 25_000,
            log_every: 100,
            batch_frames: minutes * 60 * 50,
            crop_frames: 2_000,
            mask_span: 10,
            mask_start_prob: 0.08,
            lr_kind: match strategy {
                Strategy::Online => LrScheduleKind::Dino,
                _ => LrScheduleKind::Hubert,
            },
            peak_lr: 5e-4,
            lr_warmup: match strategy {
                Strategy::Online => 12_000,
                _ => 32_000,
            },
            lr_total: 400_000,
            lr_constant: 188_000,
            lr_decay: 200_000,
            adam: AdamConfig::default(),
            clip_norm: 10.0,
            online_codebook_size: 256,
            online_codebook_decay: 0.9,
            clustered_layers: "5-12".to_string(),
            ema: EmaSchedule::default(),
        }
    }

    pub fn preset(name: &str, strategy: Strategy) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(strategy)),
            "paper" => Ok(Self::paper(strategy)),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_kind {
            LrScheduleKind::Hubert => lr_hubert(step, self.peak_lr, self.lr_warmup, self.lr_total),
            LrScheduleKind::Dino => lr_dino(
                step,
                self.peak_lr,
                self.lr_warmup,
                self.lr_constant,
                self.lr_decay,
            ),
        }
    }

    /// 1-based indices of the teacher layers that carry online codebooks.
    pub fn clustered_layer_indices(&self) -> Result<Vec<usize>> {
        let n = self.encoder.n_layers;
        let spec = self.clustered_layers.trim();
        let layers: Vec<usize> = if spec == "upper_half" {
            (n / 2 + 1..=n).collect()
        } else if let Some((a, b)) = spec.split_once('-') {
            let a: usize = a.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("bad clustered_layers range {spec:?}"))
            })?;
            let b: usize = b.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("bad clustered_layers range {spec:?}"))
            })?;
            (a..=b).collect()
        } else {
            spec.split(',')
                .map(|v| {
                    v.trim().parse().map_err(|_| {
                        Error::InvalidConfig(format!("bad clustered_layers entry {v:?}"))
                    })
                })
                .collect::<Result<Vec<usize>>>()?
        };
        if layers.is_empty() || layers.iter().any(|&l| l == 0 || l > n) {
            return Err(Error::InvalidConfig(format!(
                "clustered_layers {spec:?} outside 1..={n}"
            )));
        }
        Ok(layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.total_steps == 0 {
            // Allowed: checkpoint equals initialization.
        }
        if self.batch_frames < self.crop_frames {
            return Err(Error::InvalidConfig(format!(
                "batch_frames {} below crop_frames {}",
                self.batch_frames, self.crop_frames
            )));
        }
        if self.mask_span == 0 || !(0.0..=1.0).contains(&self.mask_start_prob) {
            return Err(Error::InvalidConfig("bad masking parameters".into()));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::InvalidConfig(
                "checkpoint_every and log_every must be positive".into(),
            ));
        }
        if self.strategy == Strategy::OfflineKmeans && self.targets_path.is_none() {
            return Err(Error::InvalidConfig(
                "offline_kmeans strategy needs a targets file".into(),
            ));
        }
        if self.init_from_codec && self.codec_path.is_none() {
            return Err(Error::InvalidConfig(
                "init_from_codec needs a codec file".into(),
            ));
        }
        if self.strategy == Strategy::Online {
            self.clustered_layer_indices()?;
            if !(0.0..=1.0).contains(&self.online_codebook_decay) {
                return Err(Error::InvalidConfig("bad online_codebook_decay".into()));
            }
        }
        Ok(())
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut flat = FlatConfig::new();
        flat.set("preset", "none");
        flat.set("strategy", self.strategy.as_str());
        flat.set("dataset", self.dataset.display());
        if let Some(p) = &self.targets_path {
            flat.set("targets", p.display());
        }
        if let Some(p) = &self.codec_path {
            flat.set("codec", p.display());
        }
        flat.set("init_from_codec", self.init_from_codec);
        encoder_config_to_flat(&self.encoder, &mut flat);
        flat.set("total_steps", self.total_steps);
        flat.set("checkpoint_every", self.checkpoint_every);
        flat.set("log_every", self.log_every);
        flat.set("batch_frames", self.batch_frames);
        flat.set("crop_frames", self.crop_frames);
        flat.set("mask_span", self.mask_span);
        flat.set("mask_start_prob", self.mask_start_prob);
        flat.set("lr_schedule", self.lr_kind.as_str());
        flat.set("peak_lr", self.peak_lr);
        flat.set("lr_warmup", self.lr_warmup);
        flat.set("lr_total", self.lr_total);
        flat.set("lr_constant", self.lr_constant);
        flat.set("lr_decay", self.lr_decay);
        flat.set("adam_beta1", self.adam.beta1);
        flat.set("adam_beta2", self.adam.beta2);
        flat.set("adam_eps", self.adam.eps);
        flat.set("weight_decay", self.adam.weight_decay);
        flat.set("clip_norm", self.clip_norm);
        flat.set("online_codebook_size", self.online_codebook_size);
        flat.set("online_codebook_decay", self.online_codebook_decay);
        flat.set("clustered_layers", &self.clustered_layers);
        flat.set("ema_start", self.ema.start);
        flat.set("ema_end", self.ema.end);
        flat.set("ema_warmup_steps", self.ema.warmup_steps);
        flat.set("ema_freeze_step", self.ema.freeze_step);
        flat
    }

    /// Builds a config from flat text: `preset` and `strategy` pick the
    /// baseline, every other present key overrides it. Unknown keys are
    /// rejected.
    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        const KNOWN: &[&str] = &[
            "preset",
            "strategy",
            "dataset",
            "targets",
            "codec",
            "init_from_codec",
            "codebook_sizes",
            "d_model",
            "n_layers",
            "n_heads",
            "ffn_width",
            "max_positions",
            "temperature",
            "quantizer_dropout",
            "seed",
            "total_steps",
            "checkpoint_every",
            "log_every",
            "batch_frames",
            "crop_frames",
            "mask_span",
            "mask_start_prob",
            "lr_schedule",
            "peak_lr",
            "lr_warmup",
            "lr_total",
            "lr_constant",
            "lr_decay",
            "adam_beta1",
            "adam_beta2",
            "adam_eps",
            "weight_decay",
            "clip_norm",
            "online_codebook_size",
            "online_codebook_decay",
            "clustered_layers",
            "ema_start",
            "ema_end",
            "ema_warmup_steps",
            "ema_freeze_step",
        ];
        for key in flat.keys() {
            if !KNOWN.contains(&key) {
                return Err(Error::InvalidConfig(format!("unknown config key {key:?}")));
            }
        }
        let strategy = Strategy::parse(flat.get("strategy").unwrap_or("reconstruction"))?;
        let preset = flat.get("preset").unwrap_or("desk");
        let mut config = if preset == "none" {
            Self::desk(strategy)
        } else {
            Self::preset(preset, strategy)?
        };
        config.strategy = strategy;
        if let Some(v) = flat.get("dataset") {
            config.dataset = PathBuf::from(v);
        }
        if let Some(v) = flat.get("targets") {
            config.targets_path = Some(PathBuf::from(v));
        }
        if let Some(v) = flat.get("codec") {
            config.codec_path = Some(PathBuf::from(v));
        }
        config.init_from_codec = flat.parse_or("init_from_codec", config.init_from_codec)?;
        if flat.contains("codebook_sizes") {
            config.encoder.codebook_sizes = flat.parse_list("codebook_sizes")?;
        }
        config.encoder.d_model = flat.parse_or("d_model", config.encoder.d_model)?;
        config.encoder.n_layers = flat.parse_or("n_layers", config.encoder.n_layers)?;
        config.encoder.n_heads = flat.parse_or("n_heads", config.encoder.n_heads)?;
        config.encoder.ffn_width = flat.parse_or("ffn_width", config.encoder.ffn_width)?;
        config.encoder.max_positions =
            flat.parse_or("max_positions", config.encoder.max_positions)?;
        config.encoder.temperature = flat.parse_or("temperature", config.encoder.temperature)?;
        config.encoder.quantizer_dropout_prob =
            flat.parse_or("quantizer_dropout", config.encoder.quantizer_dropout_prob)?;
        config.encoder.seed = flat.parse_or("seed", config.encoder.seed)?;
        config.total_steps = flat.parse_or("total_steps", config.total_steps)?;
        config.checkpoint_every = flat.parse_or("checkpoint_every", config.checkpoint_every)?;
        config.log_every = flat.parse_or("log_every", config.log_every)?;
        config.batch_frames = flat.parse_or("batch_frames", config.batch_frames)?;
        config.crop_frames = flat.parse_or("crop_frames", config.crop_frames)?;
        config.mask_span = flat.parse_or("mask_span", config.mask_span)?;
        config.mask_start_prob = flat.parse_or("mask_start_prob", config.mask_start_prob)?;
        if let Some(v) = flat.get("lr_schedule") {
            config.lr_kind = LrScheduleKind::parse(v)?;
        }
        config.peak_lr = flat.parse_or("peak_lr", config.peak_lr)?;
        config.lr_warmup = flat.parse_or("lr_warmup", config.lr_warmup)?;
        config.lr_total = flat.parse_or("lr_total", config.lr_total)?;
        config.lr_constant = flat.parse_or("lr_constant", config.lr_constant)?;
        config.lr_decay = flat.parse_or("lr_decay", config.lr_decay)?;
        config.adam.beta1 = flat.parse_or("adam_beta1", config.adam.beta1)?;
        config.adam.beta2 = flat.parse_or("adam_beta2", config.adam.beta2)?;
        config.adam.eps = flat.parse_or("adam_eps", config.adam.eps)?;
        config.adam.weight_decay = flat.parse_or("weight_decay", config.adam.weight_decay)?;
        config.clip_norm = flat.parse_or("clip_norm", config.clip_norm)?;
        config.online_codebook_size =
            flat.parse_or("online_codebook_size", config.online_codebook_size)?;
        config.online_codebook_decay =
            flat.parse_or("online_codebook_decay", config.online_codebook_decay)?;
        if let Some(v) = flat.get("clustered_layers") {
            config.clustered_layers = v.to_string();
        }
        config.ema.start = flat.parse_or("ema_start", config.ema.start)?;
        config.ema.end = flat.parse_or("ema_end", config.ema.end)?;
        config.ema.warmup_steps = flat.parse_or("ema_warmup_steps", config.ema.warmup_steps)?;
        config.ema.freeze_step = flat.parse_or("ema_freeze_step", config.ema.freeze_step)?;
        Ok(config)
    }

    pub fn config_hash(&self) -> String {
        self.to_flat().sha256_hex()
    }

    /// Fills codebook sizes from the dataset manifest, or checks agreement
    /// when the config already pinned them.
    pub fn bind_dataset(&mut self, manifest: &crate::store::DatasetManifest) -> Result<()> {
        if self.encoder.codebook_sizes.is_empty() {
            self.encoder.codebook_sizes = manifest.codebook_sizes.clone();
        } else if self.encoder.codebook_sizes != manifest.codebook_sizes {
            return Err(Error::InvalidConfig(format!(
                "config codebook_sizes {:?} disagree with dataset {:?}",
                self.encoder.codebook_sizes, manifest.codebook_sizes
            )));
        }
        Ok(())
    }

    /// Head layout implied by the strategy.
    pub fn head_spec(&self, offline_vocab: Option<usize>) -> Result<HeadSpec> {
        match self.strategy {
            Strategy::Reconstruction => Ok(HeadSpec {
                class_counts: self
                    .encoder
                    .codebook_sizes
                    .iter()
                    .map(|&k| k as usize)
                    .collect(),
            }),
            Strategy::OfflineKmeans => {
                let vocab = offline_vocab.ok_or_else(|| {
                    Error::InvalidConfig("offline strategy without a label store".into())
                })?;
                Ok(HeadSpec {
                    class_counts: vec![vocab],
                })
            }
            Strategy::Online => Ok(HeadSpec {
                class_counts: vec![
                    self.online_codebook_size;
                    self.clustered_layer_indices()?.len()
                ],
            }),
        }
    }
}

/// Run-level counters; the teacher-side ones instrument the invariant that
/// the teacher never sees masked input (there is no code path that could
/// increment the masked counter).
#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub zero_mask_batches: u64,
    pub teacher_unmasked_forwards: u64,
    pub teacher_masked_forwards: u64,
}

/// Everything `train_step` needs besides the mutable state.
pub struct StepContext<'a> {
    pub config: &'a TrainConfig,
    /// Unpacked dataset in manifest order.
    pub sequences: &'a [CodecUnitSequence],
    /// Offline labels aligned to `sequences` (full, uncropped).
    pub offline_labels: Option<&'a [Vec<u32>]>,
}

/// Stream index for per-item draws: unique per (step, position).
fn draw_index(step: u64, item: usize) -> u64 {
    step * (1 << 20) + item as u64
}

fn crop_sequence(seq: &CodecUnitSequence, item: &BatchItem) -> CodecUnitSequence {
    CodecUnitSequence {
        codes: seq
            .codes
            .slice(ndarray::s![
                item.crop_start..item.crop_start + item.crop_len,
                ..
            ])
            .to_owned(),
        frame_rate_hz: seq.frame_rate_hz,
        codebook_sizes: seq.codebook_sizes.clone(),
    }
}

/// One optimization step at `step`. Samples masks and dropout, derives
/// targets for the configured strategy, updates the student, and (online)
/// updates codebooks and the EMA teacher. Returns the step's metrics.
pub fn train_step(
    state: &mut EncoderState<f32>,
    teacher: &mut Option<TeacherState<f32>>,
    ctx: &StepContext,
    batch: &[BatchItem],
    step: u64,
    stats: &mut RunStats,
) -> Result<TrainMetrics> {
    let config = ctx.config;
    let seed = config.seed();
    let started = Instant::now();

    let cropped: Vec<CodecUnitSequence> = batch
        .iter()
        .map(|item| crop_sequence(&ctx.sequences[item.utt_index], item))
        .collect();

    let masks: Vec<crate::masking::MaskSpec> = cropped
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut rng = stream_rng(seed, Purpose::Mask, draw_index(step, i));
            sample_mask(seq.frames(), config.mask_span, config.mask_start_prob, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let n_cb = config.encoder.n_codebooks();
    let dropouts: Vec<usize> = (0..cropped.len())
        .map(|i| {
            let mut rng = stream_rng(seed, Purpose::QuantizerDropout, draw_index(step, i));
            sample_quantizer_dropout(config.encoder.quantizer_dropout_prob, n_cb, &mut rng)
        })
        .collect();

    // Targets, strategy by strategy; online additionally updates codebooks
    // against the pre-update teacher.
    let target_streams: Vec<Vec<Vec<u32>>> = match config.strategy {
        Strategy::Reconstruction => cropped
            .iter()
            .map(|seq| (0..n_cb).map(|i| seq.codes.column(i).to_vec()).collect())
            .collect(),
        Strategy::OfflineKmeans => {
            let labels = ctx.offline_labels.ok_or_else(|| {
                Error::InvalidConfig("offline strategy without labels".into())
            })?;
            batch
                .iter()
                .map(|item| {
                    let full = &labels[item.utt_index];
                    vec![full[item.crop_start..item.crop_start + item.crop_len].to_vec()]
                })
                .collect()
        }
        Strategy::Online => {
            let teacher = teacher.as_mut().ok_or_else(|| {
                Error::InvalidConfig("online strategy without a teacher".into())
            })?;
            let refs: Vec<&CodecUnitSequence> = cropped.iter().collect();
            let before = teacher.unmasked_forwards;
            let assignments = teacher.online_targets_and_update(
                &config.encoder,
                &refs,
                config.online_codebook_decay,
                seed,
                step,
            )?;
            stats.teacher_unmasked_forwards += teacher.unmasked_forwards - before;
            assignments.into_iter().map(|a| a.streams).collect()
        }
    };

    let examples: Vec<SequenceExample> = cropped
        .iter()
        .enumerate()
        .map(|(i, units)| SequenceExample {
            units,
            mask: &masks[i],
            n_active_codebooks: dropouts[i],
            targets: target_streams[i].iter().map(|v| v.as_slice()).collect(),
        })
        .collect();

    let (loss, mut grads, loss_stats) = state.compute_loss_and_grads(&examples)?;
    if !loss.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "non-finite loss at step {step}"
        )));
    }

    let lr = config.lr_at(step);
    if loss_stats.pairs > 0 {
        crate::encoder::adam::clip_global_norm(&mut grads, config.clip_norm);
        state.opt.apply(&mut state.params, &grads, lr, &config.adam);
    } else {
        stats.zero_mask_batches += 1;
    }

    // Teacher tracks the post-update student; frozen past the freeze step.
    if let Some(teacher) = teacher.as_mut() {
        if step >= config.ema.freeze_step {
            teacher.frozen = true;
        }
        let decay = config.ema.decay_at(step);
        teacher.ema_update(&state.params, decay);
    }

    let elapsed = started.elapsed().as_secs_f64();
    let batch_frames: usize = cropped.iter().map(|c| c.frames()).sum();
    Ok(TrainMetrics {
        schema: METRICS_SCHEMA.to_string(),
        step,
        loss,
        accuracy_per_head: loss_stats.accuracy_per_head(),
        lr,
        ema_decay: teacher.as_ref().map(|_| config.ema.decay_at(step)),
        masked_frames: loss_stats.masked_frames,
        batch_frames,
        frames_per_sec: if elapsed > 0.0 {
            batch_frames as f64 / elapsed
        } else {
            0.0
        },
        step_wall_ms: elapsed * 1000.0,
        zero_mask_batches: stats.zero_mask_batches,
    })
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub state: EncoderState<f32>,
    pub teacher: Option<TeacherState<f32>>,
    pub stats: RunStats,
}

fn write_checkpoint(
    config: &TrainConfig,
    state: &EncoderState<f32>,
    teacher: &Option<TeacherState<f32>>,
    step: u64,
    path: &Path,
) -> Result<()> {
    let ckpt = Checkpoint {
        config_text: config.to_flat().to_text(),
        step,
        head_class_counts: state.head_spec.class_counts.clone(),
        params: state.params.clone(),
        adam: state.opt.clone(),
        teacher: teacher.as_ref().map(TeacherCheckpoint::from_state),
    };
    ckpt.save(path)
}

/// Runs pretraining to `config.total_steps`, checkpointing at the
/// configured cadence. `resume` continues from a checkpoint after verifying
/// the config hash; continuation is bit-identical to an uninterrupted run.
pub fn pretrain(
    config: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PretrainOutcome> {
    let mut config = config.clone();
    let dataset = PackedDataset::load(&config.dataset)?;
    config.bind_dataset(dataset.manifest())?;
    config.validate()?;

    // Offline labels, aligned to manifest order.
    let offline_store = match config.strategy {
        Strategy::OfflineKmeans => {
            let path = config.targets_path.as_ref().expect("validated");
            Some(TargetStore::load(path)?)
        }
        _ => None,
    };
    let offline_labels: Option<Vec<Vec<u32>>> = match &offline_store {
        None => None,
        Some(store) => {
            let manifest = dataset.manifest();
            let mut labels = Vec::with_capacity(manifest.n_utterances());
            for (idx, id) in manifest.utterance_ids.iter().enumerate() {
                let run = store.get(id)?;
                if run.len() != manifest.frame_counts[idx] {
                    return Err(Error::ShapeMismatch(format!(
                        "utterance {id}: {} labels vs {} frames",
                        run.len(),
                        manifest.frame_counts[idx]
                    )));
                }
                labels.push(run.to_vec());
            }
            Some(labels)
        }
    };

    let head_spec = config.head_spec(offline_store.as_ref().map(|s| s.vocab))?;
    let config_hash = config.config_hash();

    let (mut state, mut teacher, start_step) = match resume {
        None => {
            let mut state = EncoderState::<f32>::init(config.encoder.clone(), head_spec)?;
            if config.init_from_codec {
                let codec =
                    crate::rvq::ToyCodec::load(config.codec_path.as_ref().expect("validated"))?;
                state.init_embeddings_from_codec(&codec.stages, config.seed())?;
            }
            let teacher = match config.strategy {
                Strategy::Online => Some(TeacherState::from_student(
                    &state,
                    config.clustered_layer_indices()?,
                    config.online_codebook_size,
                )?),
                _ => None,
            };
            (state, teacher, 0u64)
        }
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            let ckpt_hash = ckpt.config_hash()?;
            if ckpt_hash != config_hash {
                return Err(Error::ConfigMismatch {
                    checkpoint: ckpt_hash,
                    requested: config_hash.clone(),
                });
            }
            let step = ckpt.step;
            let state = ckpt.to_encoder_state()?;
            let teacher = match config.strategy {
                Strategy::Online => Some(
                    ckpt.teacher
                        .ok_or_else(|| {
                            Error::BadHeader("checkpoint lacks the teacher section".into())
                        })?
                        .into_state(),
                ),
                _ => None,
            };
            (state, teacher, step)
        }
    };

    std::fs::create_dir_all(out_dir)?;
    let sequences: Vec<CodecUnitSequence> = dataset
        .unpack_all()?
        .into_iter()
        .map(|(_, seq)| seq)
        .collect();
    let frame_counts: Vec<usize> = sequences.iter().map(|s| s.frames()).collect();
    let mut stream = BatchStream::new(
        frame_counts,
        config.batch_frames,
        config.crop_frames,
        config.seed(),
    )?;
    stream.advance_to(start_step);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = MetricsLog::append_to(&metrics_path)?;
    let mut stats = RunStats::default();
    let ctx = StepContext {
        config: &config,
        sequences: &sequences,
        offline_labels: offline_labels.as_deref(),
    };

    for step in start_step..config.total_steps {
        let batch = stream.next_batch();
        let record = match train_step(&mut state, &mut teacher, &ctx, &batch, step, &mut stats) {
            Ok(record) => record,
            Err(err) => {
                let diag = out_dir.join(format!("diagnostic_step{step}.c2m"));
                write_checkpoint(&config, &state, &teacher, step, &diag)?;
                return Err(match err {
                    Error::InvalidConfig(msg) if msg.contains("non-finite") => {
                        Error::NonFiniteLoss {
                            step,
                            checkpoint: diag.display().to_string(),
                        }
                    }
                    other => other,
                });
            }
        };
        let completed = step + 1;
        if completed % config.log_every == 0 || completed == config.total_steps {
            log.write(&record)?;
        }
        if completed % config.checkpoint_every == 0 && completed != config.total_steps {
            let path = out_dir.join(format!("ckpt_step{completed}.c2m"));
            write_checkpoint(&config, &state, &teacher, completed, &path)?;
        }
    }

    let final_path = out_dir.join("final.c2m");
    write_checkpoint(&config, &state, &teacher, config.total_steps, &final_path)?;
    if let Some(t) = &teacher {
        stats.teacher_unmasked_forwards = stats
            .teacher_unmasked_forwards
            .max(t.unmasked_forwards);
    }
    Ok(PretrainOutcome {
        final_checkpoint: final_path,
        metrics_path,
        state,
        teacher,
        stats,
    })
}
