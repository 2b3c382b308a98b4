//! Masked-prediction pretraining on discrete codec-unit sequences.
//!
//! The pipeline has three stages: unit extraction (a synthetic corpus pushed
//! through a residual vector quantizer, or externally extracted units
//! imported from text), self-supervised pretraining of a transformer
//! encoder over the packed unit corpus, and frozen-encoder probing on
//! synthetic frame/utterance tasks. Targets for the masked-prediction
//! objective come from one of three strategies: the input codes themselves,
//! offline k-means over encoder latents, or online codebooks learned by an
//! EMA teacher.

pub mod config;
pub mod encoder;
pub mod error;
pub mod extract;
pub mod masking;
pub mod num;
pub mod probe;
pub mod rng;
pub mod rvq;
pub mod store;
pub mod synth;
pub mod targets;
pub mod trainer;
pub mod units;

pub use config::FlatConfig;
pub use encoder::{EncoderConfig, EncoderState, HeadSpec, LayerOutputs};
pub use error::{Error, Result};
pub use extract::{extract_corpus, ExtractConfig, ExtractOutputs};
pub use probe::{evaluate_probe, extract_features, train_probe, ProbeConfig, ProbeLabels, ProbeModel, ProbeReport, ProbeTask};
pub use masking::{apply_mask, sample_mask, MaskSpec};
pub use rvq::ToyCodec;
pub use store::{pack_dataset, storage_report, DatasetManifest, PackedDataset, StorageReport};
pub use synth::{synthesize_corpus, CorpusConfig, CorpusLabels, SyntheticCorpus};
pub use targets::{reconstruction_targets, TargetAssignment, TargetStore, TeacherState};
pub use trainer::{pretrain, Strategy, TrainConfig};
pub use units::CodecUnitSequence;
