//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("utterance {utterance:?}: code {code} out of range at frame {frame}, codebook {codebook} (size {size})")]
    CodeOutOfRange {
        utterance: String,
        frame: usize,
        codebook: usize,
        code: u32,
        size: u32,
    },

    #[error("utterance {utterance:?} has metadata differing from the corpus ({detail})")]
    HeterogeneousMetadata { utterance: String, detail: String },

    #[error("utterance {0:?} not found")]
    UnknownUtterance(String),

    #[error("utterance {utterance:?}: ragged row at frame {frame} (expected {expected} codes, got {got})")]
    RaggedRow {
        utterance: String,
        frame: usize,
        expected: usize,
        got: usize,
    },

    #[error("bad container header: {0}")]
    BadHeader(String),

    #[error("{file}: parse error at line {line}: {detail}")]
    Parse {
        file: String,
        line: usize,
        detail: String,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite activations in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite loss at step {step}; diagnostic checkpoint written to {checkpoint}")]
    NonFiniteLoss { step: u64, checkpoint: String },

    #[error("k-means requires at least k points (k = {k}, points = {n})")]
    TooFewPoints { k: usize, n: usize },

    #[error("resume config mismatch: checkpoint hash {checkpoint}, requested {requested}")]
    ConfigMismatch {
        checkpoint: String,
        requested: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
