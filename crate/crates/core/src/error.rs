use thiserror::Error;

use crate::diffcore::DiffError;

#[derive(Debug, Error)]
pub enum PaintError {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("image {height}x{width} is not divisible into {patch}x{patch} patches")]
    PatchGeometry {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("image has {got} channels, encoder expects {expected}")]
    ChannelCount { expected: usize, got: usize },
    #[error("pixel value {value} outside [0, 1]")]
    PixelRange { value: f64 },
    #[error("prompt width {got} does not match embedding width {expected}")]
    PromptWidth { expected: usize, got: usize },
    #[error("invalid encoder config: {0}")]
    EncoderConfig(String),

    #[error("prompt memory has no entries")]
    EmptyMemory,
    #[error("entry index {index} out of range for memory of {len} entries")]
    EntryIndex { index: usize, len: usize },
    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("mean query is the zero vector; cannot create a prompt key")]
    DegenerateKey,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("probabilities must sum to 1 (got {sum})")]
    NotNormalized { sum: f64 },

    #[error("invalid adaptation config: {0}")]
    Config(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite gradient in tensor `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("unknown corruption kind `{0}`")]
    UnknownCorruption(String),
    #[error("severity {0} outside 1..=5")]
    Severity(u8),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("source model reached {accuracy:.4} clean accuracy, below the {required:.2} calibration floor")]
    Calibration { accuracy: f64, required: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PaintError>;
