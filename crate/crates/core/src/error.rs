use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("missing embedding for `{0}`")]
    MissingEmbedding(String),

    #[error("zero-norm embedding for `{0}`")]
    ZeroEmbedding(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch} step {step}: {reason}")]
    Divergence {
        epoch: usize,
        step: usize,
        reason: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
