use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt volume {path}: {reason}")]
    CorruptVolume { path: PathBuf, reason: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("expected {expected} data, got {found}")]
    SpaceMismatch { expected: &'static str, found: &'static str },
    #[error("kernel size {kernel} exceeds smallest grid dimension {min_dim}")]
    KernelTooLarge { kernel: usize, min_dim: usize },
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("eigendecomposition failed ({stats}): {reason}")]
    Decomposition { reason: String, stats: String },
    #[error("non-finite iterate at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
