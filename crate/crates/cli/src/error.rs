use std::io::ErrorKind;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] buda_core::Error),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("inconsistent data: {0}")]
    Inconsistent(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl CliError {
    /// 0 success, 2 config, 3 missing input, 4 inconsistent data, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        use buda_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Inconsistent(_) => 4,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidDims(_) | E::KernelTooLarge { .. } => 2,
                E::Io { source, .. } if source.kind() == ErrorKind::NotFound => 3,
                E::DimensionMismatch(_) | E::SpaceMismatch { .. } | E::CorruptVolume { .. } | E::UnsupportedFormat(_) => 4,
                _ => 1,
            },
        }
    }
}
