use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] vpglab_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("identity check failed: {0}")]
    Identity(String),

    #[error("every sweep cell failed; first error: {0}")]
    SweepFailed(String),

    #[error("replay mismatch: {0}")]
    Replay(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 ok, 1 identity failure, 2 configuration, 3 IO, 4 every sweep cell failed.
    pub fn exit_code(&self) -> u8 {
        use vpglab_core::Error as E;
        match self {
            CliError::Identity(_) | CliError::Replay(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io { .. } => 3,
            CliError::SweepFailed(_) => 4,
            CliError::Core(E::Io(_) | E::Csv(_)) => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
