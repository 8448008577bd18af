use spe_core::error::SpeError;
use thiserror::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_IO: u8 = 4;
pub const EXIT_VERIFY: u8 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] SpeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Verification(_) => EXIT_VERIFY,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) => match e {
                SpeError::Numerical(_) | SpeError::Autodiff(_) => EXIT_NUMERICAL,
                SpeError::Io(_) | SpeError::Format(_) => EXIT_IO,
                SpeError::DimensionMismatch { .. }
                | SpeError::Empty(_)
                | SpeError::InvalidParameter(_)
                | SpeError::InsufficientData(_) => EXIT_CONFIG,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
