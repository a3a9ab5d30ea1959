//! CLI error type and its mapping to process exit codes.

use skt_core::CoreError;
use thiserror::Error;

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for configuration and input-contract errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for numerical failures inside a run.
pub const EXIT_NUMERICAL: i32 = 3;
/// Exit code for file-system and parse errors.
pub const EXIT_IO: i32 = 4;

/// Errors surfaced by the command-line front end.
#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Failure reported by the core library.
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// One or more seeds of a sweep failed; their rows in `summary.csv` say why.
    #[error("{failed} of {total} seeds failed")]
    SeedsFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::SeedsFailed { .. } => EXIT_NUMERICAL,
            CliError::Core(e) => match e {
                CoreError::Invalid(_) | CoreError::Dimension(_) => EXIT_CONFIG,
                CoreError::Io { .. } | CoreError::Parse { .. } => EXIT_IO,
                _ => EXIT_NUMERICAL,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
