//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by ensemble algorithms, forward models and file IO.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Inputs with incompatible shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A forward model produced a non-finite output for one particle.
    #[error("forward model returned non-finite output for particle {index}")]
    NonFiniteOutput { index: usize },

    /// A forward model failed for one particle.
    #[error("forward model failed for particle {index}: {source}")]
    ParticleFailure {
        index: usize,
        #[source]
        source: Box<CoreError>,
    },

    /// A matrix could not be factorized even after adding diagonal jitter.
    #[error("factorization failed for {what} after jitter up to {jitter:e}")]
    Factorization { what: String, jitter: f64 },

    /// FTCS stability bound violated by the diffusion coefficient.
    #[error("FTCS stability violated: D = {diffusion} gives r = {ratio} > 0.25")]
    Stability { diffusion: f64, ratio: f64 },

    /// Newton iteration did not reach the residual tolerance.
    #[error("Newton solve did not converge at time step {step} (residual {residual:e})")]
    Newton { step: usize, residual: f64 },

    /// A numerical quantity left its valid range.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Malformed input file.
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
