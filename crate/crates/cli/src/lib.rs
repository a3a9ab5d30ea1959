//! Batch front end for the `skt-core` samplers.
//!
//! A strict TOML configuration names the problem, scheme, kernel, annealing
//! and output settings. The `run` command executes one or more seeds and
//! writes per-seed ensembles, metrics and manifests plus a summary table;
//! `simulate` generates synthetic PDE data; `bias` scores an ensemble
//! against reference moments.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod problem;

pub use commands::{cmd_bias, cmd_run, cmd_simulate, parse_seeds};
pub use config::ConfigFile;
pub use error::{CliError, Result};

/// Runs `f` inside a rayon pool of `threads` workers (`None`: the global
/// pool). Results do not depend on the worker count.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("cannot build a {n}-thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
