//! Gradient-free inference for Bayesian inverse problems with Gaussian
//! likelihoods.
//!
//! The central algorithm is sequential Kalman tuning (SKT): an annealed
//! particle sampler in which every temperature level is initialised by an
//! ensemble Kalman inversion update and then corrected by t-preconditioned
//! Crank-Nicolson (tpCN) Metropolis sweeps. Importance-resampling SMC,
//! standalone EKI/FAKI and the ensemble Kalman sampler are provided as
//! benchmarks, together with three PDE-constrained test problems.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annealing;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod kalman;
pub mod kernels;
pub mod linalg;
pub mod models;
pub mod precond;
pub mod rng;
pub mod samplers;
pub mod student_t;

pub use ensemble::{
    annealed_log_target, ensemble_moments, evaluate_ensemble, Ensemble, EvalCounter, ForwardBatch,
    ForwardModel, ModelSpec, NoiseCov, Prior,
};
pub use error::{CoreError, Result};
pub use samplers::{run, RunConfig, RunResult, Scheme, SweepMode};
