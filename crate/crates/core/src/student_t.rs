//! Multivariate Student-t density and its maximum-likelihood fit by EM.
//!
//! The fit alternates an E-step for the latent scale weights, closed-form
//! updates of the location and scale matrix, and a one-dimensional root find
//! for the degrees of freedom on the observed-data likelihood (the ECME
//! variant of the Liu-Rubin algorithm).

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::ensemble::ensemble_moments;
use crate::error::{CoreError, Result};
use crate::linalg::CholFactor;

/// Lower bound on the degrees of freedom.
pub const NU_MIN: f64 = 0.5;
/// Upper bound on the degrees of freedom; values here are effectively Gaussian.
pub const NU_MAX: f64 = 1e6;
const NU_TOL_LOG: f64 = 1e-6;
const LOGLIK_SLACK: f64 = 1e-9;

/// Log density of `t_ν(μ, C)` at `x`, given the Cholesky factor of `C`.
pub fn t_log_density_factored(
    x: &DVector<f64>,
    nu: f64,
    mu: &DVector<f64>,
    factor: &CholFactor,
) -> f64 {
    let d = mu.len() as f64;
    let delta = factor.mahalanobis_sq(&(x - mu));
    t_log_norm(nu, d, factor.half_log_det()) - 0.5 * (nu + d) * (delta / nu).ln_1p()
}

/// Log density of `t_ν(μ, C)` at `x`.
pub fn t_log_density(
    x: &DVector<f64>,
    nu: f64,
    mu: &DVector<f64>,
    scale: &DMatrix<f64>,
) -> Result<f64> {
    if !(nu > 0.0) {
        return Err(CoreError::Invalid(format!(
            "degrees of freedom must be positive, got {nu}"
        )));
    }
    let f = CholFactor::new(scale, "t scale matrix")?;
    Ok(t_log_density_factored(x, nu, mu, &f))
}

fn t_log_norm(nu: f64, d: f64, half_log_det: f64) -> f64 {
    ln_gamma(0.5 * (nu + d))
        - ln_gamma(0.5 * nu)
        - 0.5 * d * (nu * std::f64::consts::PI).ln()
        - half_log_det
}

/// Settings for [`fit_multivariate_t`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub nu_min: f64,
    pub nu_max: f64,
    /// Starting degrees of freedom.
    pub nu_init: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-8,
            nu_min: NU_MIN,
            nu_max: NU_MAX,
            nu_init: 10.0,
        }
    }
}

/// Outcome of the degrees-of-freedom root find.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NuStep {
    /// Bracketed root found.
    Root,
    /// No sign change; the better bound was returned.
    AtBound,
}

/// Result of an EM fit.
#[derive(Clone, Debug)]
pub struct TFitReport {
    pub nu: f64,
    pub mu: DVector<f64>,
    pub scale: DMatrix<f64>,
    pub iterations: usize,
    /// Observed-data log likelihood after each iteration (first entry is the
    /// starting point).
    pub loglik_trace: Vec<f64>,
    pub final_loglik: f64,
    /// False if the tolerance was not reached or the scale matrix needed
    /// jitter.
    pub converged: bool,
    /// Outcome of the last degrees-of-freedom step.
    pub nu_step: NuStep,
}

fn loglik(samples: &DMatrix<f64>, nu: f64, mu: &DVector<f64>, factor: &CholFactor) -> f64 {
    let deltas = mahalanobis_rows(samples, mu, factor);
    loglik_from_deltas(&deltas, nu, mu.len() as f64, factor.half_log_det())
}

fn loglik_from_deltas(deltas: &[f64], nu: f64, d: f64, half_log_det: f64) -> f64 {
    let norm = t_log_norm(nu, d, half_log_det);
    deltas
        .iter()
        .map(|delta| norm - 0.5 * (nu + d) * (delta / nu).ln_1p())
        .sum()
}

fn mahalanobis_rows(samples: &DMatrix<f64>, mu: &DVector<f64>, factor: &CholFactor) -> Vec<f64> {
    let centered = DMatrix::from_fn(samples.nrows(), samples.ncols(), |i, k| {
        samples[(i, k)] - mu[k]
    });
    let w = factor.whiten_matrix(&centered.transpose());
    w.column_iter().map(|c| c.norm_squared()).collect()
}

/// Derivative of the profile log likelihood in ν (times `2/J`).
fn nu_score(nu: f64, d: f64, deltas: &[f64]) -> f64 {
    let j = deltas.len() as f64;
    let mean_term = deltas
        .iter()
        .map(|delta| {
            let u = (nu + d) / (nu + delta);
            u.ln() - u
        })
        .sum::<f64>()
        / j;
    digamma(0.5 * (nu + d)) - (0.5 * (nu + d)).ln() - digamma(0.5 * nu)
        + (0.5 * nu).ln()
        + 1.0
        + mean_term
}

fn solve_nu(deltas: &[f64], d: f64, half_log_det: f64, opts: &EmOptions) -> (f64, NuStep) {
    let (mut lo, mut hi) = (opts.nu_min.ln(), opts.nu_max.ln());
    let g_lo = nu_score(lo.exp(), d, deltas);
    let g_hi = nu_score(hi.exp(), d, deltas);
    if g_lo.signum() == g_hi.signum() || g_lo == 0.0 || g_hi == 0.0 {
        let ll_lo = loglik_from_deltas(deltas, opts.nu_min, d, half_log_det);
        let ll_hi = loglik_from_deltas(deltas, opts.nu_max, d, half_log_det);
        let nu = if ll_hi >= ll_lo {
            opts.nu_max
        } else {
            opts.nu_min
        };
        return (nu, NuStep::AtBound);
    }
    while hi - lo > NU_TOL_LOG {
        let mid = 0.5 * (lo + hi);
        let g = nu_score(mid.exp(), d, deltas);
        if g.signum() == g_lo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    ((0.5 * (lo + hi)).exp(), NuStep::Root)
}

/// Factorizes a scale matrix, replacing it by its jittered version when
/// jitter was needed or forced.
fn factor_scale(scale: &mut DMatrix<f64>, force_jitter: bool) -> Result<(CholFactor, bool)> {
    if force_jitter {
        let d = scale.nrows() as f64;
        let bump = crate::linalg::JITTER_BASE * (scale.trace() / d).abs().max(f64::MIN_POSITIVE);
        for k in 0..scale.nrows() {
            scale[(k, k)] += bump;
        }
    }
    let f = CholFactor::new(scale, "t scale matrix")?;
    let jittered = force_jitter || f.jitter() > 0.0;
    if f.jitter() > 0.0 {
        *scale = f.matrix();
    }
    Ok((f, jittered))
}

/// Maximum-likelihood fit of `t_ν(μ, C)` to the rows of `samples`.
pub fn fit_multivariate_t(samples: &DMatrix<f64>, opts: &EmOptions) -> Result<TFitReport> {
    let (j, dim) = samples.shape();
    if j < 2 {
        return Err(CoreError::Invalid("t fit needs at least 2 samples".into()));
    }
    if !(opts.nu_min > 0.0 && opts.nu_min < opts.nu_max) {
        return Err(CoreError::Invalid("need 0 < nu_min < nu_max".into()));
    }
    let d = dim as f64;
    let jf = j as f64;
    let (mut mu, cov) = ensemble_moments(samples);
    // With J ≤ d the scale matrix is singular in exact arithmetic, whatever
    // rounding makes of it, so it is always regularized.
    let rank_deficient = j <= dim;
    let mut scale = cov * ((jf - 1.0) / jf);
    let (mut factor, mut jittered) = factor_scale(&mut scale, rank_deficient)?;
    let mut nu = opts.nu_init.clamp(opts.nu_min, opts.nu_max);
    let mut ll = loglik(samples, nu, &mu, &factor);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut nu_step = NuStep::Root;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let deltas = mahalanobis_rows(samples, &mu, &factor);
        let u: Vec<f64> = deltas.iter().map(|delta| (nu + d) / (nu + delta)).collect();
        let su: f64 = u.iter().sum();
        mu = DVector::from_fn(dim, |k, _| {
            (0..j).map(|i| u[i] * samples[(i, k)]).sum::<f64>() / su
        });
        let weighted = DMatrix::from_fn(j, dim, |i, k| u[i].sqrt() * (samples[(i, k)] - mu[k]));
        scale = crate::linalg::symmetrize(&(weighted.transpose() * &weighted / jf));
        let (f, jit) = factor_scale(&mut scale, rank_deficient)?;
        factor = f;
        jittered |= jit;

        let deltas = mahalanobis_rows(samples, &mu, &factor);
        let half_log_det = factor.half_log_det();
        let ll_keep = loglik_from_deltas(&deltas, nu, d, half_log_det);
        let (nu_new, step) = solve_nu(&deltas, d, half_log_det, opts);
        let ll_new = loglik_from_deltas(&deltas, nu_new, d, half_log_det);
        let ll_next = if ll_new >= ll_keep {
            nu = nu_new;
            nu_step = step;
            ll_new
        } else {
            ll_keep
        };
        if ll_next < ll - LOGLIK_SLACK * ll.abs().max(1.0) {
            log::debug!("t fit: log likelihood decreased from {ll} to {ll_next}");
        }
        trace.push(ll_next);
        let change = (ll_next - ll).abs() / ll.abs().max(1.0);
        ll = ll_next;
        if change < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(TFitReport {
        nu,
        mu,
        scale,
        iterations,
        loglik_trace: trace,
        final_loglik: ll,
        converged: converged && !jittered,
        nu_step,
    })
}
