//! Ensemble Kalman updates: stochastic EKI, its preconditioned (latent-space)
//! form, and the ensemble Kalman sampler.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::ensemble::{evaluate_ensemble, EvalCounter, ForwardBatch, ModelSpec};
use crate::error::{CoreError, Result};
use crate::linalg::{symmetrize, CholFactor};
use crate::precond::Preconditioner;
use crate::rng::ParticleRngs;

/// Relative residual tolerance for the gain linear solves.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-8;
/// Reference time step of the adaptive EKS step rule.
pub const EKS_DT0: f64 = 1.0;
/// Regularizer of the adaptive EKS step rule.
pub const EKS_EPS: f64 = 1e-5;

/// Empirical covariances entering the Kalman gain.
#[derive(Clone, Debug)]
pub struct KalmanGainWorkspace {
    /// `C^{xF}`, `d × n_y`.
    pub cross_cov: DMatrix<f64>,
    /// `C^{FF}`, `n_y × n_y`.
    pub out_cov: DMatrix<f64>,
}

fn centered(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.row_mean();
    let mut c = m.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c
}

impl KalmanGainWorkspace {
    /// Cross and output covariances with divisor `J − 1`.
    pub fn new(states: &DMatrix<f64>, outputs: &DMatrix<f64>) -> Self {
        let j = states.nrows() as f64;
        let xc = centered(states);
        let fc = centered(outputs);
        Self {
            cross_cov: xc.transpose() * &fc / (j - 1.0),
            out_cov: symmetrize(&(fc.transpose() * &fc / (j - 1.0))),
        }
    }
}

fn check_shapes(states: &DMatrix<f64>, outputs: &DMatrix<f64>, model: &ModelSpec) -> Result<()> {
    if states.nrows() < 2 {
        return Err(CoreError::Invalid(
            "Kalman update needs at least 2 particles".into(),
        ));
    }
    if outputs.nrows() != states.nrows() || outputs.ncols() != model.obs_dim() {
        return Err(CoreError::Dimension(format!(
            "outputs {:?} do not match {} particles with {} observations",
            outputs.shape(),
            states.nrows(),
            model.obs_dim()
        )));
    }
    Ok(())
}

/// Solves `S s = r` column-wise from a factor of `S + jitter·I`, refining
/// once if the residual check fails.
fn checked_solve(s: &DMatrix<f64>, factor: &CholFactor, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut a = s.clone();
    for k in 0..a.nrows() {
        a[(k, k)] += factor.jitter();
    }
    let mut sol = factor.solve_matrix(r);
    for attempt in 0..2 {
        let resid = r - &a * &sol;
        let ok = (0..r.ncols()).all(|c| {
            resid.column(c).norm() <= SOLVE_RESIDUAL_TOL * r.column(c).norm().max(f64::MIN_POSITIVE)
        });
        if ok {
            return Ok(sol);
        }
        if attempt == 0 {
            sol += factor.solve_matrix(&resid);
        }
    }
    Err(CoreError::Numerical(
        "Kalman gain solve failed the residual check".into(),
    ))
}

/// EKI update of arbitrary coordinates `states` given the forward outputs
/// of the corresponding data-space particles.
pub(crate) fn kalman_update(
    states: &DMatrix<f64>,
    outputs: &DMatrix<f64>,
    model: &ModelSpec,
    alpha: f64,
    rngs: &ParticleRngs,
) -> Result<DMatrix<f64>> {
    check_shapes(states, outputs, model)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(CoreError::Invalid(format!(
            "annealing step must be positive, got {alpha}"
        )));
    }
    let j = states.nrows();
    let ws = KalmanGainWorkspace::new(states, outputs);
    let s = &ws.out_cov + model.noise.matrix() * alpha;
    let factor = CholFactor::new(&s, "C^FF + alpha Gamma")?;
    let sqrt_alpha = alpha.sqrt();
    let columns: Vec<DVector<f64>> = (0..j)
        .into_par_iter()
        .map(|i| {
            let xi = model.noise.sample(&mut rngs.for_particle(i));
            &model.data - outputs.row(i).transpose() + xi * sqrt_alpha
        })
        .collect();
    let r = DMatrix::from_columns(&columns);
    let sol = checked_solve(&s, &factor, &r)?;
    let shift = (&ws.cross_cov * sol).transpose();
    Ok(states + shift)
}

/// Stochastic EKI update
/// `x_i ← x_i + C^{xF}(C^{FF} + αΓ)⁻¹(y − F(x_i) + √α ξ_i)`, `ξ_i ~ N(0, Γ)`.
///
/// `ξ_i` comes from `rngs.for_particle(i)`.
pub fn eki_update(
    states: &DMatrix<f64>,
    batch: &ForwardBatch,
    model: &ModelSpec,
    alpha: f64,
    rngs: &ParticleRngs,
) -> Result<DMatrix<f64>> {
    if states.ncols() != model.dim() {
        return Err(CoreError::Dimension(
            "ensemble and model dimensions differ".into(),
        ));
    }
    kalman_update(states, &batch.outputs, model, alpha, rngs)
}

/// EKI update carried out on latent states `z` of a preconditioner, with
/// the forward model evaluated at `f⁻¹(z)` (`J` evaluations).
pub fn faki_update<P: Preconditioner + ?Sized>(
    latent: &DMatrix<f64>,
    precond: &P,
    model: &ModelSpec,
    alpha: f64,
    rngs: &ParticleRngs,
    counter: &EvalCounter,
) -> Result<DMatrix<f64>> {
    let x = precond.inverse_rows(latent)?;
    let batch = evaluate_ensemble(model, &x, counter)?;
    kalman_update(latent, &batch.outputs, model, alpha, rngs)
}

/// Matrix `D` with `D_kj = (1/J)(F_k − F̄)ᵀ Γ⁻¹ (F_j − y)`.
fn eks_coupling(outputs: &DMatrix<f64>, model: &ModelSpec) -> DMatrix<f64> {
    let j = outputs.nrows() as f64;
    let fc = centered(outputs);
    let mut resid = outputs.clone();
    for mut row in resid.row_iter_mut() {
        row -= model.data.transpose();
    }
    let w = model.noise.solve_matrix(&resid.transpose());
    fc * w / j
}

/// Adaptive EKS step `Δt = Δt₀ / (‖D‖_F + ε)` with `Δt₀ = 1`, `ε = 1e-5`.
pub fn eks_adaptive_dt(batch: &ForwardBatch, model: &ModelSpec) -> f64 {
    EKS_DT0 / (eks_coupling(&batch.outputs, model).norm() + EKS_EPS)
}

/// One ensemble Kalman sampler step for a prior `N(0, Γ₀)`.
///
/// Solves `(I + Δt C Γ₀⁻¹) x̂_j = x_j − Δt Σ_k D_kj (x_k − x̄) + Δt (d+1)/J (x_j − x̄)`
/// and returns `x̂_j + √(2Δt C) ξ_j`, where `C` is
/// the ensemble covariance with divisor `J` and `ξ_j` comes from
/// `rngs.for_particle(j)`. Priors that are not centred Gaussians must be
/// whitened by a preconditioner first.
pub fn eks_step(
    states: &DMatrix<f64>,
    batch: &ForwardBatch,
    model: &ModelSpec,
    prior_cov: &DMatrix<f64>,
    dt: f64,
    rngs: &ParticleRngs,
) -> Result<DMatrix<f64>> {
    check_shapes(states, &batch.outputs, model)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CoreError::Invalid(format!(
            "EKS time step must be positive, got {dt}"
        )));
    }
    let (jn, d) = states.shape();
    let j = jn as f64;
    let prior = CholFactor::new(prior_cov, "EKS prior covariance")?;
    let xc = centered(states);
    let cxx = symmetrize(&(xc.transpose() * &xc / j));
    let coupling = eks_coupling(&batch.outputs, model);
    let rhs = states - coupling.transpose() * &xc * dt + &xc * (dt * (d as f64 + 1.0) / j);
    let a = DMatrix::identity(d, d) + prior.solve_matrix(&cxx).transpose() * dt;
    let lu = a.lu();
    let hat = lu
        .solve(&rhs.transpose())
        .ok_or_else(|| CoreError::Numerical("EKS implicit system is singular".into()))?
        .transpose();
    if cxx.iter().all(|v| *v == 0.0) {
        return Ok(hat);
    }
    let noise_factor = CholFactor::new(&cxx, "EKS ensemble covariance")?;
    let scale = (2.0 * dt).sqrt();
    let rows: Vec<DVector<f64>> = (0..jn)
        .into_par_iter()
        .map(|i| {
            let mut rng = rngs.for_particle(i);
            let e = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            noise_factor.l() * e * scale
        })
        .collect();
    let mut out = hat;
    for (i, n) in rows.iter().enumerate() {
        let mut row = out.row_mut(i);
        row += n.transpose();
    }
    Ok(out)
}
