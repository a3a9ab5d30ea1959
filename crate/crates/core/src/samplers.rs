//! Run drivers: sequential Kalman tuning (SKT), annealed SMC with
//! importance resampling, and standalone Kalman schemes (EKI, FAKI, EKS).
//!
//! SKT and SMC share a level loop. Each level solves for the next inverse
//! temperature by the ESS criterion, moves the ensemble to it (Kalman update
//! for SKT, weighting and resampling for SMC), fits the reference
//! distribution of the Metropolis kernel in the latent space of the
//! preconditioner and runs kernel sweeps with diminishing adaptation. Random
//! numbers come from [`Streams`] addressed by level and sweep, so results do
//! not depend on the thread count.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annealing::{
    ess_for_increment, importance_log_weights, normalize_log_weights, solve_next_beta,
    systematic_resample, CorrStatistic, CorrTracker, DEFAULT_TAU, DEFAULT_TAU_CORR,
};
use crate::ensemble::{ensemble_moments, evaluate_ensemble, EvalCounter, ForwardBatch, ModelSpec};
use crate::error::{CoreError, Result};
use crate::kalman::{eks_adaptive_dt, eks_step, kalman_update};
use crate::kernels::{
    adapt_kernel, sweep, ChainState, KernelKind, KernelParams, LatentTarget, ParticleEval,
    PcnParams, TDistParams, ALPHA_STAR, RHO_MIN,
};
use crate::linalg::CholFactor;
use crate::precond::{fit_affine, AffineMap, FittedPrecond, PrecondKind, Preconditioner};
use crate::rng::{Purpose, Streams};
use crate::student_t::{fit_multivariate_t, EmOptions};

/// Default sweep cap per level for SKT.
pub const DEFAULT_SKT_SWEEPS: usize = 50;
/// Default sweep cap per level for SMC (one extra sweep matches the
/// evaluations SKT spends on its Kalman update).
pub const DEFAULT_SMC_SWEEPS: usize = 51;
/// Default number of EKS iterations.
pub const DEFAULT_EKS_ITERATIONS: usize = 100;
/// Default bound on the number of temperature levels.
pub const DEFAULT_MAX_LEVELS: usize = 1000;

/// Inference scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "SKT")]
    Skt,
    /// SKT in the latent space of a per-level affine preconditioner.
    #[serde(rename = "NF-SKT")]
    NfSkt,
    #[serde(rename = "SMC")]
    Smc,
    /// SMC in the latent space of a per-level affine preconditioner.
    #[serde(rename = "NF-SMC")]
    NfSmc,
    #[serde(rename = "EKI")]
    Eki,
    #[serde(rename = "FAKI")]
    Faki,
    #[serde(rename = "EKS")]
    Eks,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Skt => "SKT",
            Scheme::NfSkt => "NF-SKT",
            Scheme::Smc => "SMC",
            Scheme::NfSmc => "NF-SMC",
            Scheme::Eki => "EKI",
            Scheme::Faki => "FAKI",
            Scheme::Eks => "EKS",
        }
    }

    /// Preconditioner fitted at each level. EKS always whitens the prior.
    pub fn precond(self) -> PrecondKind {
        match self {
            Scheme::NfSkt | Scheme::NfSmc | Scheme::Faki | Scheme::Eks => PrecondKind::Affine,
            Scheme::Skt | Scheme::Smc | Scheme::Eki => PrecondKind::Identity,
        }
    }

    /// True for schemes that run Metropolis sweeps.
    pub fn uses_kernel(self) -> bool {
        matches!(
            self,
            Scheme::Skt | Scheme::NfSkt | Scheme::Smc | Scheme::NfSmc
        )
    }

    pub fn is_smc(self) -> bool {
        matches!(self, Scheme::Smc | Scheme::NfSmc)
    }

    /// Default sweep cap per level.
    pub fn default_sweeps(self) -> usize {
        if self.is_smc() {
            DEFAULT_SMC_SWEEPS
        } else {
            DEFAULT_SKT_SWEEPS
        }
    }
}

/// How many Metropolis sweeps run at each level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SweepMode {
    /// Stop when every autocorrelation product falls below `τ_corr`, or
    /// after `max` sweeps.
    Adaptive { max: usize },
    /// Exactly `m` sweeps.
    Fixed { m: usize },
}

impl SweepMode {
    /// Fixed budget of `m` sweeps for SKT-type schemes and `m + 1` for SMC,
    /// so both spend the same forward evaluations per level.
    pub fn fixed_budget(scheme: Scheme, m: usize) -> Self {
        SweepMode::Fixed {
            m: if scheme.is_smc() { m + 1 } else { m },
        }
    }

    fn cap(self) -> usize {
        match self {
            SweepMode::Adaptive { max } => max,
            SweepMode::Fixed { m } => m,
        }
    }
}

/// Settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scheme: Scheme,
    /// Ensemble size `J`.
    pub particles: usize,
    /// Fractional ESS target.
    pub tau: f64,
    /// Autocorrelation-product threshold of the adaptive sweep stop.
    pub tau_corr: f64,
    pub sweeps: SweepMode,
    pub corr_statistic: CorrStatistic,
    /// Target acceptance rate of step-size adaptation.
    pub alpha_star: f64,
    /// Step size at the first level; later levels inherit the adapted value.
    pub rho_init: f64,
    pub kernel: KernelKind,
    pub em: EmOptions,
    pub eks_iterations: usize,
    pub max_levels: usize,
    pub seed: u64,
    /// Keep the data-space ensemble after every level.
    pub snapshot_levels: bool,
}

impl RunConfig {
    /// Defaults for `scheme` with `particles` particles.
    pub fn new(scheme: Scheme, particles: usize, seed: u64) -> Self {
        Self {
            scheme,
            particles,
            tau: DEFAULT_TAU,
            tau_corr: DEFAULT_TAU_CORR,
            sweeps: SweepMode::Adaptive {
                max: scheme.default_sweeps(),
            },
            corr_statistic: CorrStatistic::default(),
            alpha_star: ALPHA_STAR,
            rho_init: 1.0,
            kernel: KernelKind::Tpcn,
            em: EmOptions::default(),
            eks_iterations: DEFAULT_EKS_ITERATIONS,
            max_levels: DEFAULT_MAX_LEVELS,
            seed,
            snapshot_levels: false,
        }
    }

    pub fn precond(&self) -> PrecondKind {
        self.scheme.precond()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Invalid(m));
        if self.particles < 2 {
            return bad(format!("need at least 2 particles, got {}", self.particles));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if !(self.tau_corr > 0.0 && self.tau_corr <= 1.0) {
            return bad(format!(
                "tau_corr must lie in (0, 1], got {}",
                self.tau_corr
            ));
        }
        if !(self.alpha_star > 0.0 && self.alpha_star < 1.0) {
            return bad(format!(
                "alpha_star must lie in (0, 1), got {}",
                self.alpha_star
            ));
        }
        if !(self.rho_init > RHO_MIN && self.rho_init <= 1.0) {
            return bad(format!(
                "rho_init must lie in ({RHO_MIN}, 1], got {}",
                self.rho_init
            ));
        }
        if self.scheme.uses_kernel() && self.sweeps.cap() == 0 {
            return bad("at least one sweep per level is required".into());
        }
        if self.scheme == Scheme::Eks && self.eks_iterations == 0 {
            return bad("EKS needs at least one iteration".into());
        }
        if self.max_levels == 0 {
            return bad("max_levels must be positive".into());
        }
        Ok(())
    }
}

/// What happened at one temperature level (or EKS iteration).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelRecord {
    /// Inverse temperature reached at the end of the level.
    pub beta: f64,
    /// ESS of the incremental weights at the solved temperature.
    pub ess: f64,
    /// Kalman step parameter `α = 1/Δβ` (EKS: the time step).
    pub step: f64,
    /// Mean acceptance probability of each sweep.
    pub acceptance: Vec<f64>,
    /// Step size after the last sweep.
    pub rho: Option<f64>,
    /// Fitted degrees of freedom (tpCN only).
    pub nu: Option<f64>,
    /// True when the adaptive rule hit the sweep cap without stopping.
    pub hit_sweep_cap: bool,
    /// Particles reverted because the forward model failed after the
    /// Kalman update.
    pub reverted: usize,
}

impl LevelRecord {
    fn new(beta: f64, ess: f64, step: f64) -> Self {
        Self {
            beta,
            ess,
            step,
            acceptance: Vec::new(),
            rho: None,
            nu: None,
            hit_sweep_cap: false,
            reverted: 0,
        }
    }
}

/// Output of a run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub final_ensemble: DMatrix<f64>,
    /// Inverse temperatures starting at 0 and ending at exactly 1.
    pub betas: Vec<f64>,
    pub n_levels: usize,
    /// Forward-model evaluations, including the initial prior ensemble.
    pub n_model_evals: u64,
    pub levels: Vec<LevelRecord>,
    pub wall_time_s: f64,
    /// Data-space ensemble after each level when requested.
    pub snapshots: Vec<DMatrix<f64>>,
}

impl RunResult {
    /// `N_eval / J`.
    pub fn n_model_evals_per_particle(&self) -> f64 {
        self.n_model_evals as f64 / self.final_ensemble.nrows() as f64
    }

    /// Per-level, per-sweep mean acceptance probabilities.
    pub fn acceptance(&self) -> Vec<Vec<f64>> {
        self.levels.iter().map(|l| l.acceptance.clone()).collect()
    }

    pub fn sweeps_per_level(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.acceptance.len()).collect()
    }
}

/// Runs the configured scheme on `model`.
pub fn run(model: &ModelSpec, config: &RunConfig) -> Result<RunResult> {
    config.validate()?;
    match config.scheme {
        Scheme::Skt | Scheme::NfSkt => run_skt(model, config),
        Scheme::Smc | Scheme::NfSmc => run_smc(model, config),
        Scheme::Eki | Scheme::Faki | Scheme::Eks => run_kalman_only(model, config),
    }
}

/// Sequential Kalman tuning: EKI moves between temperatures, tpCN or pCN
/// sweeps correct within each level.
pub fn run_skt(model: &ModelSpec, config: &RunConfig) -> Result<RunResult> {
    expect_scheme(config, &[Scheme::Skt, Scheme::NfSkt])?;
    anneal(model, config, Transition::Kalman, true)
}

/// Annealed SMC: importance weighting and systematic resampling move
/// between temperatures, kernel sweeps rejuvenate.
pub fn run_smc(model: &ModelSpec, config: &RunConfig) -> Result<RunResult> {
    expect_scheme(config, &[Scheme::Smc, Scheme::NfSmc])?;
    anneal(model, config, Transition::Resample, true)
}

/// EKI or FAKI annealed by the ESS rule without Metropolis correction, or
/// a fixed number of EKS iterations.
pub fn run_kalman_only(model: &ModelSpec, config: &RunConfig) -> Result<RunResult> {
    expect_scheme(config, &[Scheme::Eki, Scheme::Faki, Scheme::Eks])?;
    if config.scheme == Scheme::Eks {
        run_eks(model, config)
    } else {
        anneal(model, config, Transition::Kalman, false)
    }
}

fn expect_scheme(config: &RunConfig, allowed: &[Scheme]) -> Result<()> {
    config.validate()?;
    if allowed.contains(&config.scheme) {
        Ok(())
    } else {
        Err(CoreError::Invalid(format!(
            "scheme {} is not handled by this driver",
            config.scheme.name()
        )))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Transition {
    Kalman,
    Resample,
}

/// Ensemble in data space with cached forward outputs.
struct Particles {
    x: DMatrix<f64>,
    batch: ForwardBatch,
}

fn initial_particles(
    model: &ModelSpec,
    config: &RunConfig,
    streams: &Streams,
    counter: &EvalCounter,
) -> Result<Particles> {
    let j = config.particles;
    if j < 2 * model.dim() && config.scheme.uses_kernel() && config.kernel == KernelKind::Tpcn {
        log::warn!(
            "J = {j} is below 2d = {}; the t fit may be unstable",
            2 * model.dim()
        );
    }
    let x = model.sample_prior(j, |i| streams.stream(Purpose::PriorDraw, 0, 0, i as u64));
    let batch = evaluate_ensemble(model, &x, counter)?;
    Ok(Particles { x, batch })
}

/// Evaluates the updated ensemble `x_new`, keeping the previous state of
/// any particle whose forward model fails.
fn evaluate_or_revert(
    model: &ModelSpec,
    x_new: DMatrix<f64>,
    old: &Particles,
    counter: &EvalCounter,
) -> Result<(Particles, usize)> {
    let j = x_new.nrows();
    let evals: Vec<Option<(DVector<f64>, f64)>> = (0..j)
        .into_par_iter()
        .map(|i| {
            let xi = x_new.row(i).transpose();
            if xi.iter().any(|v| !v.is_finite()) {
                return None;
            }
            model.evaluate(&xi, counter).ok()
        })
        .collect();
    let mut x = x_new;
    let mut outputs = DMatrix::zeros(j, model.obs_dim());
    let mut misfits = DVector::zeros(j);
    let mut reverted = 0;
    for (i, e) in evals.into_iter().enumerate() {
        match e {
            Some((out, m)) => {
                outputs.set_row(i, &out.transpose());
                misfits[i] = m;
            }
            None => {
                reverted += 1;
                x.set_row(i, &old.x.row(i));
                outputs.set_row(i, &old.batch.outputs.row(i));
                misfits[i] = old.batch.misfits[i];
            }
        }
    }
    if reverted == j {
        return Err(CoreError::Numerical(
            "forward model failed for every particle after the Kalman update".into(),
        ));
    }
    if reverted > 0 {
        log::warn!("{reverted} particles kept their previous state after a failed update");
    }
    Ok((
        Particles {
            x,
            batch: ForwardBatch { outputs, misfits },
        },
        reverted,
    ))
}

fn rows_of(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, k| m[(idx[i], k)])
}

fn fit_kernel(
    z: &DMatrix<f64>,
    kind: KernelKind,
    em: &EmOptions,
    rho: f64,
) -> Result<KernelParams> {
    Ok(match kind {
        KernelKind::Tpcn => {
            let fit = fit_multivariate_t(z, em)?;
            if !fit.converged {
                log::debug!("t fit stopped after {} iterations", fit.iterations);
            }
            KernelParams::Tpcn(TDistParams::new(fit.nu, fit.mu, &fit.scale, rho)?)
        }
        KernelKind::Pcn => {
            let (mean, cov) = ensemble_moments(z);
            KernelParams::Pcn(PcnParams::new(mean, &cov, rho)?)
        }
    })
}

struct SweepOutcome {
    particles: Particles,
    acceptance: Vec<f64>,
    rho: f64,
    hit_cap: bool,
}

/// Runs the kernel sweeps of one level in the latent space of `precond`.
#[allow(clippy::too_many_arguments)]
fn run_sweeps(
    model: &ModelSpec,
    config: &RunConfig,
    precond: &FittedPrecond,
    particles: Particles,
    beta: f64,
    params: KernelParams,
    streams: &Streams,
    level: u64,
    counter: &EvalCounter,
) -> Result<SweepOutcome> {
    let target = LatentTarget {
        model,
        precond,
        beta,
        counter,
    };
    let z0 = precond.forward_rows(&particles.x);
    let mut states: Vec<ChainState<ParticleEval>> = (0..config.particles)
        .map(|i| {
            let z = z0.row(i).transpose();
            let eval = ParticleEval {
                x: particles.x.row(i).transpose(),
                output: particles.batch.outputs.row(i).transpose(),
                misfit: particles.batch.misfits[i],
            };
            ChainState {
                log_target: target.log_target_from(&z, &eval),
                point: z,
                aux: eval,
            }
        })
        .collect();
    let mut params = params;
    let mut tracker = CorrTracker::new(model.dim(), config.corr_statistic, config.tau_corr);
    let mut prev = z0;
    let mut acceptance = Vec::new();
    let mut stopped = false;
    for m in 1..=config.sweeps.cap() {
        let rngs = streams.particles(Purpose::Mcmc, level, m as u64);
        let (next, stats) = sweep(&states, &target, &params, &rngs);
        states = next;
        acceptance.push(stats.mean_accept);
        let z = DMatrix::from_fn(states.len(), model.dim(), |i, k| states[i].point[k]);
        let mean = z.row_mean().transpose();
        params = adapt_kernel(&params, &stats, &mean, m, config.alpha_star, RHO_MIN);
        if let SweepMode::Adaptive { .. } = config.sweeps {
            if tracker.update(&prev, &z)? {
                stopped = true;
                break;
            }
        }
        prev = z;
    }
    let hit_cap = matches!(config.sweeps, SweepMode::Adaptive { .. }) && !stopped;
    if hit_cap {
        log::warn!(
            "level {level} reached the sweep cap of {} before the correlation stop",
            config.sweeps.cap()
        );
    }
    let j = states.len();
    let x = DMatrix::from_fn(j, model.dim(), |i, k| states[i].aux.x[k]);
    let outputs = DMatrix::from_fn(j, model.obs_dim(), |i, k| states[i].aux.output[k]);
    let misfits = DVector::from_fn(j, |i, _| states[i].aux.misfit);
    Ok(SweepOutcome {
        particles: Particles {
            x,
            batch: ForwardBatch { outputs, misfits },
        },
        acceptance,
        rho: params.rho(),
        hit_cap,
    })
}

fn anneal(
    model: &ModelSpec,
    config: &RunConfig,
    transition: Transition,
    with_kernel: bool,
) -> Result<RunResult> {
    let start = Instant::now();
    let streams = Streams::new(config.seed);
    let counter = EvalCounter::new();
    let mut particles = initial_particles(model, config, &streams, &counter)?;
    let mut beta = 0.0;
    let mut betas = vec![0.0];
    let mut levels = Vec::new();
    let mut snapshots = Vec::new();
    let mut rho = config.rho_init;
    let precond_kind = config.precond();

    while beta < 1.0 {
        if levels.len() >= config.max_levels {
            return Err(CoreError::Numerical(format!(
                "temperature did not reach 1 within {} levels (beta = {beta})",
                config.max_levels
            )));
        }
        let level = levels.len() as u64 + 1;
        let misfits = &particles.batch.misfits;
        let next = solve_next_beta(misfits, beta, config.tau)?;
        let dbeta = next - beta;
        let ess = ess_for_increment(misfits, dbeta);
        let precond = precond_kind.fit(&particles.x)?;
        let mut record = LevelRecord::new(next, ess, 1.0 / dbeta);

        particles = match transition {
            Transition::Kalman => {
                let z = precond.forward_rows(&particles.x);
                let rngs = streams.particles(Purpose::KalmanNoise, level, 0);
                let z_new = kalman_update(&z, &particles.batch.outputs, model, 1.0 / dbeta, &rngs)?;
                let x_new = precond.inverse_rows(&z_new)?;
                let (p, reverted) = evaluate_or_revert(model, x_new, &particles, &counter)?;
                record.reverted = reverted;
                p
            }
            Transition::Resample => {
                let w = normalize_log_weights(&importance_log_weights(misfits, beta, next));
                let mut rng = streams.stream(Purpose::Resample, level, 0, 0);
                let idx = systematic_resample(&w, &mut rng)?;
                Particles {
                    x: rows_of(&particles.x, &idx),
                    batch: ForwardBatch {
                        outputs: rows_of(&particles.batch.outputs, &idx),
                        misfits: DVector::from_fn(idx.len(), |i, _| misfits[idx[i]]),
                    },
                }
            }
        };

        if with_kernel {
            let z = precond.forward_rows(&particles.x);
            let params = fit_kernel(&z, config.kernel, &config.em, rho)?;
            record.nu = params.nu();
            let out = run_sweeps(
                model, config, &precond, particles, next, params, &streams, level, &counter,
            )?;
            particles = out.particles;
            rho = out.rho;
            record.rho = Some(rho);
            record.acceptance = out.acceptance;
            record.hit_sweep_cap = out.hit_cap;
        }

        log::info!(
            "level {level}: beta = {next:.6}, ESS = {ess:.1}, sweeps = {}, evals = {}",
            record.acceptance.len(),
            counter.get()
        );
        beta = next;
        betas.push(next);
        levels.push(record);
        if config.snapshot_levels {
            snapshots.push(particles.x.clone());
        }
    }

    Ok(RunResult {
        final_ensemble: particles.x,
        n_levels: levels.len(),
        betas,
        n_model_evals: counter.get(),
        levels,
        wall_time_s: start.elapsed().as_secs_f64(),
        snapshots,
    })
}

/// Map to coordinates in which the prior is approximately `N(0, I)`:
/// exact whitening for Gaussian priors, otherwise an affine fit to the
/// prior ensemble.
fn prior_whitening(model: &ModelSpec, prior_draws: &DMatrix<f64>) -> Result<AffineMap> {
    match model.prior.gaussian_moments() {
        Some((mean, cov)) => {
            let factor = CholFactor::new(&cov, "prior covariance")?;
            AffineMap::new(mean, factor.l().clone())
        }
        None => {
            log::warn!("prior is not Gaussian; EKS uses a Gaussian fit to prior draws");
            fit_affine(prior_draws)
        }
    }
}

/// EKS iterations with adaptive time step in prior-whitened coordinates.
fn run_eks(model: &ModelSpec, config: &RunConfig) -> Result<RunResult> {
    let start = Instant::now();
    let streams = Streams::new(config.seed);
    let counter = EvalCounter::new();
    let mut particles = initial_particles(model, config, &streams, &counter)?;
    let map = prior_whitening(model, &particles.x)?;
    let identity = DMatrix::identity(model.dim(), model.dim());
    let mut z = map.forward_rows(&particles.x);
    let mut levels = Vec::new();
    let mut snapshots = Vec::new();

    for t in 1..=config.eks_iterations {
        let dt = eks_adaptive_dt(&particles.batch, model);
        let rngs = streams.particles(Purpose::EksNoise, t as u64, 0);
        z = eks_step(&z, &particles.batch, model, &identity, dt, &rngs)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical(format!(
                "EKS ensemble became non-finite at iteration {t}"
            )));
        }
        let x = map.inverse_rows(&z)?;
        let batch = evaluate_ensemble(model, &x, &counter)
            .map_err(|e| CoreError::Numerical(format!("EKS unstable at iteration {t}: {e}")))?;
        particles = Particles { x, batch };
        levels.push(LevelRecord::new(1.0, config.particles as f64, dt));
        if config.snapshot_levels {
            snapshots.push(particles.x.clone());
        }
    }

    Ok(RunResult {
        final_ensemble: particles.x,
        betas: vec![0.0, 1.0],
        n_levels: levels.len(),
        n_model_evals: counter.get(),
        levels,
        wall_time_s: start.elapsed().as_secs_f64(),
        snapshots,
    })
}
