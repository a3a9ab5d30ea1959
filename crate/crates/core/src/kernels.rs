//! Preconditioned Crank-Nicolson Metropolis kernels.
//!
//! `pcn_step` proposes moves that are reversible with respect to a Gaussian
//! reference `N(μ, C)`; `tpcn_step` uses a multivariate t reference
//! `t_ν(μ, C)` by drawing an auxiliary scale from its conditional. Both accept
//! with the ratio of target to reference densities, computed in log space.
//!
//! Random numbers are consumed in a fixed order per step: for tpCN one Gamma
//! variate, then `d` standard normals, then one uniform; for pCN the `d`
//! normals and the uniform. A proposal whose target density is non-finite is
//! rejected. A rejected step returns the input state unchanged.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::ensemble::{EvalCounter, ModelSpec};
use crate::error::{CoreError, Result};
use crate::linalg::CholFactor;
use crate::precond::Preconditioner;
use crate::rng::ParticleRngs;
use crate::student_t::{NU_MAX, NU_MIN};

/// Default target acceptance rate for step-size adaptation.
pub const ALPHA_STAR: f64 = 0.234;
/// Smallest step size reachable by adaptation.
pub const RHO_MIN: f64 = 1e-6;

/// Which Metropolis kernel a sampler uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum KernelKind {
    #[default]
    #[serde(rename = "tpCN")]
    Tpcn,
    #[serde(rename = "pCN")]
    Pcn,
}

impl KernelKind {
    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Tpcn => "tpCN",
            KernelKind::Pcn => "pCN",
        }
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(CoreError::Invalid(format!(
            "step size must lie in (0, 1], got {rho}"
        )))
    }
}

/// Gaussian reference `N(μ, C)` and step size of a pCN kernel.
#[derive(Clone, Debug)]
pub struct PcnParams {
    pub mu: DVector<f64>,
    factor: CholFactor,
    pub rho: f64,
}

impl PcnParams {
    pub fn new(mu: DVector<f64>, cov: &DMatrix<f64>, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        let factor = CholFactor::new(cov, "pCN reference covariance")?;
        if factor.dim() != mu.len() {
            return Err(CoreError::Dimension(
                "pCN mean and covariance differ in size".into(),
            ));
        }
        Ok(Self { mu, factor, rho })
    }

    pub fn factor(&self) -> &CholFactor {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Multivariate t reference `t_ν(μ, C)` and step size of a tpCN kernel.
#[derive(Clone, Debug)]
pub struct TDistParams {
    pub nu: f64,
    pub mu: DVector<f64>,
    factor: CholFactor,
    pub rho: f64,
}

impl TDistParams {
    pub fn new(nu: f64, mu: DVector<f64>, scale: &DMatrix<f64>, rho: f64) -> Result<Self> {
        check_rho(rho)?;
        if !(NU_MIN..=NU_MAX).contains(&nu) {
            return Err(CoreError::Invalid(format!(
                "degrees of freedom {nu} outside [{NU_MIN}, {NU_MAX}]"
            )));
        }
        let factor = CholFactor::new(scale, "tpCN reference scale")?;
        if factor.dim() != mu.len() {
            return Err(CoreError::Dimension(
                "tpCN mean and scale differ in size".into(),
            ));
        }
        Ok(Self {
            nu,
            mu,
            factor,
            rho,
        })
    }

    pub fn factor(&self) -> &CholFactor {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `⟨x, x⟩_s = (x − μ)ᵀ C⁻¹ (x − μ)`.
    pub fn mahalanobis_sq(&self, x: &DVector<f64>) -> f64 {
        self.factor.mahalanobis_sq(&(x - &self.mu))
    }

    /// Shape and scale of the Gamma law of `Z⁻¹` given the current state.
    pub fn inverse_scale_gamma(&self, x: &DVector<f64>) -> (f64, f64) {
        let d = self.dim() as f64;
        (
            0.5 * (d + self.nu),
            2.0 / (self.nu + self.mahalanobis_sq(x)),
        )
    }
}

/// Either kernel's parameters.
#[derive(Clone, Debug)]
pub enum KernelParams {
    Pcn(PcnParams),
    Tpcn(TDistParams),
}

impl KernelParams {
    pub fn rho(&self) -> f64 {
        match self {
            KernelParams::Pcn(p) => p.rho,
            KernelParams::Tpcn(p) => p.rho,
        }
    }

    pub fn mu(&self) -> &DVector<f64> {
        match self {
            KernelParams::Pcn(p) => &p.mu,
            KernelParams::Tpcn(p) => &p.mu,
        }
    }

    /// Degrees of freedom, `None` for pCN.
    pub fn nu(&self) -> Option<f64> {
        match self {
            KernelParams::Pcn(_) => None,
            KernelParams::Tpcn(p) => Some(p.nu),
        }
    }

    fn set(&mut self, rho: f64, mu: DVector<f64>) {
        match self {
            KernelParams::Pcn(p) => {
                p.rho = rho;
                p.mu = mu;
            }
            KernelParams::Tpcn(p) => {
                p.rho = rho;
                p.mu = mu;
            }
        }
    }

    /// One Metropolis step with this kernel.
    pub fn step<T: LogTarget>(
        &self,
        state: &ChainState<T::Aux>,
        target: &T,
        rng: &mut dyn RngCore,
    ) -> StepResult<T::Aux> {
        match self {
            KernelParams::Pcn(p) => pcn_step(state, target, p, rng),
            KernelParams::Tpcn(p) => tpcn_step(state, target, p, rng),
        }
    }
}

/// Unnormalized log density with optional per-point side information.
pub trait LogTarget: Sync {
    /// Data kept alongside an accepted state (for example forward outputs).
    type Aux: Clone + Send + Sync;

    /// Log density and side information, or `None` where the density cannot
    /// be evaluated.
    fn evaluate(&self, x: &DVector<f64>) -> Option<(f64, Self::Aux)>;

    /// Chain state at `x`, failing if the density is not finite there.
    fn state_at(&self, x: DVector<f64>) -> Result<ChainState<Self::Aux>> {
        match self.evaluate(&x) {
            Some((lt, aux)) if lt.is_finite() => Ok(ChainState {
                point: x,
                log_target: lt,
                aux,
            }),
            _ => Err(CoreError::Numerical(
                "log target is not finite at the starting state".into(),
            )),
        }
    }
}

/// A log density given by a closure.
pub struct FnTarget<F>(pub F);

impl<F: Fn(&DVector<f64>) -> f64 + Sync> LogTarget for FnTarget<F> {
    type Aux = ();

    fn evaluate(&self, x: &DVector<f64>) -> Option<(f64, ())> {
        Some(((self.0)(x), ()))
    }
}

/// Current point of a Markov chain with its cached log target.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainState<A> {
    pub point: DVector<f64>,
    pub log_target: f64,
    pub aux: A,
}

/// Outcome of one Metropolis step.
#[derive(Clone, Debug)]
pub struct StepResult<A> {
    pub state: ChainState<A>,
    pub accepted: bool,
    /// `min(1, exp(log_ratio))`.
    pub alpha: f64,
    /// Log acceptance ratio before truncation at 0; `-inf` for proposals
    /// with a non-finite target.
    pub log_ratio: f64,
}

fn metropolis<A: Clone>(
    state: &ChainState<A>,
    proposal: DVector<f64>,
    evaluated: Option<(f64, A)>,
    reference_log_ratio: f64,
    rng: &mut dyn RngCore,
) -> StepResult<A> {
    let log_ratio = match &evaluated {
        Some((lt, _)) if lt.is_finite() => lt - state.log_target + reference_log_ratio,
        _ => f64::NEG_INFINITY,
    };
    let u: f64 = rng.random();
    let alpha = if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    };
    if u.ln() < log_ratio {
        let (lt, aux) = evaluated.expect("finite ratio implies an evaluated proposal");
        StepResult {
            state: ChainState {
                point: proposal,
                log_target: lt,
                aux,
            },
            accepted: true,
            alpha,
            log_ratio,
        }
    } else {
        StepResult {
            state: state.clone(),
            accepted: false,
            alpha,
            log_ratio,
        }
    }
}

fn standard_normals(d: usize, rng: &mut dyn RngCore) -> DVector<f64> {
    DVector::from_fn(d, |_, _| StandardNormal.sample(rng))
}

/// One pCN step: `x' = μ + √(1−ρ²)(x−μ) + ρW`, `W ~ N(0, C)`.
pub fn pcn_step<T: LogTarget>(
    state: &ChainState<T::Aux>,
    target: &T,
    params: &PcnParams,
    rng: &mut dyn RngCore,
) -> StepResult<T::Aux> {
    let x = &state.point;
    let rho = params.rho;
    let w = params.factor.l() * standard_normals(params.dim(), rng);
    let proposal = &params.mu + (x - &params.mu) * (1.0 - rho * rho).sqrt() + w * rho;
    let evaluated = target.evaluate(&proposal);
    let dx = params.factor.mahalanobis_sq(&(x - &params.mu));
    let dp = params.factor.mahalanobis_sq(&(&proposal - &params.mu));
    metropolis(state, proposal, evaluated, 0.5 * (dp - dx), rng)
}

/// One tpCN step: `Z⁻¹ ~ Gamma((d+ν)/2, 2/(ν+⟨x,x⟩_s))`,
/// `x' = μ + √(1−ρ²)(x−μ) + ρ√Z W`, `W ~ N(0, C)`.
pub fn tpcn_step<T: LogTarget>(
    state: &ChainState<T::Aux>,
    target: &T,
    params: &TDistParams,
    rng: &mut dyn RngCore,
) -> StepResult<T::Aux> {
    let x = &state.point;
    let rho = params.rho;
    let d = params.dim() as f64;
    let (shape, scale) = params.inverse_scale_gamma(x);
    let inv_z: f64 = Gamma::new(shape, scale)
        .expect("Gamma parameters are positive and finite")
        .sample(rng);
    let w = params.factor.l() * standard_normals(params.dim(), rng);
    let proposal =
        &params.mu + (x - &params.mu) * (1.0 - rho * rho).sqrt() + w * (rho / inv_z.sqrt());
    let evaluated = target.evaluate(&proposal);
    let half = 0.5 * (d + params.nu);
    let dx = params.mahalanobis_sq(x);
    let dp = params.mahalanobis_sq(&proposal);
    let reference = half * ((dp / params.nu).ln_1p() - (dx / params.nu).ln_1p());
    metropolis(state, proposal, evaluated, reference, rng)
}

/// Forward outputs cached with a chain state of a posterior target.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEval {
    /// Data-space point `f⁻¹(z)`.
    pub x: DVector<f64>,
    pub output: DVector<f64>,
    pub misfit: f64,
}

/// Tempered posterior viewed in the latent space of a preconditioner:
/// `log π₀(f⁻¹z) − βΦ(f⁻¹z) + log|det Df⁻¹(z)|`.
pub struct LatentTarget<'a, P: Preconditioner + ?Sized> {
    pub model: &'a ModelSpec,
    pub precond: &'a P,
    pub beta: f64,
    pub counter: &'a EvalCounter,
}

impl<P: Preconditioner + ?Sized> LatentTarget<'_, P> {
    /// Log target from an already evaluated data-space point.
    pub fn log_target_from(&self, z: &DVector<f64>, eval: &ParticleEval) -> f64 {
        crate::ensemble::annealed_log_target(self.model, &eval.x, eval.misfit, self.beta)
            + self.precond.log_det_jacobian_inverse(z)
    }
}

impl<P: Preconditioner + ?Sized> LogTarget for LatentTarget<'_, P> {
    type Aux = ParticleEval;

    fn evaluate(&self, z: &DVector<f64>) -> Option<(f64, ParticleEval)> {
        let x = match self.precond.inverse(z) {
            Ok(x) => x,
            Err(e) => {
                log::warn!("inverse map failed at a proposal: {e}");
                return None;
            }
        };
        let (output, misfit) = match self.model.evaluate(&x, self.counter) {
            Ok(v) => v,
            Err(e) => {
                log::debug!("forward model rejected a proposal: {e}");
                return None;
            }
        };
        let eval = ParticleEval { x, output, misfit };
        let lt = self.log_target_from(z, &eval);
        Some((lt, eval))
    }
}

/// tpCN step on the tempered posterior in the latent space of `precond`.
/// Evaluates the forward model once.
pub fn tpcn_latent_step<P: Preconditioner + ?Sized>(
    state: &ChainState<ParticleEval>,
    precond: &P,
    model: &ModelSpec,
    beta: f64,
    params: &TDistParams,
    rng: &mut dyn RngCore,
    counter: &EvalCounter,
) -> StepResult<ParticleEval> {
    let target = LatentTarget {
        model,
        precond,
        beta,
        counter,
    };
    tpcn_step(state, &target, params, rng)
}

/// Acceptance summary of one sweep over the ensemble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelStats {
    /// Ensemble mean of the acceptance probabilities `α`.
    pub mean_accept: f64,
    pub accept_count: usize,
    pub proposal_count: usize,
}

impl KernelStats {
    pub fn from_steps<A>(steps: &[StepResult<A>]) -> Self {
        let n = steps.len();
        let mean_accept = steps.iter().map(|s| s.alpha).sum::<f64>() / n.max(1) as f64;
        Self {
            mean_accept,
            accept_count: steps.iter().filter(|s| s.accepted).count(),
            proposal_count: n,
        }
    }
}

/// Advances every chain by one step in parallel; particle `i` uses
/// `rngs.for_particle(i)`.
pub fn sweep<T: LogTarget>(
    states: &[ChainState<T::Aux>],
    target: &T,
    params: &KernelParams,
    rngs: &ParticleRngs,
) -> (Vec<ChainState<T::Aux>>, KernelStats) {
    let steps: Vec<StepResult<T::Aux>> = states
        .par_iter()
        .enumerate()
        .map(|(i, s)| params.step(s, target, &mut rngs.for_particle(i)))
        .collect();
    let stats = KernelStats::from_steps(&steps);
    (steps.into_iter().map(|s| s.state).collect(), stats)
}

/// Diminishing adaptation after sweep `m` (1-based) of a level:
/// `log ρ += (⟨α⟩ − α*)/m` clamped to `[ρ_min, 1]`, `μ += (⟨x⟩ − μ)/m`.
/// The reference scale and degrees of freedom are left unchanged.
pub fn adapt_kernel(
    params: &KernelParams,
    stats: &KernelStats,
    ensemble_mean: &DVector<f64>,
    m: usize,
    alpha_star: f64,
    rho_min: f64,
) -> KernelParams {
    assert!(m >= 1, "adaptation index starts at 1");
    let mf = m as f64;
    let log_rho = params.rho().ln() + (stats.mean_accept - alpha_star) / mf;
    let rho = log_rho.exp().clamp(rho_min, 1.0);
    let mu = params.mu() + (ensemble_mean - params.mu()) / mf;
    let mut out = params.clone();
    out.set(rho, mu);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student_t::t_log_density;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tparams() -> TDistParams {
        TDistParams::new(
            4.0,
            DVector::from_vec(vec![0.5, -1.0]),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
            0.7,
        )
        .unwrap()
    }

    #[test]
    fn pcn_accepts_its_own_reference() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]);
        let p = PcnParams::new(DVector::from_vec(vec![1.0, 2.0]), &cov, 0.5).unwrap();
        let f = p.factor().clone();
        let mu = p.mu.clone();
        let target = FnTarget(move |x: &DVector<f64>| -0.5 * f.mahalanobis_sq(&(x - &mu)));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = target.state_at(DVector::from_vec(vec![3.0, -1.0])).unwrap();
        for _ in 0..1000 {
            let r = pcn_step(&s, &target, &p, &mut rng);
            assert!(r.log_ratio.abs() < 1e-10);
            assert!(r.accepted);
            s = r.state;
        }
    }

    #[test]
    fn pcn_rho_one_ignores_current_state() {
        let p = PcnParams::new(DVector::zeros(2), &DMatrix::identity(2, 2), 1.0).unwrap();
        let target = FnTarget(|x: &DVector<f64>| -0.5 * x.norm_squared());
        let a = target.state_at(DVector::from_vec(vec![5.0, 5.0])).unwrap();
        let b = target.state_at(DVector::from_vec(vec![-3.0, 1.0])).unwrap();
        let ra = pcn_step(&a, &target, &p, &mut ChaCha8Rng::seed_from_u64(9));
        let rb = pcn_step(&b, &target, &p, &mut ChaCha8Rng::seed_from_u64(9));
        assert!(ra.accepted && rb.accepted);
        assert_eq!(ra.state.point, rb.state.point);
    }

    #[test]
    fn tpcn_accepts_its_own_reference() {
        let p = tparams();
        let scale = p.factor().matrix();
        let (nu, mu) = (p.nu, p.mu.clone());
        let target = FnTarget(move |x: &DVector<f64>| t_log_density(x, nu, &mu, &scale).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = target
            .state_at(DVector::from_vec(vec![10.0, 10.0]))
            .unwrap();
        for _ in 0..2000 {
            let r = tpcn_step(&s, &target, &p, &mut rng);
            assert!(r.log_ratio.abs() < 1e-10, "{}", r.log_ratio);
            s = r.state;
        }
    }

    #[test]
    fn rejection_returns_input_bit_identical() {
        let p = tparams();
        let target =
            FnTarget(|x: &DVector<f64>| if x[0] > 100.0 { 0.0 } else { f64::NEG_INFINITY });
        let s = ChainState {
            point: DVector::from_vec(vec![0.1 + 0.2, 1.0 / 3.0]),
            log_target: 0.0,
            aux: (),
        };
        let r = tpcn_step(&s, &target, &p, &mut ChaCha8Rng::seed_from_u64(7));
        assert!(!r.accepted);
        assert_eq!(r.alpha, 0.0);
        assert_eq!(r.state.point.as_slice(), s.point.as_slice());
    }

    #[test]
    fn constant_offset_changes_no_decision() {
        let p = tparams();
        let a = FnTarget(|x: &DVector<f64>| -0.5 * x.norm_squared());
        let b = FnTarget(|x: &DVector<f64>| -0.5 * x.norm_squared() + 123.456);
        let mut ra = ChaCha8Rng::seed_from_u64(8);
        let mut rb = ChaCha8Rng::seed_from_u64(8);
        let mut sa = a.state_at(DVector::from_vec(vec![1.0, 1.0])).unwrap();
        let mut sb = b.state_at(DVector::from_vec(vec![1.0, 1.0])).unwrap();
        for _ in 0..500 {
            let x = tpcn_step(&sa, &a, &p, &mut ra);
            let y = tpcn_step(&sb, &b, &p, &mut rb);
            assert_eq!(x.accepted, y.accepted);
            sa = x.state;
            sb = y.state;
        }
    }

    #[test]
    fn adaptation_examples() {
        let p = KernelParams::Tpcn(tparams());
        let mu = p.mu().clone();
        let at_target = KernelStats {
            mean_accept: ALPHA_STAR,
            accept_count: 0,
            proposal_count: 1,
        };
        let q = adapt_kernel(&p, &at_target, &mu, 3, ALPHA_STAR, RHO_MIN);
        assert_eq!(q.rho(), p.rho());
        assert_eq!(q.mu(), &mu);

        let mut half = tparams();
        half.rho = 0.5;
        let all = KernelStats {
            mean_accept: 1.0,
            accept_count: 1,
            proposal_count: 1,
        };
        let q = adapt_kernel(&KernelParams::Tpcn(half), &all, &mu, 1, ALPHA_STAR, RHO_MIN);
        assert_eq!(q.rho(), 1.0);

        let none = KernelStats {
            mean_accept: 0.0,
            accept_count: 0,
            proposal_count: 1,
        };
        let mut tiny = tparams();
        tiny.rho = 1.1e-6;
        let q = adapt_kernel(
            &KernelParams::Tpcn(tiny),
            &none,
            &mu,
            1,
            ALPHA_STAR,
            RHO_MIN,
        );
        assert_eq!(q.rho(), RHO_MIN);
    }

    #[test]
    fn huge_misfits_do_not_overflow() {
        let p = tparams();
        let target = FnTarget(|x: &DVector<f64>| -1e8 * (1.0 + x.norm_squared()));
        let s = target.state_at(DVector::from_vec(vec![0.0, 0.0])).unwrap();
        let r = tpcn_step(&s, &target, &p, &mut ChaCha8Rng::seed_from_u64(10));
        assert!(r.alpha.is_finite() && (0.0..=1.0).contains(&r.alpha));
        assert!(!r.log_ratio.is_nan());
    }
}
