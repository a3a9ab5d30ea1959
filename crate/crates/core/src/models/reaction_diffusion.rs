//! One-dimensional reaction-diffusion `∂s/∂t = D ∂²s/∂x² + γ s² + u(x)` on
//! `[0, 1]` with zero Dirichlet boundaries and zero initial state.
//!
//! Space uses centred second differences on a uniform node grid; time uses
//! backward Euler (or Crank-Nicolson) with a Newton solve per step whose
//! tridiagonal Jacobian is factored by the Thomas algorithm. The source is a
//! Hilbert-space Gaussian-process expansion with a squared-exponential
//! spectral density. Parameter layout: `(μ_H, log α_H, log ℓ_H, θ_1..θ_R)`.

use nalgebra::{DMatrix, DVector};

use super::kl::HilbertBasis;
use super::prior::{Dist, PriorBlock, PriorSpec, Transform};
use crate::ensemble::ForwardModel;
use crate::error::{CoreError, Result};

/// Time integrator for the reaction-diffusion solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    BackwardEuler,
    CrankNicolson,
}

/// Physical, numerical and prior settings of the reaction-diffusion
/// benchmark.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReactionDiffusionConfig {
    /// Spatial nodes including both boundary nodes.
    pub nodes: usize,
    pub steps: usize,
    pub t_final: f64,
    pub diffusion: f64,
    pub reaction: f64,
    pub scheme: TimeScheme,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Node indices observed.
    pub obs_nodes: Vec<usize>,
    /// Time-step indices (1-based, `t = k Δt`) observed.
    pub obs_steps: Vec<usize>,
    /// Half-width of the Laplacian domain; the solver interval is mapped to
    /// `[−½, ½]` inside it.
    pub hilbert_half_width: f64,
    pub order: usize,
    pub prior_mean_sd: f64,
    pub prior_alpha_scale: f64,
    pub prior_ell_shape: f64,
    pub prior_ell_scale: f64,
}

impl Default for ReactionDiffusionConfig {
    fn default() -> Self {
        Self {
            nodes: 100,
            steps: 100,
            t_final: 1.0,
            diffusion: 0.1,
            reaction: 0.1,
            scheme: TimeScheme::BackwardEuler,
            newton_tol: 1e-10,
            newton_max_iter: 20,
            obs_nodes: (0..10).map(|k| 5 + 10 * k).collect(),
            obs_steps: (1..=10).map(|k| 10 * k).collect(),
            hilbert_half_width: 1.0,
            order: 50,
            prior_mean_sd: 0.1,
            prior_alpha_scale: 1.0,
            prior_ell_shape: 4.0,
            prior_ell_scale: 0.3,
        }
    }
}

impl ReactionDiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.nodes >= 3
            && self.steps > 0
            && self.t_final > 0.0
            && self.diffusion > 0.0
            && self.reaction.is_finite()
            && self.newton_tol > 0.0
            && self.newton_max_iter > 0
            && !self.obs_nodes.is_empty()
            && self.obs_nodes.iter().all(|&i| i < self.nodes)
            && !self.obs_steps.is_empty()
            && self.obs_steps.iter().all(|&k| k >= 1 && k <= self.steps)
            && self.obs_steps.windows(2).all(|w| w[0] < w[1])
            && self.hilbert_half_width >= 0.5
            && self.order > 0;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Invalid(format!(
                "invalid reaction-diffusion configuration {self:?}"
            )))
        }
    }

    /// Node coordinates `i / (nodes − 1)`.
    pub fn grid(&self) -> Vec<f64> {
        let h = 1.0 / (self.nodes - 1) as f64;
        (0..self.nodes).map(|i| i as f64 * h).collect()
    }

    pub fn hilbert(&self) -> HilbertBasis {
        HilbertBasis {
            half_width: self.hilbert_half_width,
            order: self.order,
        }
    }

    pub fn prior(&self) -> Result<PriorSpec> {
        PriorSpec::new(vec![
            PriorBlock::Scalar {
                dist: Dist::Normal {
                    mu: 0.0,
                    sigma: self.prior_mean_sd,
                },
                transform: Transform::Identity,
            },
            PriorBlock::Scalar {
                dist: Dist::HalfNormal {
                    sigma: self.prior_alpha_scale,
                },
                transform: Transform::Log,
            },
            PriorBlock::Scalar {
                dist: Dist::InverseGamma {
                    alpha: self.prior_ell_shape,
                    beta: self.prior_ell_scale,
                },
                transform: Transform::Log,
            },
            PriorBlock::StdNormal(self.order),
        ])
    }
}

/// Solves `a_i z_{i−1} + b_i z_i + c_i z_{i+1} = r_i` in place (`a_0` and
/// `c_{n−1}` are ignored).
pub fn thomas_solve(a: &[f64], b: &[f64], c: &[f64], r: &mut [f64]) -> Result<()> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut denom = b[0];
    for i in 0..n {
        if i > 0 {
            denom = b[i] - a[i] * cp[i - 1];
            r[i] -= a[i] * r[i - 1];
        }
        if denom == 0.0 || !denom.is_finite() {
            return Err(CoreError::Numerical(format!(
                "zero pivot in tridiagonal solve at row {i}"
            )));
        }
        cp[i] = if i + 1 < n { c[i] / denom } else { 0.0 };
        r[i] /= denom;
    }
    for i in (0..n.saturating_sub(1)).rev() {
        r[i] -= cp[i] * r[i + 1];
    }
    Ok(())
}

/// Full space-time solution at every step; row `k` is time `k Δt`.
#[derive(Clone, Debug)]
pub struct RdSolution {
    pub states: Vec<DVector<f64>>,
    /// Largest final Newton residual (max norm) over all steps.
    pub max_residual: f64,
}

/// Integrates the equation for a source given at the nodes.
pub fn solve_reaction_diffusion(
    cfg: &ReactionDiffusionConfig,
    source: &[f64],
) -> Result<RdSolution> {
    let n = cfg.nodes;
    let m = n - 2;
    let h = 1.0 / (n - 1) as f64;
    let dt = cfg.t_final / cfg.steps as f64;
    let k = cfg.diffusion / (h * h);
    let theta = match cfg.scheme {
        TimeScheme::BackwardEuler => 1.0,
        TimeScheme::CrankNicolson => 0.5,
    };
    let u = &source[1..n - 1];
    // Interior operator: (L s)_i = k (s_{i−1} − 2 s_i + s_{i+1}) + γ s_i².
    let op = |s: &[f64], i: usize| -> f64 {
        let left = if i > 0 { s[i - 1] } else { 0.0 };
        let right = if i + 1 < m { s[i + 1] } else { 0.0 };
        k * (left - 2.0 * s[i] + right) + cfg.reaction * s[i] * s[i]
    };

    let mut states = Vec::with_capacity(cfg.steps + 1);
    states.push(DVector::zeros(n));
    let mut prev = vec![0.0; m];
    let mut max_residual: f64 = 0.0;
    let (mut a, mut b, mut c, mut r) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for step in 1..=cfg.steps {
        // Explicit part of the right-hand side.
        let base: Vec<f64> = (0..m)
            .map(|i| prev[i] + dt * u[i] + (1.0 - theta) * dt * op(&prev, i))
            .collect();
        let mut s = prev.clone();
        let residual = |s: &[f64], out: &mut [f64]| -> f64 {
            let mut norm: f64 = 0.0;
            for i in 0..m {
                out[i] = s[i] - theta * dt * op(s, i) - base[i];
                norm = norm.max(out[i].abs());
            }
            norm
        };
        let mut res = residual(&s, &mut r);
        let mut iter = 0;
        while res > cfg.newton_tol {
            if iter == cfg.newton_max_iter || !res.is_finite() {
                return Err(CoreError::Newton {
                    step,
                    residual: res,
                });
            }
            for i in 0..m {
                a[i] = -theta * dt * k;
                c[i] = -theta * dt * k;
                b[i] = 1.0 + theta * dt * (2.0 * k - 2.0 * cfg.reaction * s[i]);
            }
            thomas_solve(&a, &b, &c, &mut r)?;
            for i in 0..m {
                s[i] -= r[i];
            }
            res = residual(&s, &mut r);
            iter += 1;
        }
        max_residual = max_residual.max(res);
        let mut full = DVector::zeros(n);
        full.rows_mut(1, m)
            .copy_from(&DVector::from_column_slice(&s));
        states.push(full);
        prev = s;
    }
    Ok(RdSolution {
        states,
        max_residual,
    })
}

/// Observations `s(x_i, t_k)` ordered time-major.
pub fn observe(cfg: &ReactionDiffusionConfig, sol: &RdSolution) -> DVector<f64> {
    let mut out = Vec::with_capacity(cfg.obs_steps.len() * cfg.obs_nodes.len());
    for &k in &cfg.obs_steps {
        for &i in &cfg.obs_nodes {
            out.push(sol.states[k][i]);
        }
    }
    DVector::from_vec(out)
}

/// Reaction-diffusion forward map with a precomputed Hilbert design matrix.
#[derive(Clone, Debug)]
pub struct ReactionDiffusionModel {
    config: ReactionDiffusionConfig,
    hilbert: HilbertBasis,
    /// `nodes × R` eigenfunction values at the shifted node coordinates.
    design: DMatrix<f64>,
}

impl ReactionDiffusionModel {
    pub fn new(config: ReactionDiffusionConfig) -> Result<Self> {
        config.validate()?;
        let hilbert = config.hilbert();
        let xs: Vec<f64> = config.grid().iter().map(|x| x - 0.5).collect();
        let design = hilbert.design(&xs);
        Ok(Self {
            config,
            hilbert,
            design,
        })
    }

    pub fn config(&self) -> &ReactionDiffusionConfig {
        &self.config
    }

    /// Source `μ_H + Σ √S(√λ_j) φ_j θ_j` at the solver nodes.
    pub fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        let r = self.config.order;
        let w = self.hilbert.weights(x[1].exp(), x[2].exp());
        let coeffs = w.component_mul(&x.rows(3, r));
        DVector::from_element(self.config.nodes, x[0]) + &self.design * coeffs
    }
}

impl ForwardModel for ReactionDiffusionModel {
    fn dim(&self) -> usize {
        3 + self.config.order
    }

    fn obs_dim(&self) -> usize {
        self.config.obs_nodes.len() * self.config.obs_steps.len()
    }

    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.field(x);
        let sol = solve_reaction_diffusion(&self.config, u.as_slice())?;
        Ok(observe(&self.config, &sol))
    }
}
