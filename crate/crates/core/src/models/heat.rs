//! Two-dimensional heat equation on a square plate with zero Dirichlet
//! boundaries, solved by forward-time centred-space (FTCS) differences on a
//! cell-centred grid and observed as block averages at the final time.
//!
//! The unknown is the initial temperature field, parameterized by a
//! squared-exponential KL expansion, together with the diffusivity. The
//! parameter layout is `(log D, μ_K, log σ_K, θ_1..θ_R)`.

use nalgebra::{DMatrix, DVector};

use super::kl::{build_se_separable, KLBasis};
use super::prior::{Dist, PriorBlock, PriorSpec, Transform};
use crate::ensemble::ForwardModel;
use crate::error::{CoreError, Result};

/// Largest stable FTCS ratio `D Δt / Δx²` in two dimensions.
pub const FTCS_MAX_RATIO: f64 = 0.25;

/// Physical, numerical and prior settings of the heat benchmark.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatConfig {
    /// Fine grid cells per side.
    pub grid: usize,
    /// Plate side length.
    pub length: f64,
    pub t_final: f64,
    pub steps: usize,
    /// Observation grid cells per side; must divide `grid`.
    pub obs_grid: usize,
    /// Kernel length scale in plate-normalized coordinates `x / length`.
    pub ell: f64,
    /// Number of KL modes inferred.
    pub order: usize,
    /// Half-normal scale of the diffusivity prior.
    pub prior_diffusion_scale: f64,
    /// Standard deviation of the normal prior on the field mean.
    pub prior_mean_sd: f64,
    /// Half-normal scale of the field standard deviation prior.
    pub prior_sigma_scale: f64,
}

impl Default for HeatConfig {
    fn default() -> Self {
        Self {
            grid: 64,
            length: 10.0,
            t_final: 1.0,
            steps: 1000,
            obs_grid: 8,
            ell: 0.1,
            order: 100,
            prior_diffusion_scale: 0.5,
            prior_mean_sd: 0.1,
            prior_sigma_scale: 1.0,
        }
    }
}

impl HeatConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grid >= 2
            && self.length > 0.0
            && self.t_final > 0.0
            && self.steps > 0
            && self.obs_grid > 0
            && self.grid.is_multiple_of(self.obs_grid)
            && self.ell > 0.0
            && self.order > 0
            && self.order <= self.grid * self.grid;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Invalid(format!(
                "invalid heat configuration {self:?}"
            )))
        }
    }

    pub fn dx(&self) -> f64 {
        self.length / self.grid as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    /// FTCS ratio `D Δt / Δx²` for a diffusivity.
    pub fn ftcs_ratio(&self, diffusion: f64) -> f64 {
        diffusion * self.dt() / (self.dx() * self.dx())
    }

    pub fn prior(&self) -> Result<PriorSpec> {
        PriorSpec::new(vec![
            PriorBlock::Scalar {
                dist: Dist::HalfNormal {
                    sigma: self.prior_diffusion_scale,
                },
                transform: Transform::Log,
            },
            PriorBlock::Scalar {
                dist: Dist::Normal {
                    mu: 0.0,
                    sigma: self.prior_mean_sd,
                },
                transform: Transform::Identity,
            },
            PriorBlock::Scalar {
                dist: Dist::HalfNormal {
                    sigma: self.prior_sigma_scale,
                },
                transform: Transform::Log,
            },
            PriorBlock::StdNormal(self.order),
        ])
    }
}

/// One FTCS step on an `n × n` cell-centred grid. Boundary faces hold zero
/// through antisymmetric ghost cells (`u_ghost = −u_edge`).
pub fn ftcs_step(u: &[f64], out: &mut [f64], n: usize, ratio: f64) {
    for i in 0..n {
        for j in 0..n {
            let c = u[i * n + j];
            let up = if i > 0 { u[(i - 1) * n + j] } else { -c };
            let down = if i + 1 < n { u[(i + 1) * n + j] } else { -c };
            let left = if j > 0 { u[i * n + j - 1] } else { -c };
            let right = if j + 1 < n { u[i * n + j + 1] } else { -c };
            out[i * n + j] = c + ratio * (up + down + left + right - 4.0 * c);
        }
    }
}

/// Evolves `u0` through `steps` FTCS steps, failing if the scheme is
/// unstable for this diffusivity.
pub fn ftcs_solve(
    u0: &[f64],
    n: usize,
    diffusion: f64,
    ratio: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    if !(diffusion > 0.0) || !(ratio <= FTCS_MAX_RATIO) {
        return Err(CoreError::Stability { diffusion, ratio });
    }
    let mut u = u0.to_vec();
    let mut next = vec![0.0; u.len()];
    for _ in 0..steps {
        ftcs_step(&u, &mut next, n, ratio);
        std::mem::swap(&mut u, &mut next);
    }
    Ok(u)
}

/// Averages `b × b` blocks of an `n × n` field, with `m = n / b` blocks per
/// side flattened as `bi·m + bj`.
pub fn block_average(u: &[f64], n: usize, m: usize) -> DVector<f64> {
    let b = n / m;
    let mut out = DVector::zeros(m * m);
    for i in 0..n {
        for j in 0..n {
            out[(i / b) * m + j / b] += u[i * n + j];
        }
    }
    out / (b * b) as f64
}

/// Heat-equation forward map with a precomputed KL basis.
#[derive(Clone, Debug)]
pub struct HeatModel {
    config: HeatConfig,
    basis: KLBasis,
    modes: DMatrix<f64>,
}

impl HeatModel {
    pub fn new(config: HeatConfig) -> Result<Self> {
        config.validate()?;
        let basis = build_se_separable(config.grid, config.ell, config.order)?;
        Ok(Self::with_basis(config, basis))
    }

    /// Uses an already computed basis (e.g. shared with data generation).
    pub fn with_basis(config: HeatConfig, basis: KLBasis) -> Self {
        let modes = basis.scaled_modes();
        Self {
            config,
            basis,
            modes,
        }
    }

    pub fn config(&self) -> &HeatConfig {
        &self.config
    }

    pub fn basis(&self) -> &KLBasis {
        &self.basis
    }

    /// Initial temperature field `μ_K + σ_K Σ √λ_k θ_k φ_k` on the fine grid.
    pub fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        let sigma = x[2].exp();
        let theta = x.rows(3, self.config.order);
        DVector::from_element(self.modes.nrows(), x[1]) + &self.modes * theta * sigma
    }

    /// Block-averaged temperature at the final time for an initial field.
    pub fn observe_from_field(&self, u0: &[f64], diffusion: f64) -> Result<DVector<f64>> {
        let c = &self.config;
        let u = ftcs_solve(u0, c.grid, diffusion, c.ftcs_ratio(diffusion), c.steps)?;
        Ok(block_average(&u, c.grid, c.obs_grid))
    }
}

impl ForwardModel for HeatModel {
    fn dim(&self) -> usize {
        3 + self.config.order
    }

    fn obs_dim(&self) -> usize {
        self.config.obs_grid * self.config.obs_grid
    }

    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u0 = self.field(x);
        self.observe_from_field(u0.as_slice(), x[0].exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stability_violation_names_diffusion() {
        let c = HeatConfig::default();
        let d = 10.0;
        match ftcs_solve(&[0.0; 4], 2, d, c.ftcs_ratio(d), 1) {
            Err(CoreError::Stability { diffusion, .. }) => assert_eq!(diffusion, d),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn block_average_of_constant() {
        let u = vec![2.5; 64];
        let b = block_average(&u, 8, 2);
        assert!(b.iter().all(|v| (*v - 2.5).abs() < 1e-15));
    }
}
