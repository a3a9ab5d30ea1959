//! Gravity surveying: the vertical gravitational field on a surface grid
//! produced by a buried planar mass density, evaluated by midpoint
//! quadrature.
//!
//! The density is a Matérn-3/2 KL expansion on the quadrature grid. The
//! parameter layout is `(μ_K, log σ_K, θ_1..θ_R)`. Because the quadrature is
//! linear in the density, the map is stored as a dense kernel matrix.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::kl::{cached_basis, cell_centre, BasisMethod, KLBasis, KernelDesc};
use super::prior::{Dist, PriorBlock, PriorSpec, Transform};
use crate::ensemble::ForwardModel;
use crate::error::{CoreError, Result};

/// Physical, numerical and prior settings of the gravity benchmark.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GravityConfig {
    /// Quadrature points per side.
    pub quadrature: usize,
    /// Surface collocation points per side.
    pub surface: usize,
    /// Depth of the density layer below the surface.
    pub depth: f64,
    /// Matérn-3/2 length scale of the inference prior.
    pub ell: f64,
    pub order: usize,
    pub basis_method: BasisMethod,
    pub prior_mean_sd: f64,
    pub prior_sigma_scale: f64,
}

impl Default for GravityConfig {
    fn default() -> Self {
        Self {
            quadrature: 64,
            surface: 10,
            depth: 0.1,
            ell: 0.2,
            order: 60,
            basis_method: BasisMethod::Full,
            prior_mean_sd: 1.0,
            prior_sigma_scale: 0.2,
        }
    }
}

impl GravityConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.quadrature > 0
            && self.surface > 0
            && self.depth > 0.0
            && self.ell > 0.0
            && self.order > 0
            && self.order <= self.quadrature * self.quadrature;
        if ok {
            Ok(())
        } else {
            Err(CoreError::Invalid(format!(
                "invalid gravity configuration {self:?}"
            )))
        }
    }

    pub fn kernel(&self) -> KernelDesc {
        KernelDesc::Matern32 { ell: self.ell }
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
                    sigma: self.prior_sigma_scale,
                },
                transform: Transform::Log,
            },
            PriorBlock::StdNormal(self.order),
        ])
    }
}

/// `S × Q²` midpoint-quadrature matrix: entry `(i, j)` is
/// `ω δ / (‖s_i − x_j‖² + δ²)^{3/2}` with `ω = 1/Q²`.
pub fn quadrature_matrix(q: usize, surface: usize, depth: f64) -> DMatrix<f64> {
    let w = 1.0 / (q * q) as f64;
    DMatrix::from_fn(surface * surface, q * q, |i, j| {
        let (s1, s2) = (
            cell_centre(i / surface, surface),
            cell_centre(i % surface, surface),
        );
        let (x1, x2) = (cell_centre(j / q, q), cell_centre(j % q, q));
        let r2 = (s1 - x1).powi(2) + (s2 - x2).powi(2) + depth * depth;
        w * depth / (r2 * r2.sqrt())
    })
}

/// Density of the reference survey, `sin(πx₁) + sin(3πx₂) + x₂ + 1`, on the
/// quadrature grid, scaled so its grid maximum is 1.
pub fn reference_density(q: usize) -> DVector<f64> {
    use std::f64::consts::PI;
    let raw = DVector::from_fn(q * q, |p, _| {
        let (x1, x2) = (cell_centre(p / q, q), cell_centre(p % q, q));
        (PI * x1).sin() + (3.0 * PI * x2).sin() + x2 + 1.0
    });
    let max = raw.max();
    raw / max
}

/// Gravity forward map with precomputed quadrature and basis responses.
#[derive(Clone, Debug)]
pub struct GravityModel {
    config: GravityConfig,
    basis: KLBasis,
    quad: DMatrix<f64>,
    /// Response to a unit constant density.
    unit_response: DVector<f64>,
    /// Response to each scaled mode, `G Φ diag(√λ)`.
    mode_response: DMatrix<f64>,
}

impl GravityModel {
    /// Builds the model, reading or writing the basis under `cache_dir`.
    pub fn new(config: GravityConfig, cache_dir: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let basis = cached_basis(
            cache_dir,
            config.kernel(),
            config.quadrature,
            config.order,
            config.basis_method,
        )?;
        Ok(Self::with_basis(config, basis))
    }

    pub fn with_basis(config: GravityConfig, basis: KLBasis) -> Self {
        let quad = quadrature_matrix(config.quadrature, config.surface, config.depth);
        let unit_response = quad.column_sum();
        let mode_response = &quad * basis.scaled_modes();
        Self {
            config,
            basis,
            quad,
            unit_response,
            mode_response,
        }
    }

    pub fn config(&self) -> &GravityConfig {
        &self.config
    }

    pub fn basis(&self) -> &KLBasis {
        &self.basis
    }

    /// Surface field for a density given on the quadrature grid.
    pub fn observe_density(&self, density: &DVector<f64>) -> DVector<f64> {
        &self.quad * density
    }

    /// Density `μ_K + σ_K Σ √λ_k θ_k φ_k` on the quadrature grid.
    pub fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        self.basis
            .field(x[0], x[1].exp(), x.rows(2, self.config.order).as_slice())
    }
}

impl ForwardModel for GravityModel {
    fn dim(&self) -> usize {
        2 + self.config.order
    }

    fn obs_dim(&self) -> usize {
        self.config.surface * self.config.surface
    }

    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let theta = x.rows(2, self.config.order);
        Ok(&self.unit_response * x[0] + &self.mode_response * theta * x[1].exp())
    }
}
