//! Bijective reparametrizations used to precondition Kalman updates and
//! Metropolis kernels.
//!
//! A preconditioner maps data-space states `x` to latent states `z = f(x)`.
//! Samplers work on `z` with the target density
//! `π(f⁻¹(z)) |det Df⁻¹(z)|`. The identity map and a moment-matched affine
//! Gaussianization are provided; a trainable flow can implement the same
//! trait.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::ensemble_moments;
use crate::error::{CoreError, Result};
use crate::linalg::CholFactor;

/// Invertible map between data space and latent space.
pub trait Preconditioner: Send + Sync {
    fn dim(&self) -> usize;

    /// `z = f(x)`.
    fn forward(&self, x: &DVector<f64>) -> DVector<f64>;

    /// `x = f⁻¹(z)`.
    fn inverse(&self, z: &DVector<f64>) -> Result<DVector<f64>>;

    /// `log |det Df⁻¹(z)|`.
    fn log_det_jacobian_inverse(&self, z: &DVector<f64>) -> f64;

    /// Applies [`Preconditioner::forward`] to every row.
    fn forward_rows(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        map_rows(xs, |x| Ok(self.forward(x))).expect("forward map is total")
    }

    /// Applies [`Preconditioner::inverse`] to every row.
    fn inverse_rows(&self, zs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        map_rows(zs, |z| self.inverse(z))
    }
}

fn map_rows(
    m: &DMatrix<f64>,
    f: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let v = f(&m.row(i).transpose())?;
        out.set_row(i, &v.transpose());
    }
    Ok(out)
}

/// The identity map.
#[derive(Clone, Debug)]
pub struct IdentityMap {
    dim: usize,
}

impl IdentityMap {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl Preconditioner for IdentityMap {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn inverse(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(z.clone())
    }

    fn log_det_jacobian_inverse(&self, _z: &DVector<f64>) -> f64 {
        0.0
    }

    fn forward_rows(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        xs.clone()
    }

    fn inverse_rows(&self, zs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(zs.clone())
    }
}

/// `z = L⁻¹(x − m)` with `L Lᵀ` the covariance being whitened.
#[derive(Clone, Debug)]
pub struct AffineMap {
    mean: DVector<f64>,
    factor: CholFactor,
    log_det: f64,
}

impl AffineMap {
    /// Map with the given shift and lower-triangular factor.
    pub fn new(mean: DVector<f64>, lower: DMatrix<f64>) -> Result<Self> {
        let factor = CholFactor::from_lower(lower)?;
        Self::from_factor(mean, factor)
    }

    fn from_factor(mean: DVector<f64>, factor: CholFactor) -> Result<Self> {
        if mean.len() != factor.dim() {
            return Err(CoreError::Dimension(
                "affine map mean and factor differ in size".into(),
            ));
        }
        let log_det = factor.half_log_det();
        Ok(Self {
            mean,
            factor,
            log_det,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        self.factor.l()
    }
}

/// Fits the affine whitening map to an ensemble's mean and covariance.
pub fn fit_affine(states: &DMatrix<f64>) -> Result<AffineMap> {
    if states.nrows() < 2 {
        return Err(CoreError::Invalid(
            "affine fit needs at least 2 particles".into(),
        ));
    }
    let (mean, cov) = ensemble_moments(states);
    let factor = CholFactor::new(&cov, "ensemble covariance")?;
    AffineMap::from_factor(mean, factor)
}

/// `Σ log L_kk`, the constant `log |det Df⁻¹|` of an affine map.
pub fn logdet_inverse(map: &AffineMap) -> f64 {
    map.log_det
}

impl Preconditioner for AffineMap {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        self.factor.whiten(&(x - &self.mean))
    }

    fn inverse(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.factor.l() * z + &self.mean)
    }

    fn log_det_jacobian_inverse(&self, _z: &DVector<f64>) -> f64 {
        self.log_det
    }

    fn forward_rows(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        let centered = DMatrix::from_fn(xs.nrows(), xs.ncols(), |i, k| xs[(i, k)] - self.mean[k]);
        self.factor.whiten_matrix(&centered.transpose()).transpose()
    }

    fn inverse_rows(&self, zs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut x = zs * self.factor.l().transpose();
        for mut row in x.row_iter_mut() {
            row += self.mean.transpose();
        }
        Ok(x)
    }
}

/// Which preconditioner a sampler fits at each level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecondKind {
    #[default]
    Identity,
    Affine,
}

impl PrecondKind {
    pub fn name(self) -> &'static str {
        match self {
            PrecondKind::Identity => "identity",
            PrecondKind::Affine => "affine",
        }
    }

    /// Fits the map of this kind to an ensemble.
    pub fn fit(self, states: &DMatrix<f64>) -> Result<FittedPrecond> {
        Ok(match self {
            PrecondKind::Identity => FittedPrecond::Identity(IdentityMap::new(states.ncols())),
            PrecondKind::Affine => FittedPrecond::Affine(fit_affine(states)?),
        })
    }
}

/// A fitted preconditioner of either kind.
#[derive(Clone, Debug)]
pub enum FittedPrecond {
    Identity(IdentityMap),
    Affine(AffineMap),
}

impl Preconditioner for FittedPrecond {
    fn dim(&self) -> usize {
        match self {
            FittedPrecond::Identity(m) => m.dim(),
            FittedPrecond::Affine(m) => m.dim(),
        }
    }

    fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            FittedPrecond::Identity(m) => m.forward(x),
            FittedPrecond::Affine(m) => m.forward(x),
        }
    }

    fn inverse(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            FittedPrecond::Identity(m) => m.inverse(z),
            FittedPrecond::Affine(m) => m.inverse(z),
        }
    }

    fn log_det_jacobian_inverse(&self, z: &DVector<f64>) -> f64 {
        match self {
            FittedPrecond::Identity(m) => m.log_det_jacobian_inverse(z),
            FittedPrecond::Affine(m) => m.log_det_jacobian_inverse(z),
        }
    }

    fn forward_rows(&self, xs: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            FittedPrecond::Identity(m) => m.forward_rows(xs),
            FittedPrecond::Affine(m) => m.forward_rows(xs),
        }
    }

    fn inverse_rows(&self, zs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            FittedPrecond::Identity(m) => m.inverse_rows(zs),
            FittedPrecond::Affine(m) => m.inverse_rows(zs),
        }
    }
}
