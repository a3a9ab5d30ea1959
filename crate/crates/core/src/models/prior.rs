//! Product priors over blocks of scalar parameters with optional log
//! transforms to unconstrained coordinates.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::ensemble::Prior;
use crate::error::{CoreError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One-dimensional distribution of a constrained parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dist {
    Normal { mu: f64, sigma: f64 },
    HalfNormal { sigma: f64 },
    InverseGamma { alpha: f64, beta: f64 },
}

impl Dist {
    /// Log density at a constrained value.
    pub fn log_density(&self, v: f64) -> f64 {
        match *self {
            Dist::Normal { mu, sigma } => {
                let z = (v - mu) / sigma;
                -0.5 * LN_2PI - sigma.ln() - 0.5 * z * z
            }
            Dist::HalfNormal { sigma } => {
                if v < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    (2.0 / std::f64::consts::PI).sqrt().ln()
                        - sigma.ln()
                        - v * v / (2.0 * sigma * sigma)
                }
            }
            Dist::InverseGamma { alpha, beta } => {
                if v <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * v.ln() - beta / v
                }
            }
        }
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        match *self {
            Dist::Normal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                mu + sigma * z
            }
            Dist::HalfNormal { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (sigma * z).abs()
            }
            Dist::InverseGamma { alpha, beta } => {
                let g: f64 = Gamma::new(alpha, 1.0 / beta)
                    .expect("validated inverse-gamma parameters")
                    .sample(rng);
                1.0 / g
            }
        }
    }

    fn positive_support(&self) -> bool {
        !matches!(self, Dist::Normal { .. })
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Dist::Normal { mu, sigma } => mu.is_finite() && sigma > 0.0,
            Dist::HalfNormal { sigma } => sigma > 0.0,
            Dist::InverseGamma { alpha, beta } => alpha > 0.0 && beta > 0.0,
        };
        if ok && self.log_density(1.0).is_finite() {
            Ok(())
        } else {
            Err(CoreError::Invalid(format!(
                "invalid prior parameters {self:?}"
            )))
        }
    }
}

/// Map from a constrained value to its unconstrained coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    /// `ζ = log v`; contributes `+ζ` to the unconstrained log density.
    Log,
}

/// One block of the parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub enum PriorBlock {
    Scalar {
        dist: Dist,
        transform: Transform,
    },
    /// `n` independent standard normals.
    StdNormal(usize),
}

impl PriorBlock {
    fn len(&self) -> usize {
        match self {
            PriorBlock::Scalar { .. } => 1,
            PriorBlock::StdNormal(n) => *n,
        }
    }
}

/// Independent product prior in unconstrained coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSpec {
    blocks: Vec<PriorBlock>,
    dim: usize,
}

impl PriorSpec {
    pub fn new(blocks: Vec<PriorBlock>) -> Result<Self> {
        for b in &blocks {
            if let PriorBlock::Scalar { dist, transform } = b {
                dist.validate()?;
                if *transform == Transform::Log && !dist.positive_support() {
                    return Err(CoreError::Invalid(format!(
                        "log transform applied to {dist:?}, which is not positive"
                    )));
                }
            }
        }
        let dim = blocks.iter().map(PriorBlock::len).sum();
        Ok(Self { blocks, dim })
    }

    pub fn blocks(&self) -> &[PriorBlock] {
        &self.blocks
    }

    /// Constrained parameter values for unconstrained coordinates.
    pub fn constrained(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        let mut k = 0;
        for b in &self.blocks {
            if let PriorBlock::Scalar {
                transform: Transform::Log,
                ..
            } = b
            {
                out[k] = x[k].exp();
            }
            k += b.len();
        }
        out
    }
}

/// Log density of unconstrained parameters, including transform Jacobians.
pub fn prior_log_density(x: &DVector<f64>, spec: &PriorSpec) -> f64 {
    let mut k = 0;
    let mut total = 0.0;
    for b in &spec.blocks {
        match b {
            PriorBlock::Scalar { dist, transform } => {
                let z = x[k];
                total += match transform {
                    Transform::Identity => dist.log_density(z),
                    Transform::Log => dist.log_density(z.exp()) + z,
                };
            }
            PriorBlock::StdNormal(n) => {
                let sq: f64 = x.rows(k, *n).norm_squared();
                total += -0.5 * (*n as f64) * LN_2PI - 0.5 * sq;
            }
        }
        k += b.len();
    }
    total
}

impl Prior for PriorSpec {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for b in &self.blocks {
            match b {
                PriorBlock::Scalar { dist, transform } => {
                    let v = dist.sample(rng);
                    out.push(match transform {
                        Transform::Identity => v,
                        Transform::Log => v.ln(),
                    });
                }
                PriorBlock::StdNormal(n) => {
                    for _ in 0..*n {
                        out.push(StandardNormal.sample(rng));
                    }
                }
            }
        }
        DVector::from_vec(out)
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        prior_log_density(x, self)
    }

    fn gaussian_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let mut mean = Vec::with_capacity(self.dim);
        let mut var = Vec::with_capacity(self.dim);
        for b in &self.blocks {
            match b {
                PriorBlock::Scalar {
                    dist: Dist::Normal { mu, sigma },
                    transform: Transform::Identity,
                } => {
                    mean.push(*mu);
                    var.push(sigma * sigma);
                }
                PriorBlock::StdNormal(n) => {
                    mean.extend(std::iter::repeat_n(0.0, *n));
                    var.extend(std::iter::repeat_n(1.0, *n));
                }
                _ => return None,
            }
        }
        Some((
            DVector::from_vec(mean),
            DMatrix::from_diagonal(&DVector::from_vec(var)),
        ))
    }
}

/// Multivariate normal prior `N(m, Σ)`.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    factor: crate::linalg::CholFactor,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let factor = crate::linalg::CholFactor::new(cov, "prior covariance")?;
        if factor.jitter() > 0.0 || factor.dim() != mean.len() {
            return Err(CoreError::Invalid(
                "prior covariance must be positive definite and match the mean".into(),
            ));
        }
        Ok(Self { mean, factor })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> DMatrix<f64> {
        self.factor.matrix()
    }
}

impl Prior for GaussianPrior {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let e = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &self.mean + self.factor.l() * e
    }

    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        -0.5 * d * LN_2PI
            - self.factor.half_log_det()
            - 0.5 * self.factor.mahalanobis_sq(&(x - &self.mean))
    }

    fn gaussian_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        Some((self.mean.clone(), self.cov()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_normal_block_at_zero() {
        let p = PriorSpec::new(vec![PriorBlock::StdNormal(3)]).unwrap();
        let v = prior_log_density(&DVector::zeros(3), &p);
        assert!((v - 3.0 * (-0.5 * LN_2PI)).abs() < 1e-14);
    }

    #[test]
    fn half_normal_log_transform_at_zero() {
        let p = PriorSpec::new(vec![PriorBlock::Scalar {
            dist: Dist::HalfNormal { sigma: 0.5 },
            transform: Transform::Log,
        }])
        .unwrap();
        let expected = ((2.0 / std::f64::consts::PI).sqrt() / 0.5).ln() - 1.0 / (2.0 * 0.25);
        assert!((prior_log_density(&DVector::zeros(1), &p) - expected).abs() < 1e-14);
    }

    #[test]
    fn log_transform_requires_positive_support() {
        assert!(PriorSpec::new(vec![PriorBlock::Scalar {
            dist: Dist::Normal {
                mu: 0.0,
                sigma: 1.0
            },
            transform: Transform::Log,
        }])
        .is_err());
    }

    #[test]
    fn gaussian_moments_only_for_gaussian_blocks() {
        let g = PriorSpec::new(vec![
            PriorBlock::Scalar {
                dist: Dist::Normal {
                    mu: 1.0,
                    sigma: 0.1,
                },
                transform: Transform::Identity,
            },
            PriorBlock::StdNormal(2),
        ])
        .unwrap();
        let (m, c) = g.gaussian_moments().unwrap();
        assert_eq!(m.as_slice(), &[1.0, 0.0, 0.0]);
        assert!((c[(0, 0)] - 0.01).abs() < 1e-16);
        let h = PriorSpec::new(vec![PriorBlock::Scalar {
            dist: Dist::HalfNormal { sigma: 1.0 },
            transform: Transform::Log,
        }])
        .unwrap();
        assert!(h.gaussian_moments().is_none());
    }
}
