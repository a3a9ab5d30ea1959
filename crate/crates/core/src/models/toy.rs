//! Small synthetic inverse problems with known or cheaply computable
//! posteriors: a linear-Gaussian problem with a closed-form conjugate
//! posterior, and a mildly nonlinear problem `F(x) = Ax + c (x ⊙ x)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use super::prior::GaussianPrior;
use crate::ensemble::{ForwardModel, ModelSpec, NoiseCov};
use crate::error::{CoreError, Result};
use crate::linalg::{symmetrize, CholFactor};
use crate::rng::{Purpose, Streams};

/// `F(x) = A x + c (x ⊙ x)`; linear when `c = 0`.
#[derive(Clone, Debug)]
pub struct QuadraticForward {
    pub a: DMatrix<f64>,
    pub quad: f64,
}

impl ForwardModel for QuadraticForward {
    fn dim(&self) -> usize {
        self.a.ncols()
    }

    fn obs_dim(&self) -> usize {
        self.a.nrows()
    }

    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = &self.a * x;
        if self.quad != 0.0 {
            let n = out.len().min(x.len());
            for k in 0..n {
                out[k] += self.quad * x[k] * x[k];
            }
        }
        Ok(out)
    }
}

/// Linear forward model, Gaussian prior and Gaussian noise.
#[derive(Clone, Debug)]
pub struct LinearGaussianToy {
    pub a: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    pub noise_cov: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl LinearGaussianToy {
    /// Instance with `A` entries `N(0,1)`, prior `N(0, I)`, noise
    /// `N(0, σ² I)` and data from a prior draw, all from `seed`.
    pub fn random(d: usize, n_y: usize, noise_sd: f64, seed: u64) -> Self {
        let streams = Streams::new(seed);
        let mut rng = streams.stream(Purpose::ProblemSetup, 0, 0, 0);
        let a = DMatrix::from_fn(n_y, d, |_, _| StandardNormal.sample(&mut rng));
        let truth = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        let mut noise_rng = streams.stream(Purpose::DataNoise, 0, 0, 0);
        let eta = DVector::from_fn(n_y, |_, _| {
            noise_sd * {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                z
            }
        });
        Self {
            y: &a * truth + eta,
            a,
            prior_mean: DVector::zeros(d),
            prior_cov: DMatrix::identity(d, d),
            noise_cov: DMatrix::identity(n_y, n_y) * (noise_sd * noise_sd),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        let prior = GaussianPrior::new(self.prior_mean.clone(), &self.prior_cov)?;
        let noise = if is_diagonal(&self.noise_cov) {
            NoiseCov::diagonal(self.noise_cov.diagonal())?
        } else {
            NoiseCov::dense(&self.noise_cov)?
        };
        ModelSpec::new(
            Arc::new(prior),
            Arc::new(QuadraticForward {
                a: self.a.clone(),
                quad: 0.0,
            }),
            self.y.clone(),
            noise,
        )
    }

    /// Conjugate posterior `N(m, Σ)` with
    /// `Σ = (Σ₀⁻¹ + AᵀΓ⁻¹A)⁻¹`, `m = Σ (Σ₀⁻¹ m₀ + AᵀΓ⁻¹ y)`.
    pub fn posterior(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p0 = CholFactor::new(&self.prior_cov, "prior covariance")?;
        let g = CholFactor::new(&self.noise_cov, "noise covariance")?;
        let at_ginv = g.solve_matrix(&self.a).transpose();
        let precision = symmetrize(
            &(p0.solve_matrix(&DMatrix::identity(self.dim(), self.dim())) + &at_ginv * &self.a),
        );
        let pf = CholFactor::new(&precision, "posterior precision")?;
        if pf.jitter() > 0.0 {
            return Err(CoreError::Numerical(
                "posterior precision is singular".into(),
            ));
        }
        let rhs = p0.solve(&self.prior_mean) + at_ginv * &self.y;
        let cov = symmetrize(&pf.solve_matrix(&DMatrix::identity(self.dim(), self.dim())));
        Ok((pf.solve(&rhs), cov))
    }
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    m.iter()
        .enumerate()
        .all(|(k, v)| k % m.nrows() == k / m.nrows() || *v == 0.0)
}

/// Settings of the mildly nonlinear toy problem.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonlinearToyConfig {
    pub dim: usize,
    pub obs_dim: usize,
    /// Coefficient `c` of the elementwise square.
    pub quad: f64,
    pub noise_sd: f64,
    /// Seed of the operator, truth and noise draws.
    pub problem_seed: u64,
}

impl Default for NonlinearToyConfig {
    fn default() -> Self {
        Self {
            dim: 10,
            obs_dim: 10,
            quad: 0.1,
            noise_sd: 0.5,
            problem_seed: 20240,
        }
    }
}

/// The nonlinear toy with prior `N(0, I)`; operator and data are drawn as
/// in [`LinearGaussianToy::random`] and passed through the quadratic map.
pub fn nonlinear_toy(cfg: &NonlinearToyConfig) -> Result<ModelSpec> {
    if cfg.dim == 0 || cfg.obs_dim == 0 || !(cfg.noise_sd > 0.0) {
        return Err(CoreError::Invalid(format!(
            "invalid nonlinear toy configuration {cfg:?}"
        )));
    }
    let streams = Streams::new(cfg.problem_seed);
    let mut rng = streams.stream(Purpose::ProblemSetup, 0, 0, 0);
    let a = DMatrix::from_fn(cfg.obs_dim, cfg.dim, |_, _| StandardNormal.sample(&mut rng));
    let truth = DVector::from_fn(cfg.dim, |_, _| StandardNormal.sample(&mut rng));
    let forward = QuadraticForward { a, quad: cfg.quad };
    let mut noise_rng = streams.stream(Purpose::DataNoise, 0, 0, 0);
    let eta = DVector::from_fn(cfg.obs_dim, |_, _| {
        cfg.noise_sd * {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            z
        }
    });
    let y = forward.forward(&truth)? + eta;
    let prior = GaussianPrior::new(
        DVector::zeros(cfg.dim),
        &DMatrix::identity(cfg.dim, cfg.dim),
    )?;
    ModelSpec::new(
        Arc::new(prior),
        Arc::new(forward),
        y,
        NoiseCov::isotropic(cfg.obs_dim, cfg.noise_sd)?,
    )
}
