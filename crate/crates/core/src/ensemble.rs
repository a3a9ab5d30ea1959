//! Particle ensembles, model specifications and batched forward evaluation.
//!
//! An ensemble is a `J × d` matrix whose rows are particles in unconstrained
//! parameter coordinates. Forward evaluation runs over particles in parallel
//! and always returns rows in particle order, so results do not depend on the
//! number of worker threads.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{CoreError, Result};
use crate::linalg::CholFactor;

/// A particle ensemble: `J` rows of `d`-dimensional states.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    states: DMatrix<f64>,
}

impl Ensemble {
    /// Wraps a `J × d` matrix. Requires `J ≥ 2` and finite entries.
    pub fn new(states: DMatrix<f64>) -> Result<Self> {
        if states.nrows() < 2 {
            return Err(CoreError::Invalid(format!(
                "an ensemble needs at least 2 particles, got {}",
                states.nrows()
            )));
        }
        if let Some(pos) = states.iter().position(|v| !v.is_finite()) {
            let j = states.nrows();
            return Err(CoreError::Numerical(format!(
                "non-finite entry in particle {} coordinate {}",
                pos % j,
                pos / j
            )));
        }
        let ens = Self { states };
        if ens.small_for_t_fit() {
            log::debug!(
                "ensemble of {} particles in {} dimensions is below 2d",
                ens.size(),
                ens.dim()
            );
        }
        Ok(ens)
    }

    /// Builds an ensemble from particle vectors.
    pub fn from_particles(particles: &[DVector<f64>]) -> Result<Self> {
        let d = particles.first().map_or(0, |p| p.len());
        if particles.iter().any(|p| p.len() != d) {
            return Err(CoreError::Dimension("particles of unequal length".into()));
        }
        Self::new(DMatrix::from_fn(particles.len(), d, |i, k| particles[i][k]))
    }

    /// Number of particles `J`.
    pub fn size(&self) -> usize {
        self.states.nrows()
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn into_states(self) -> DMatrix<f64> {
        self.states
    }

    /// Particle `i` as a column vector.
    pub fn particle(&self, i: usize) -> DVector<f64> {
        self.states.row(i).transpose()
    }

    /// True when `J < 2d`, below which the t-distribution fit is unreliable.
    pub fn small_for_t_fit(&self) -> bool {
        self.size() < 2 * self.dim()
    }
}

/// Observation noise covariance `Γ`.
#[derive(Clone, Debug)]
pub enum NoiseCov {
    /// Independent noise with the given variances.
    Diagonal(DVector<f64>),
    /// Full symmetric positive definite covariance with its factor.
    Dense(CholFactor),
}

impl NoiseCov {
    /// `σ² I` of size `n`.
    pub fn isotropic(n: usize, sigma: f64) -> Result<Self> {
        Self::diagonal(DVector::from_element(n, sigma * sigma))
    }

    pub fn diagonal(variances: DVector<f64>) -> Result<Self> {
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(CoreError::Invalid(
                "noise variances must be positive and finite".into(),
            ));
        }
        Ok(Self::Diagonal(variances))
    }

    /// Dense covariance; must factorize without jitter.
    pub fn dense(cov: &DMatrix<f64>) -> Result<Self> {
        let f = CholFactor::new(cov, "noise covariance")?;
        if f.jitter() > 0.0 {
            return Err(CoreError::Invalid(
                "noise covariance is not positive definite".into(),
            ));
        }
        Ok(Self::Dense(f))
    }

    pub fn dim(&self) -> usize {
        match self {
            NoiseCov::Diagonal(v) => v.len(),
            NoiseCov::Dense(f) => f.dim(),
        }
    }

    /// `Γ^{-1/2} r`.
    pub fn whiten(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            NoiseCov::Diagonal(v) => r.zip_map(v, |a, s| a / s.sqrt()),
            NoiseCov::Dense(f) => f.whiten(r),
        }
    }

    /// `Γ^{-1} r`.
    pub fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            NoiseCov::Diagonal(v) => r.component_div(v),
            NoiseCov::Dense(f) => f.solve(r),
        }
    }

    /// `Γ^{-1} M` applied to each column.
    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            NoiseCov::Diagonal(v) => {
                DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / v[i])
            }
            NoiseCov::Dense(f) => f.solve_matrix(m),
        }
    }

    /// Misfit `½‖Γ^{-1/2} r‖²` of a residual `r = y − F(x)`.
    pub fn misfit(&self, r: &DVector<f64>) -> f64 {
        0.5 * self.whiten(r).norm_squared()
    }

    /// Dense matrix form of `Γ`.
    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            NoiseCov::Diagonal(v) => DMatrix::from_diagonal(v),
            NoiseCov::Dense(f) => f.matrix(),
        }
    }

    /// One draw `ξ ~ N(0, Γ)`.
    pub fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        let n = self.dim();
        let e = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        match self {
            NoiseCov::Diagonal(v) => e.zip_map(v, |a, s| a * s.sqrt()),
            NoiseCov::Dense(f) => f.l() * e,
        }
    }
}

/// Prior distribution over unconstrained parameters.
pub trait Prior: Send + Sync {
    fn dim(&self) -> usize;

    /// One draw in unconstrained coordinates.
    fn sample(&self, rng: &mut dyn RngCore) -> DVector<f64>;

    /// Log density in unconstrained coordinates, including the Jacobian of
    /// any transform and all normalizing constants.
    fn log_density(&self, x: &DVector<f64>) -> f64;

    /// Mean and covariance when the prior is exactly Gaussian.
    fn gaussian_moments(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        None
    }
}

/// Deterministic forward map `F: R^d → R^{n_y}`.
///
/// Implementations are called concurrently from several threads.
pub trait ForwardModel: Send + Sync {
    fn dim(&self) -> usize;

    fn obs_dim(&self) -> usize;

    fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

/// A Bayesian inverse problem `y = F(x) + η`, `η ~ N(0, Γ)`.
#[derive(Clone)]
pub struct ModelSpec {
    pub prior: Arc<dyn Prior>,
    pub forward: Arc<dyn ForwardModel>,
    pub data: DVector<f64>,
    pub noise: NoiseCov,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dim", &self.dim())
            .field("obs_dim", &self.obs_dim())
            .finish()
    }
}

impl ModelSpec {
    pub fn new(
        prior: Arc<dyn Prior>,
        forward: Arc<dyn ForwardModel>,
        data: DVector<f64>,
        noise: NoiseCov,
    ) -> Result<Self> {
        if prior.dim() != forward.dim() {
            return Err(CoreError::Dimension(format!(
                "prior dimension {} differs from forward model dimension {}",
                prior.dim(),
                forward.dim()
            )));
        }
        if data.len() != forward.obs_dim() || noise.dim() != data.len() {
            return Err(CoreError::Dimension(format!(
                "data length {}, forward output {}, noise dimension {}",
                data.len(),
                forward.obs_dim(),
                noise.dim()
            )));
        }
        Ok(Self {
            prior,
            forward,
            data,
            noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.forward.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.forward.obs_dim()
    }

    /// Misfit `Φ(x) = ½‖Γ^{-1/2}(y − F(x))‖²` from a forward output.
    pub fn misfit(&self, output: &DVector<f64>) -> f64 {
        self.noise.misfit(&(&self.data - output))
    }

    /// Forward output and misfit at one point, counting one evaluation.
    pub fn evaluate(&self, x: &DVector<f64>, counter: &EvalCounter) -> Result<(DVector<f64>, f64)> {
        counter.add(1);
        let out = self.forward.forward(x)?;
        if out.len() != self.obs_dim() {
            return Err(CoreError::Dimension(format!(
                "forward model returned {} outputs, expected {}",
                out.len(),
                self.obs_dim()
            )));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFiniteOutput { index: 0 });
        }
        let m = self.misfit(&out);
        Ok((out, m))
    }

    /// Draws `J` prior particles, particle `i` from generator `rng_for(i)`.
    pub fn sample_prior<R, F>(&self, j: usize, rng_for: F) -> DMatrix<f64>
    where
        R: RngCore,
        F: Fn(usize) -> R + Sync,
    {
        let rows: Vec<DVector<f64>> = (0..j)
            .into_par_iter()
            .map(|i| self.prior.sample(&mut rng_for(i)))
            .collect();
        DMatrix::from_fn(j, self.dim(), |i, k| rows[i][k])
    }
}

/// Thread-safe count of forward-model evaluations.
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicU64);

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Forward outputs and misfits for every particle of an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardBatch {
    /// `J × n_y` matrix with row `i` equal to `F(x_i)`.
    pub outputs: DMatrix<f64>,
    /// `Φ_i = ½‖Γ^{-1/2}(y − F(x_i))‖²`.
    pub misfits: DVector<f64>,
}

impl ForwardBatch {
    /// Recomputes misfits from stored outputs.
    pub fn from_outputs(model: &ModelSpec, outputs: DMatrix<f64>) -> Self {
        let misfits = DVector::from_fn(outputs.nrows(), |i, _| {
            model.misfit(&outputs.row(i).transpose())
        });
        Self { outputs, misfits }
    }

    pub fn len(&self) -> usize {
        self.misfits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.misfits.is_empty()
    }
}

/// Evaluates the forward model on every particle in parallel.
///
/// Adds `J` to `counter`. Errors name the first failing particle.
pub fn evaluate_ensemble(
    model: &ModelSpec,
    states: &DMatrix<f64>,
    counter: &EvalCounter,
) -> Result<ForwardBatch> {
    if states.ncols() != model.dim() {
        return Err(CoreError::Dimension(format!(
            "ensemble has dimension {}, model expects {}",
            states.ncols(),
            model.dim()
        )));
    }
    let j = states.nrows();
    counter.add(j as u64);
    let rows: Vec<Result<DVector<f64>>> = (0..j)
        .into_par_iter()
        .map(|i| model.forward.forward(&states.row(i).transpose()))
        .collect();
    let n_y = model.obs_dim();
    let mut outputs = DMatrix::zeros(j, n_y);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row.map_err(|e| CoreError::ParticleFailure {
            index: i,
            source: Box::new(e),
        })?;
        if row.len() != n_y {
            return Err(CoreError::Dimension(format!(
                "forward model returned {} outputs for particle {i}, expected {n_y}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFiniteOutput { index: i });
        }
        outputs.set_row(i, &row.transpose());
    }
    Ok(ForwardBatch::from_outputs(model, outputs))
}

/// Tempered log target `log π₀(x) − β Φ(x)`.
///
/// The Gaussian normalizing constant of the likelihood is dropped. At
/// `β = 0` the misfit is not read, so it may be a placeholder.
pub fn annealed_log_target(model: &ModelSpec, x: &DVector<f64>, misfit: f64, beta: f64) -> f64 {
    let lp = model.prior.log_density(x);
    if beta == 0.0 {
        lp
    } else {
        lp - beta * misfit
    }
}

/// Ensemble mean and unbiased covariance (divisor `J − 1`).
pub fn ensemble_moments(states: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let j = states.nrows();
    let mean = states.row_mean().transpose();
    let centered = DMatrix::from_fn(j, states.ncols(), |i, k| states[(i, k)] - mean[k]);
    let cov = centered.transpose() * &centered / ((j.max(2) - 1) as f64);
    (mean, crate::linalg::symmetrize(&cov))
}

/// Writes an ensemble as CSV with header `x0,...,x{d-1}` and 17 significant
/// digits per value.
pub fn write_ensemble_csv(path: &Path, states: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = (0..states.ncols()).map(|k| format!("x{k}")).collect();
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for i in 0..states.nrows() {
        let rec: Vec<String> = states.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        w.write_record(&rec).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Reads a CSV matrix with a header row; errors carry 1-based line numbers.
pub fn read_ensemble_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    parse_numeric_csv(&text, &path.display().to_string())
}

pub(crate) fn parse_numeric_csv(text: &str, name: &str) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let parse_err = |line: usize, message: String| CoreError::Parse {
        path: name.to_string(),
        line,
        message,
    };
    let width = r.headers().map_err(|e| parse_err(1, e.to_string()))?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(rows + 2, |p| p.line() as usize);
        if rec.len() != width {
            return Err(parse_err(
                line,
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("not a number: {field:?}")))?;
            values.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, width, &values))
}

fn csv_io(path: &Path, e: csv::Error) -> CoreError {
    CoreError::io(path, std::io::Error::other(e.to_string()))
}
