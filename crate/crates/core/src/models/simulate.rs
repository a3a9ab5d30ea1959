//! Synthetic data generation for the benchmark problems: a ground-truth
//! field, its noiseless signal and a noisy observation vector.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::gravity::{quadrature_matrix, reference_density, GravityConfig};
use super::heat::{HeatConfig, HeatModel};
use super::kl::build_se_separable;
use super::reaction_diffusion::{observe, solve_reaction_diffusion, ReactionDiffusionConfig};
use crate::error::{CoreError, Result};
use crate::rng::{Purpose, Streams};

/// Ground truth of the heat benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatTruth {
    pub ell: f64,
    pub order: usize,
    pub mean: f64,
    pub sigma: f64,
    pub diffusion: f64,
    pub noise_sd: f64,
}

impl Default for HeatTruth {
    fn default() -> Self {
        Self {
            ell: 0.1,
            order: 200,
            mean: 0.0,
            sigma: 1.0,
            diffusion: 0.5,
            noise_sd: 0.2,
        }
    }
}

/// Ground truth of the gravity benchmark (the density is fixed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GravityTruth {
    pub noise_sd: f64,
}

impl Default for GravityTruth {
    fn default() -> Self {
        Self { noise_sd: 0.1 }
    }
}

/// Ground truth of the reaction-diffusion benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReactionDiffusionTruth {
    pub mean: f64,
    pub alpha: f64,
    pub ell: f64,
    pub order: usize,
    pub noise_sd: f64,
}

impl Default for ReactionDiffusionTruth {
    fn default() -> Self {
        Self {
            mean: 0.0,
            alpha: 1.0,
            ell: 0.1,
            order: 50,
            noise_sd: 0.01,
        }
    }
}

/// Output of a data simulation.
#[derive(Clone, Debug, Serialize)]
pub struct Simulation {
    pub model: String,
    pub y: Vec<f64>,
    pub signal: Vec<f64>,
    pub noise_sd: f64,
    /// Standard-normal truth coefficients, when the truth is a random draw.
    pub theta: Vec<f64>,
    /// Truth field on the model grid.
    pub field: Vec<f64>,
    pub truth_seed: u64,
    pub noise_seed: u64,
    /// Model and truth settings used.
    pub settings: serde_json::Value,
}

fn standard_normals(seed: u64, purpose: Purpose, n: usize) -> Vec<f64> {
    let mut rng = Streams::new(seed).stream(purpose, 0, 0, 0);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn add_noise(signal: &DVector<f64>, sd: f64, seed: u64) -> Vec<f64> {
    let eta = standard_normals(seed, Purpose::DataNoise, signal.len());
    signal.iter().zip(eta).map(|(s, e)| s + sd * e).collect()
}

fn settings<A: Serialize, B: Serialize>(model: &A, truth: &B) -> serde_json::Value {
    serde_json::json!({ "model": model, "truth": truth })
}

/// Heat data: truth field from `truth.order` KL modes, FTCS to the final
/// time, block averages plus noise.
pub fn simulate_heat(
    cfg: &HeatConfig,
    truth: &HeatTruth,
    truth_seed: u64,
    noise_seed: u64,
) -> Result<Simulation> {
    cfg.validate()?;
    let basis = build_se_separable(cfg.grid, truth.ell, truth.order)?;
    let theta = standard_normals(truth_seed, Purpose::ProblemSetup, truth.order);
    let field = basis.field(truth.mean, truth.sigma, &theta);
    let model = HeatModel::with_basis(cfg.clone(), basis);
    let signal = model.observe_from_field(field.as_slice(), truth.diffusion)?;
    Ok(Simulation {
        model: "heat".into(),
        y: add_noise(&signal, truth.noise_sd, noise_seed),
        signal: signal.as_slice().to_vec(),
        noise_sd: truth.noise_sd,
        theta,
        field: field.as_slice().to_vec(),
        truth_seed,
        noise_seed,
        settings: settings(cfg, truth),
    })
}

/// Gravity data from the fixed sinusoidal density.
pub fn simulate_gravity(
    cfg: &GravityConfig,
    truth: &GravityTruth,
    noise_seed: u64,
) -> Result<Simulation> {
    cfg.validate()?;
    let density = reference_density(cfg.quadrature);
    let signal = quadrature_matrix(cfg.quadrature, cfg.surface, cfg.depth) * &density;
    Ok(Simulation {
        model: "gravity".into(),
        y: add_noise(&signal, truth.noise_sd, noise_seed),
        signal: signal.as_slice().to_vec(),
        noise_sd: truth.noise_sd,
        theta: Vec::new(),
        field: density.as_slice().to_vec(),
        truth_seed: 0,
        noise_seed,
        settings: settings(cfg, truth),
    })
}

/// Reaction-diffusion data from a Hilbert-expansion source draw.
pub fn simulate_reaction_diffusion(
    cfg: &ReactionDiffusionConfig,
    truth: &ReactionDiffusionTruth,
    truth_seed: u64,
    noise_seed: u64,
) -> Result<Simulation> {
    cfg.validate()?;
    let hilbert = super::kl::HilbertBasis {
        half_width: cfg.hilbert_half_width,
        order: truth.order,
    };
    let xs: Vec<f64> = cfg.grid().iter().map(|x| x - 0.5).collect();
    let theta = standard_normals(truth_seed, Purpose::ProblemSetup, truth.order);
    let coeffs = hilbert
        .weights(truth.alpha, truth.ell)
        .component_mul(&DVector::from_column_slice(&theta));
    let field = DVector::from_element(xs.len(), truth.mean) + hilbert.design(&xs) * coeffs;
    let sol = solve_reaction_diffusion(cfg, field.as_slice())?;
    let signal = observe(cfg, &sol);
    Ok(Simulation {
        model: "reaction_diffusion".into(),
        y: add_noise(&signal, truth.noise_sd, noise_seed),
        signal: signal.as_slice().to_vec(),
        noise_sd: truth.noise_sd,
        theta,
        field: field.as_slice().to_vec(),
        truth_seed,
        noise_seed,
        settings: settings(cfg, truth),
    })
}

impl Simulation {
    /// Writes `y.csv` (one value per line) and `truth.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        write_vector(&dir.join("y.csv"), &self.y)?;
        let path = dir.join("truth.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Numerical(format!("cannot serialize truth record: {e}")))?;
        std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
    }
}

/// Writes one value per line in round-trip precision.
pub fn write_vector(path: &Path, v: &[f64]) -> Result<()> {
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?);
    for x in v {
        writeln!(f, "{x:.17e}").map_err(|e| CoreError::io(path, e))?;
    }
    f.flush().map_err(|e| CoreError::io(path, e))
}

/// Reads a vector written one value per line; blank lines are skipped.
pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse::<f64>().map_err(|e| CoreError::Parse {
            path: path.display().to_string(),
            line: k + 1,
            message: format!("{e}: {t:?}"),
        })?);
    }
    Ok(DVector::from_vec(out))
}
