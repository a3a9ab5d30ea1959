//! Strict TOML configuration: parsing, validation and resolution into a
//! core [`RunConfig`].
//!
//! Every section rejects unknown keys. Missing keys take documented defaults,
//! and the fully resolved document is echoed next to the outputs so that a
//! run can be repeated from the echo alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skt_core::annealing::{CorrStatistic, DEFAULT_TAU, DEFAULT_TAU_CORR};
use skt_core::kernels::{KernelKind, ALPHA_STAR};
use skt_core::models::gravity::GravityConfig;
use skt_core::models::heat::HeatConfig;
use skt_core::models::reaction_diffusion::ReactionDiffusionConfig;
use skt_core::models::simulate::{GravityTruth, HeatTruth, ReactionDiffusionTruth};
use skt_core::models::toy::NonlinearToyConfig;
use skt_core::precond::PrecondKind;
use skt_core::samplers::{DEFAULT_EKS_ITERATIONS, DEFAULT_MAX_LEVELS};
use skt_core::student_t::EmOptions;
use skt_core::{RunConfig, Scheme, SweepMode};

use crate::error::{CliError, Result};

/// Default fixed per-level sweep budget of SKT-type schemes.
pub const DEFAULT_FIXED_SWEEPS: usize = 10;

/// Which forward problem to solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Heat,
    Gravity,
    ReactionDiffusion,
    LinearToy,
    NonlinearToy,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Heat => "heat",
            ModelKind::Gravity => "gravity",
            ModelKind::ReactionDiffusion => "reaction_diffusion",
            ModelKind::LinearToy => "linear_toy",
            ModelKind::NonlinearToy => "nonlinear_toy",
        }
    }
}

/// Random linear-Gaussian problem with a closed-form posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearToyConfig {
    pub dim: usize,
    pub obs_dim: usize,
    pub noise_sd: f64,
    pub problem_seed: u64,
}

impl Default for LinearToyConfig {
    fn default() -> Self {
        Self {
            dim: 5,
            obs_dim: 5,
            noise_sd: 0.5,
            problem_seed: 20240,
        }
    }
}

/// `[model]`: the forward problem, its data and optional reference moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Observation vector, one value per line. When absent, PDE data are
    /// simulated from the truth settings and seeds below.
    pub data_path: Option<PathBuf>,
    /// Reference moments CSV used to report squared biases. The linear toy
    /// uses its closed-form posterior when this is absent.
    pub reference_path: Option<PathBuf>,
    pub truth_seed: u64,
    pub noise_seed: u64,
    /// Directory for cached KL bases (gravity).
    pub basis_cache_dir: Option<PathBuf>,
    pub heat: HeatConfig,
    pub heat_truth: HeatTruth,
    pub gravity: GravityConfig,
    pub gravity_truth: GravityTruth,
    pub reaction_diffusion: ReactionDiffusionConfig,
    pub reaction_diffusion_truth: ReactionDiffusionTruth,
    pub linear_toy: LinearToyConfig,
    pub nonlinear_toy: NonlinearToyConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::NonlinearToy,
            data_path: None,
            reference_path: None,
            truth_seed: 0,
            noise_seed: 1,
            basis_cache_dir: None,
            heat: HeatConfig::default(),
            heat_truth: HeatTruth::default(),
            gravity: GravityConfig::default(),
            gravity_truth: GravityTruth::default(),
            reaction_diffusion: ReactionDiffusionConfig::default(),
            reaction_diffusion_truth: ReactionDiffusionTruth::default(),
            linear_toy: LinearToyConfig::default(),
            nonlinear_toy: NonlinearToyConfig::default(),
        }
    }
}

/// `[scheme]`: algorithm, ensemble size and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeSection {
    pub name: Scheme,
    /// Ensemble size `J`; when absent, `particles_per_dim · d`.
    pub particles: Option<usize>,
    pub particles_per_dim: usize,
    pub seed: u64,
    /// Optional check: must agree with the preconditioner the scheme uses.
    pub precond: Option<PrecondKind>,
    pub eks_iterations: usize,
}

impl Default for SchemeSection {
    fn default() -> Self {
        Self {
            name: Scheme::Skt,
            particles: None,
            particles_per_dim: 10,
            seed: 0,
            precond: None,
            eks_iterations: DEFAULT_EKS_ITERATIONS,
        }
    }
}

/// Per-level sweep policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPolicy {
    Adaptive,
    Fixed,
}

/// `[kernel]`: Metropolis kernel and its adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub kind: KernelKind,
    pub alpha_star: f64,
    pub rho_init: f64,
    pub sweep_mode: SweepPolicy,
    /// Sweep cap (adaptive) or exact count (fixed). When absent: 50 / 51
    /// for SKT / SMC adaptive, 10 / 11 for SKT / SMC fixed, so both
    /// families spend the same evaluations per level.
    pub sweeps: Option<usize>,
    pub em: EmOptions,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            kind: KernelKind::Tpcn,
            alpha_star: ALPHA_STAR,
            rho_init: 1.0,
            sweep_mode: SweepPolicy::Adaptive,
            sweeps: None,
            em: EmOptions::default(),
        }
    }
}

/// `[annealing]`: tempering and the sweep stopping rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealingSection {
    pub tau: f64,
    pub tau_corr: f64,
    pub corr_statistic: CorrStatistic,
    pub max_levels: usize,
}

impl Default for AnnealingSection {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            tau_corr: DEFAULT_TAU_CORR,
            corr_statistic: CorrStatistic::default(),
            max_levels: DEFAULT_MAX_LEVELS,
        }
    }
}

/// `[output]`: optional artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Write the ensemble after every level under `snapshots/`.
    pub snapshot_levels: bool,
    /// Record wall time in `metrics.json`; off by default so repeated runs
    /// give byte-identical metrics.
    pub record_wall_time: bool,
    /// Write the posterior-mean field of PDE models as `reconstruction.csv`.
    pub write_field: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            snapshot_levels: false,
            record_wall_time: false,
            write_field: true,
        }
    }
}

/// The whole configuration document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub model: ModelSection,
    pub scheme: SchemeSection,
    pub kernel: KernelSection,
    pub annealing: AnnealingSection,
    pub output: OutputSection,
}

impl ConfigFile {
    /// Parses and checks a TOML document.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads and parses a TOML file. Relative data, reference and cache
    /// paths are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut cfg.model.data_path);
        fix(&mut cfg.model.reference_path);
        fix(&mut cfg.model.basis_cache_dir);
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if let Some(p) = self.scheme.precond {
            if p != self.scheme.name.precond() {
                return bad(format!(
                    "scheme {} uses the {} preconditioner, config asks for {}",
                    self.scheme.name.name(),
                    self.scheme.name.precond().name(),
                    p.name()
                ));
            }
        }
        if self.scheme.particles.is_none() && self.scheme.particles_per_dim == 0 {
            return bad("particles_per_dim must be positive".into());
        }
        if self.kernel.sweeps == Some(0) && self.scheme.name.uses_kernel() {
            return bad("sweeps must be positive".into());
        }
        Ok(())
    }

    /// Ensemble size for a problem of dimension `dim`.
    pub fn particles(&self, dim: usize) -> usize {
        self.scheme
            .particles
            .unwrap_or(self.scheme.particles_per_dim * dim)
    }

    /// Sweep policy with defaults filled in for the configured scheme.
    pub fn sweep_mode(&self) -> SweepMode {
        let scheme = self.scheme.name;
        match (self.kernel.sweep_mode, self.kernel.sweeps) {
            (SweepPolicy::Adaptive, Some(max)) => SweepMode::Adaptive { max },
            (SweepPolicy::Adaptive, None) => SweepMode::Adaptive {
                max: scheme.default_sweeps(),
            },
            (SweepPolicy::Fixed, Some(m)) => SweepMode::Fixed { m },
            (SweepPolicy::Fixed, None) => SweepMode::fixed_budget(scheme, DEFAULT_FIXED_SWEEPS),
        }
    }

    /// Core run settings for a problem of dimension `dim`.
    pub fn run_config(&self, dim: usize) -> Result<RunConfig> {
        let mut rc = RunConfig::new(self.scheme.name, self.particles(dim), self.scheme.seed);
        rc.tau = self.annealing.tau;
        rc.tau_corr = self.annealing.tau_corr;
        rc.corr_statistic = self.annealing.corr_statistic;
        rc.max_levels = self.annealing.max_levels;
        rc.sweeps = self.sweep_mode();
        rc.alpha_star = self.kernel.alpha_star;
        rc.rho_init = self.kernel.rho_init;
        rc.kernel = self.kernel.kind;
        rc.em = self.kernel.em;
        rc.eks_iterations = self.scheme.eks_iterations;
        rc.snapshot_levels = self.output.snapshot_levels;
        rc.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(rc)
    }

    /// Copy with every default made explicit for a problem of dimension
    /// `dim` and the given seed.
    pub fn resolved(&self, dim: usize, seed: u64) -> Self {
        let mut out = self.clone();
        out.scheme.seed = seed;
        out.scheme.particles = Some(self.particles(dim));
        out.scheme.precond = Some(self.scheme.name.precond());
        let (mode, sweeps) = match self.sweep_mode() {
            SweepMode::Adaptive { max } => (SweepPolicy::Adaptive, max),
            SweepMode::Fixed { m } => (SweepPolicy::Fixed, m),
        };
        out.kernel.sweep_mode = mode;
        out.kernel.sweeps = Some(sweeps);
        out
    }

    /// TOML text of this document.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}
