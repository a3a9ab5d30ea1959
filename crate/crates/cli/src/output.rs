//! Run artifacts: per-seed metrics, file manifests and the seed-sweep
//! summary table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use skt_core::diagnostics::BiasReport;
use skt_core::RunResult;

use crate::config::ConfigFile;
use crate::error::{CliError, Result};

/// Contents of `metrics.json`. The first block of keys is a stable schema;
/// later keys add per-level detail and squared biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub scheme: String,
    /// Metropolis kernel, `null` for Kalman-only schemes.
    pub kernel: Option<String>,
    pub precond: String,
    #[serde(rename = "J")]
    pub j: usize,
    pub tau: f64,
    pub tau_corr: f64,
    pub n_levels: usize,
    pub betas: Vec<f64>,
    pub n_model_evals: u64,
    pub n_model_evals_per_particle: f64,
    pub acceptance: Vec<Vec<f64>>,
    pub sweeps_per_level: Vec<usize>,
    /// `null` unless wall-time recording is enabled.
    pub wall_time_s: Option<f64>,
    pub seed: u64,
    pub ess: Vec<f64>,
    pub rho: Vec<Option<f64>>,
    pub nu: Vec<Option<f64>>,
    pub hit_sweep_cap: Vec<bool>,
    pub reverted: Vec<usize>,
    pub b1_sq: Option<f64>,
    pub b2_sq: Option<f64>,
}

impl Metrics {
    pub fn new(cfg: &ConfigFile, result: &RunResult, bias: Option<&BiasReport>) -> Self {
        let scheme = cfg.scheme.name;
        Self {
            scheme: scheme.name().into(),
            kernel: scheme
                .uses_kernel()
                .then(|| cfg.kernel.kind.name().to_string()),
            precond: scheme.precond().name().into(),
            j: result.final_ensemble.nrows(),
            tau: cfg.annealing.tau,
            tau_corr: cfg.annealing.tau_corr,
            n_levels: result.n_levels,
            betas: result.betas.clone(),
            n_model_evals: result.n_model_evals,
            n_model_evals_per_particle: result.n_model_evals_per_particle(),
            acceptance: result.acceptance(),
            sweeps_per_level: result.sweeps_per_level(),
            wall_time_s: cfg.output.record_wall_time.then_some(result.wall_time_s),
            seed: cfg.scheme.seed,
            ess: result.levels.iter().map(|l| l.ess).collect(),
            rho: result.levels.iter().map(|l| l.rho).collect(),
            nu: result.levels.iter().map(|l| l.nu).collect(),
            hit_sweep_cap: result.levels.iter().map(|l| l.hit_sweep_cap).collect(),
            reverted: result.levels.iter().map(|l| l.reverted).collect(),
            b1_sq: bias.map(|b| b.b1_sq),
            b2_sq: bias.map(|b| b.b2_sq),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("cannot serialize {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes `manifest.json` mapping every other file under `dir` (relative,
/// `/`-separated) to its SHA-256.
pub fn write_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    let mut map = BTreeMap::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        let key = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        if key == "manifest.json" {
            continue;
        }
        map.insert(key, file_sha256(&f)?);
    }
    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({ "files": map }),
    )?;
    Ok(map)
}

/// Outcome of one seed of a sweep.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: std::result::Result<Metrics, String>,
}

/// Columns of `summary.csv` after `seed` and `status`.
pub const SUMMARY_COLUMNS: [&str; 5] = [
    "n_levels",
    "n_model_evals_per_particle",
    "b1_sq",
    "b2_sq",
    "wall_time_s",
];

fn summary_values(m: &Metrics) -> [Option<f64>; 5] {
    [
        Some(m.n_levels as f64),
        Some(m.n_model_evals_per_particle),
        m.b1_sq,
        m.b2_sq,
        m.wall_time_s,
    ]
}

/// Sample mean and standard deviation (divisor `n − 1`; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Writes one row per seed and a final `aggregate` row whose cells read
/// `mean±std` over the successful seeds.
pub fn write_summary(path: &Path, outcomes: &[SeedOutcome]) -> Result<()> {
    let io = |e: csv::Error| CliError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["seed", "status"];
    header.extend(SUMMARY_COLUMNS);
    w.write_record(&header).map_err(io)?;
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); SUMMARY_COLUMNS.len()];
    for o in outcomes {
        let mut row = vec![o.seed.to_string()];
        match &o.result {
            Ok(m) => {
                row.push("ok".into());
                for (k, v) in summary_values(m).into_iter().enumerate() {
                    if let Some(x) = v {
                        columns[k].push(x);
                    }
                    row.push(cell(v));
                }
            }
            Err(msg) => {
                row.push(format!("failed: {msg}"));
                row.extend(std::iter::repeat_n(String::new(), SUMMARY_COLUMNS.len()));
            }
        }
        w.write_record(&row).map_err(io)?;
    }
    let ok = outcomes.iter().filter(|o| o.result.is_ok()).count();
    let mut agg = vec![
        "aggregate".to_string(),
        format!("ok {ok}/{}", outcomes.len()),
    ];
    for col in &columns {
        agg.push(if col.is_empty() {
            String::new()
        } else {
            let (m, s) = mean_std(col);
            format!("{m}±{s}")
        });
    }
    w.write_record(&agg).map_err(io)?;
    w.flush().map_err(|e| CliError::io(path, e))
}
