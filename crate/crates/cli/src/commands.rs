//! The `simulate`, `run` and `bias` subcommands as library functions.

use std::path::{Path, PathBuf};

use skt_core::diagnostics::{
    reconstruct_field, squared_bias, write_field_csv, BiasReport, ReferenceMoments,
};
use skt_core::ensemble::{read_ensemble_csv, write_ensemble_csv};
use skt_core::models::gravity::GravityModel;
use skt_core::models::simulate::Simulation;

use crate::config::{ConfigFile, ModelKind};
use crate::error::{CliError, Result};
use crate::output::{write_manifest, write_summary, Metrics, SeedOutcome};
use crate::problem::{self, Problem};

/// Parses `N`, `A..B` (exclusive) or `A..=B` (inclusive) into seeds.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || CliError::Config(format!("invalid seed range {text:?}"));
    let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad());
    let seeds: Vec<u64> = if let Some((a, b)) = text.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = text.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        vec![num(text)?]
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Generates synthetic data for the configured PDE model. Writes `y.csv`,
/// `truth.json`, `config.toml` and a manifest, and fills the basis cache
/// for gravity (under `basis/` unless a cache directory is configured).
pub fn cmd_simulate(
    cfg: &ConfigFile,
    noise_seed: Option<u64>,
    outdir: &Path,
) -> Result<Simulation> {
    let mut cfg = cfg.clone();
    if let Some(s) = noise_seed {
        cfg.model.noise_seed = s;
    }
    create_dir(outdir)?;
    let sim = problem::simulate(&cfg.model)?;
    sim.write(outdir)?;
    if cfg.model.kind == ModelKind::Gravity {
        let cache = cfg
            .model
            .basis_cache_dir
            .clone()
            .unwrap_or_else(|| outdir.join("basis"));
        GravityModel::new(cfg.model.gravity.clone(), Some(&cache))?;
    }
    let path = outdir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| CliError::io(&path, e))?;
    write_manifest(outdir)?;
    Ok(sim)
}

/// Directory of one seed's outputs.
pub fn seed_dir(outdir: &Path, seed: u64) -> PathBuf {
    outdir.join(format!("seed_{seed}"))
}

fn run_seed(cfg: &ConfigFile, problem: &Problem, seed: u64, dir: &Path) -> Result<SeedOutcome> {
    let dim = problem.spec.dim();
    let resolved = cfg.resolved(dim, seed);
    let rc = resolved.run_config(dim)?;
    create_dir(dir)?;
    let path = dir.join("resolved_config.toml");
    std::fs::write(&path, resolved.to_toml()?).map_err(|e| CliError::io(&path, e))?;

    let result = match skt_core::run(&problem.spec, &rc) {
        Ok(r) => r,
        Err(e) => {
            log::error!("seed {seed}: {e}");
            let path = dir.join("error.txt");
            std::fs::write(&path, format!("{e}\n")).map_err(|e| CliError::io(&path, e))?;
            write_manifest(dir)?;
            return Ok(SeedOutcome {
                seed,
                result: Err(e.to_string()),
            });
        }
    };

    write_ensemble_csv(&dir.join("final_ensemble.csv"), &result.final_ensemble)?;
    let bias = match &problem.reference {
        Some(r) => {
            let b = squared_bias(&result.final_ensemble, r)?;
            b.write_json(&dir.join("bias_report.json"))?;
            Some(b)
        }
        None => None,
    };
    if let (Some(field), true) = (&problem.field, cfg.output.write_field) {
        let mean = reconstruct_field(&result.final_ensemble, field.as_ref())?;
        write_field_csv(&dir.join("reconstruction.csv"), &mean, field.field_shape())?;
    }
    if !result.snapshots.is_empty() {
        let snap = dir.join("snapshots");
        create_dir(&snap)?;
        for (n, s) in result.snapshots.iter().enumerate() {
            write_ensemble_csv(&snap.join(format!("level_{:03}.csv", n + 1)), s)?;
        }
    }
    let metrics = Metrics::new(&resolved, &result, bias.as_ref());
    metrics.write(&dir.join("metrics.json"))?;
    write_manifest(dir)?;
    log::info!(
        "seed {seed}: {} levels, N_eval/J = {:.1}",
        metrics.n_levels,
        metrics.n_model_evals_per_particle
    );
    Ok(SeedOutcome {
        seed,
        result: Ok(metrics),
    })
}

/// Runs the configured scheme once per seed. Each seed writes into
/// `outdir/seed_<n>/`; `outdir/summary.csv` collects all seeds. When the
/// data were simulated, the data record goes to `outdir/data/`.
///
/// Seeds that fail numerically get a failure row; the call then returns
/// [`CliError::SeedsFailed`] after writing the summary.
pub fn cmd_run(cfg: &ConfigFile, seeds: &[u64], outdir: &Path) -> Result<Vec<SeedOutcome>> {
    let problem = problem::build(&cfg.model)?;
    // Surface configuration errors before any output is written.
    cfg.run_config(problem.spec.dim())?;
    create_dir(outdir)?;
    if let Some(sim) = &problem.simulation {
        sim.write(&outdir.join("data"))?;
    }
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        outcomes.push(run_seed(cfg, &problem, seed, &seed_dir(outdir, seed))?);
    }
    write_summary(&outdir.join("summary.csv"), &outcomes)?;
    let failed = outcomes.iter().filter(|o| o.result.is_err()).count();
    if failed > 0 {
        return Err(CliError::SeedsFailed {
            failed,
            total: outcomes.len(),
        });
    }
    Ok(outcomes)
}

/// Squared biases of an ensemble file against a reference-moments file.
/// Writes the report to `out` and returns it.
pub fn cmd_bias(ensemble: &Path, reference: &Path, out: &Path) -> Result<BiasReport> {
    let states = read_ensemble_csv(ensemble)?;
    let reference = ReferenceMoments::read_csv(reference)?;
    let report = squared_bias(&states, &reference)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report.write_json(out)?;
    Ok(report)
}

/// One-line verdict against the low-bias threshold.
pub fn bias_verdict(report: &BiasReport) -> String {
    format!(
        "{}: b1_sq = {:.6e}, b2_sq = {:.6e} (threshold {:e})",
        if report.low_bias() { "PASS" } else { "FAIL" },
        report.b1_sq,
        report.b2_sq,
        skt_core::diagnostics::LOW_BIAS_THRESHOLD
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("4").unwrap(), vec![4]);
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("2..=3").unwrap(), vec![2, 3]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("a..b").is_err());
    }
}
