//! `skt` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use skt_cli::commands::{bias_verdict, cmd_bias, cmd_run, cmd_simulate, parse_seeds};
use skt_cli::{with_threads, ConfigFile};

#[derive(Parser)]
#[command(
    name = "skt",
    version,
    about = "Gradient-free ensemble samplers for Bayesian inverse problems"
)]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic data for a PDE model.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Noise seed (overrides `model.noise_seed`).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Run the configured scheme for one or more seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Single seed (overrides `scheme.seed`).
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Seed range `A..B` (exclusive) or `A..=B`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        outdir: PathBuf,
        /// Write the ensemble after every temperature level.
        #[arg(long)]
        snapshot_levels: bool,
    },
    /// Squared biases of an ensemble against reference moments.
    Bias {
        /// Ensemble CSV with a header row.
        #[arg(long)]
        ensemble: PathBuf,
        /// Reference moments CSV (`dim,mean_x,var_x,mean_x2,var_x2`).
        #[arg(long)]
        reference: PathBuf,
        /// Output report path.
        #[arg(long, default_value = "bias_report.json")]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> skt_cli::Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Simulate {
            config,
            seed,
            outdir,
        } => {
            let cfg = ConfigFile::load(&config)?;
            let sim = with_threads(threads, || cmd_simulate(&cfg, seed, &outdir))??;
            println!("wrote {} observations to {}", sim.y.len(), outdir.display());
        }
        Command::Run {
            config,
            seed,
            seeds,
            outdir,
            snapshot_levels,
        } => {
            let mut cfg = ConfigFile::load(&config)?;
            cfg.output.snapshot_levels |= snapshot_levels;
            let seeds = match (seed, seeds) {
                (Some(s), _) => vec![s],
                (None, Some(r)) => parse_seeds(&r)?,
                (None, None) => vec![cfg.scheme.seed],
            };
            let outcomes = with_threads(threads, || cmd_run(&cfg, &seeds, &outdir))??;
            println!(
                "{} seeds finished; summary in {}",
                outcomes.len(),
                outdir.join("summary.csv").display()
            );
        }
        Command::Bias {
            ensemble,
            reference,
            out,
        } => {
            let report = cmd_bias(&ensemble, &reference, &out)?;
            println!("{}", bias_verdict(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
