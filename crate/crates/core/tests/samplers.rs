//! End-to-end sampler runs: schedules, evaluation audits, determinism and
//! accuracy on problems with known posteriors.

mod common;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use common::{nonlinear_reference, prior_draws};
use skt_core::annealing::{
    importance_log_weights, normalize_log_weights, solve_next_beta, systematic_resample,
};
use skt_core::diagnostics::{squared_bias, ReferenceMoments};
use skt_core::ensemble::{evaluate_ensemble, EvalCounter, ForwardModel, ModelSpec, NoiseCov};
use skt_core::kernels::KernelKind;
use skt_core::models::heat::{HeatConfig, HeatModel};
use skt_core::models::prior::GaussianPrior;
use skt_core::models::simulate::{simulate_heat, HeatTruth};
use skt_core::models::toy::{nonlinear_toy, LinearGaussianToy, NonlinearToyConfig};
use skt_core::rng::{Purpose, Streams};
use skt_core::{run, CoreError, RunConfig, RunResult, Scheme, SweepMode};

const ALL_SCHEMES: [Scheme; 7] = [
    Scheme::Skt,
    Scheme::NfSkt,
    Scheme::Smc,
    Scheme::NfSmc,
    Scheme::Eki,
    Scheme::Faki,
    Scheme::Eks,
];

fn toy() -> ModelSpec {
    nonlinear_toy(&NonlinearToyConfig::default()).unwrap()
}

fn linear_toy() -> LinearGaussianToy {
    LinearGaussianToy::random(5, 5, 0.5, 20240)
}

fn linear_reference(toy: &LinearGaussianToy) -> ReferenceMoments {
    let (m, c) = toy.posterior().unwrap();
    ReferenceMoments::from_gaussian(&m, &c).unwrap()
}

fn quick(scheme: Scheme, j: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(scheme, j, seed);
    cfg.eks_iterations = 20;
    cfg
}

/// Mean `(⟨b₁²⟩, ⟨b₂²⟩)` over seeds `0..seeds`.
fn mean_bias(
    model: &ModelSpec,
    reference: &ReferenceMoments,
    seeds: u64,
    cfg: impl Fn(u64) -> RunConfig,
) -> (f64, f64) {
    let (mut b1, mut b2) = (0.0, 0.0);
    for seed in 0..seeds {
        let res = run(model, &cfg(seed)).unwrap();
        let b = squared_bias(&res.final_ensemble, reference).unwrap();
        b1 += b.b1_sq / seeds as f64;
        b2 += b.b2_sq / seeds as f64;
    }
    (b1, b2)
}

#[test]
fn realized_ess_matches_target_at_every_level() {
    let model = toy();
    for scheme in [Scheme::Skt, Scheme::Smc, Scheme::Eki] {
        let res = run(&model, &quick(scheme, 100, 1)).unwrap();
        for (n, level) in res.levels.iter().enumerate() {
            if level.beta < 1.0 {
                assert!(
                    (level.ess - 50.0).abs() <= 1e-6 * 100.0,
                    "{} level {n}: ESS {}",
                    scheme.name(),
                    level.ess
                );
            } else {
                assert!(level.ess >= 50.0 - 1e-6 * 100.0);
            }
        }
    }
}

#[test]
fn evaluation_counts_match_audit_formula() {
    let model = toy();
    let j = 40u64;
    for scheme in ALL_SCHEMES {
        let res = run(&model, &quick(scheme, j as usize, 2)).unwrap();
        let sweeps: u64 = res.sweeps_per_level().iter().map(|&s| s as u64).sum();
        let n = res.n_levels as u64;
        let expected = match scheme {
            Scheme::Skt | Scheme::NfSkt => j + j * n + j * sweeps,
            Scheme::Smc | Scheme::NfSmc => j + j * sweeps,
            Scheme::Eki | Scheme::Faki => j + j * n,
            Scheme::Eks => j + j * 20,
        };
        assert_eq!(res.n_model_evals, expected, "{}", scheme.name());
        assert!((res.n_model_evals_per_particle() - expected as f64 / j as f64).abs() < 1e-12);
    }
}

fn same_result(a: &RunResult, b: &RunResult) -> bool {
    a.final_ensemble == b.final_ensemble
        && a.betas == b.betas
        && a.n_model_evals == b.n_model_evals
        && a.levels.iter().zip(&b.levels).all(|(x, y)| {
            x.ess == y.ess && x.acceptance == y.acceptance && x.rho == y.rho && x.nu == y.nu
        })
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let model = toy();
    let in_pool = |threads: usize, cfg: &RunConfig| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run(&model, cfg).unwrap())
    };
    for scheme in ALL_SCHEMES {
        let cfg = quick(scheme, 60, 3);
        let a = in_pool(1, &cfg);
        let b = in_pool(4, &cfg);
        assert!(
            same_result(&a, &b),
            "{} differs across thread counts",
            scheme.name()
        );
    }
}

#[test]
fn schedules_increase_strictly_to_one() {
    let model = toy();
    for scheme in [
        Scheme::Skt,
        Scheme::NfSkt,
        Scheme::Smc,
        Scheme::NfSmc,
        Scheme::Eki,
        Scheme::Faki,
    ] {
        let res = run(&model, &quick(scheme, 50, 4)).unwrap();
        assert_eq!(res.betas[0], 0.0);
        assert_eq!(*res.betas.last().unwrap(), 1.0);
        assert_eq!(res.betas.len(), res.n_levels + 1);
        assert!(
            res.betas.windows(2).all(|w| w[1] > w[0]),
            "{}",
            scheme.name()
        );
    }
}

#[test]
fn skt_bias_on_linear_toy_is_at_the_monte_carlo_floor() {
    let toy = linear_toy();
    let model = toy.spec().unwrap();
    let reference = linear_reference(&toy);
    // J = 10d: an exact sampler with J independent particles has expected
    // ⟨b²⟩ = 1/J, so the mean over seeds sits near 0.02, not below 0.01.
    let j = 50;
    let (b1, b2) = mean_bias(&model, &reference, 10, |s| {
        RunConfig::new(Scheme::Skt, j, s)
    });
    let floor = 1.0 / j as f64;
    for b in [b1, b2] {
        assert!(
            b > floor / 3.0 && b < 3.0 * floor,
            "mean bias {b}, 1/J = {floor}"
        );
    }
    // With J = 100d the same algorithm is well inside the low-bias regime.
    let (b1, b2) = mean_bias(&model, &reference, 4, |s| {
        RunConfig::new(Scheme::Skt, 500, s)
    });
    assert!(b1 < 0.01 && b2 < 0.01, "J = 500: b1 {b1}, b2 {b2}");
}

#[test]
fn smc_with_full_sweep_budget_reaches_low_bias() {
    let toy = linear_toy();
    let model = toy.spec().unwrap();
    let reference = linear_reference(&toy);
    let (b1, _) = mean_bias(&model, &reference, 10, |s| {
        let mut cfg = RunConfig::new(Scheme::Smc, 50, s);
        cfg.sweeps = SweepMode::Fixed { m: 51 };
        cfg
    });
    assert!(b1 < 0.02, "mean b1 {b1}");
}

#[test]
fn near_uniform_weights_keep_most_ancestors() {
    let model = toy();
    let j = 1000;
    let x = prior_draws(&model, j, 5);
    let batch = evaluate_ensemble(&model, &x, &EvalCounter::new()).unwrap();
    let beta = solve_next_beta(&batch.misfits, 0.0, 0.99).unwrap();
    let w = normalize_log_weights(&importance_log_weights(&batch.misfits, 0.0, beta));
    let mut rng = Streams::new(5).stream(Purpose::Resample, 1, 0, 0);
    let mut idx = systematic_resample(&w, &mut rng).unwrap();
    idx.sort_unstable();
    idx.dedup();
    assert!(idx.len() >= 900, "{} unique ancestors", idx.len());
}

#[test]
fn smc_and_skt_use_comparable_schedules() {
    let model = toy();
    for seed in 0..3 {
        let levels = |scheme: Scheme| {
            let mut cfg = RunConfig::new(scheme, 100, seed);
            cfg.sweeps = SweepMode::fixed_budget(scheme, 10);
            run(&model, &cfg).unwrap().n_levels as i64
        };
        let (a, b) = (levels(Scheme::Skt), levels(Scheme::Smc));
        assert!((a - b).abs() <= 2, "seed {seed}: SKT {a} levels, SMC {b}");
    }
}

#[test]
fn eki_alone_is_exact_on_linear_toy() {
    let toy = linear_toy();
    let model = toy.spec().unwrap();
    let reference = linear_reference(&toy);
    let j = 5000;
    let res = run(&model, &RunConfig::new(Scheme::Eki, j, 6)).unwrap();
    let b = squared_bias(&res.final_ensemble, &reference).unwrap();
    // Each per-dimension term is a squared z-score times 1/J; 3 standard
    // errors bound it by 9/J.
    for p in &b.per_dim {
        assert!(
            p.b1_sq < 9.0 / j as f64 && p.b2_sq < 9.0 / j as f64,
            "{p:?}"
        );
    }
}

#[test]
fn eki_alone_is_biased_on_nonlinear_toy() {
    let model = toy();
    let reference = nonlinear_reference();
    for seed in 0..3 {
        let bias = |scheme| {
            let res = run(&model, &RunConfig::new(scheme, 100, seed)).unwrap();
            squared_bias(&res.final_ensemble, &reference).unwrap().b1_sq
        };
        let (eki, skt) = (bias(Scheme::Eki), bias(Scheme::Skt));
        assert!(eki > skt, "seed {seed}: EKI {eki}, SKT {skt}");
    }
}

#[test]
fn eks_on_heat_model_aborts_or_stays_finite() {
    let cfg = HeatConfig {
        grid: 16,
        obs_grid: 4,
        steps: 200,
        order: 10,
        ..HeatConfig::default()
    };
    let sim = simulate_heat(&cfg, &HeatTruth::default(), 1, 2).unwrap();
    let heat = HeatModel::new(cfg.clone()).unwrap();
    let d = heat.dim();
    let model = ModelSpec::new(
        Arc::new(cfg.prior().unwrap()),
        Arc::new(heat),
        DVector::from_vec(sim.y.clone()),
        NoiseCov::isotropic(sim.y.len(), sim.noise_sd).unwrap(),
    )
    .unwrap();
    let mut run_cfg = RunConfig::new(Scheme::Eks, 10 * d, 7);
    run_cfg.eks_iterations = 30;
    match run(&model, &run_cfg) {
        Ok(res) => assert!(res.final_ensemble.iter().all(|v| v.is_finite())),
        Err(CoreError::Numerical(msg)) => assert!(msg.contains("EKS"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn fixed_mode_runs_exact_sweep_counts() {
    let model = toy();
    for (scheme, expected) in [(Scheme::Skt, 7), (Scheme::Smc, 8), (Scheme::NfSkt, 7)] {
        let mut cfg = RunConfig::new(scheme, 50, 8);
        cfg.sweeps = SweepMode::fixed_budget(scheme, 7);
        let res = run(&model, &cfg).unwrap();
        assert!(
            res.sweeps_per_level().iter().all(|&s| s == expected),
            "{}",
            scheme.name()
        );
        assert!(res.levels.iter().all(|l| !l.hit_sweep_cap));
    }
}

#[test]
fn snapshots_follow_levels() {
    let model = toy();
    let mut cfg = RunConfig::new(Scheme::Skt, 40, 9);
    cfg.snapshot_levels = true;
    let res = run(&model, &cfg).unwrap();
    assert_eq!(res.snapshots.len(), res.n_levels);
    assert_eq!(res.snapshots.last().unwrap(), &res.final_ensemble);
}

#[test]
fn kernel_choice_is_recorded() {
    let model = toy();
    let mut cfg = RunConfig::new(Scheme::Skt, 50, 10);
    cfg.kernel = KernelKind::Pcn;
    let res = run(&model, &cfg).unwrap();
    assert!(res.levels.iter().all(|l| l.nu.is_none() && l.rho.is_some()));
    cfg.kernel = KernelKind::Tpcn;
    let res = run(&model, &cfg).unwrap();
    assert!(res.levels.iter().all(|l| l.nu.is_some()));
}

/// Identity map on `R²` that fails when the first coordinate exceeds a
/// threshold.
struct Walled;

impl ForwardModel for Walled {
    fn dim(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn forward(&self, x: &DVector<f64>) -> skt_core::Result<DVector<f64>> {
        if x[0] > 2.0 {
            Err(CoreError::Numerical("outside the solver's domain".into()))
        } else {
            Ok(x.clone())
        }
    }
}

#[test]
fn failed_updates_keep_previous_particles() {
    let prior = GaussianPrior::new(DVector::zeros(2), &(DMatrix::identity(2, 2) * 0.25)).unwrap();
    let model = ModelSpec::new(
        Arc::new(prior),
        Arc::new(Walled),
        DVector::from_vec(vec![3.0, 0.0]),
        NoiseCov::isotropic(2, 0.5).unwrap(),
    )
    .unwrap();
    let res = run(&model, &RunConfig::new(Scheme::Skt, 200, 11)).unwrap();
    let reverted: usize = res.levels.iter().map(|l| l.reverted).sum();
    assert!(reverted > 0);
    assert!(res.final_ensemble.column(0).iter().all(|v| *v <= 2.0));
}
