//! Reference posterior moments of the nonlinear toy problem from a long
//! random-walk Metropolis chain.
//!
//! A pilot chain estimates the posterior covariance, which shapes the
//! Gaussian proposal `N(x, (2.38²/d) Σ)` of the production chain. Moments of
//! `x` and `x²` are accumulated online over 10⁷ post-burn-in steps, and
//! batch means give their Monte Carlo standard errors.
//!
//! Usage: `cargo run --release -p skt-core --example rwmh_reference [OUT.csv]`

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use skt_core::diagnostics::ReferenceMoments;
use skt_core::ensemble::{EvalCounter, ModelSpec};
use skt_core::linalg::CholFactor;
use skt_core::models::toy::{nonlinear_toy, NonlinearToyConfig};
use skt_core::rng::{Purpose, StreamRng, Streams};

const SEED: u64 = 7;
const PILOT_STEPS: usize = 200_000;
const BURN_IN: usize = 100_000;
const STEPS: usize = 10_000_000;
const BATCHES: usize = 100;

fn log_post(model: &ModelSpec, x: &DVector<f64>, counter: &EvalCounter) -> f64 {
    let (_, misfit) = model
        .evaluate(x, counter)
        .expect("toy forward map is total");
    model.prior.log_density(x) - misfit
}

/// Runs `steps` RWMH steps from `x`, calling `visit` on every state.
fn chain(
    model: &ModelSpec,
    x: &mut DVector<f64>,
    chol: &DMatrix<f64>,
    scale: f64,
    steps: usize,
    rng: &mut StreamRng,
    mut visit: impl FnMut(&DVector<f64>),
) -> f64 {
    let counter = EvalCounter::new();
    let d = x.len();
    let mut lp = log_post(model, x, &counter);
    let mut accepted = 0usize;
    for _ in 0..steps {
        let w = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let prop = &*x + chol * w * scale;
        let lq = log_post(model, &prop, &counter);
        let u: f64 = rng.random();
        if u.ln() < lq - lp {
            *x = prop;
            lp = lq;
            accepted += 1;
        }
        visit(x);
    }
    accepted as f64 / steps as f64
}

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("crates/core/data/nonlinear_toy_reference.csv"));
    let model = nonlinear_toy(&NonlinearToyConfig::default()).expect("toy builds");
    let d = model.dim();
    let mut rng = Streams::new(SEED).stream(Purpose::Mcmc, 0, 0, 0);
    let scale = 2.38 / (d as f64).sqrt();

    let mut x = DVector::zeros(d);
    let mut pilot = Vec::with_capacity(PILOT_STEPS / 2);
    let mut k = 0;
    let rate = chain(
        &model,
        &mut x,
        &(DMatrix::identity(d, d) * 0.3),
        scale,
        PILOT_STEPS,
        &mut rng,
        |s| {
            k += 1;
            if k > PILOT_STEPS / 2 {
                pilot.push(s.clone());
            }
        },
    );
    let samples = DMatrix::from_fn(pilot.len(), d, |i, j| pilot[i][j]);
    let (_, cov) = skt_core::ensemble_moments(&samples);
    let chol = CholFactor::new(&cov, "pilot covariance")
        .expect("pilot covariance is SPD")
        .l()
        .clone();
    eprintln!("pilot acceptance {rate:.3}");

    chain(&model, &mut x, &chol, scale, BURN_IN, &mut rng, |_| {});

    // Online power sums of every coordinate, plus batch sums of x and x²
    // for batch-means standard errors.
    let per_batch = STEPS / BATCHES;
    let mut sums = [
        DVector::<f64>::zeros(d),
        DVector::zeros(d),
        DVector::zeros(d),
    ];
    let mut batch_sum = vec![DVector::<f64>::zeros(2 * d); BATCHES];
    let mut n = 0usize;
    let rate = chain(&model, &mut x, &chol, scale, STEPS, &mut rng, |s| {
        let b = &mut batch_sum[n / per_batch];
        for j in 0..d {
            let v2 = s[j] * s[j];
            sums[0][j] += s[j];
            sums[1][j] += v2;
            sums[2][j] += v2 * v2;
            b[j] += s[j];
            b[d + j] += v2;
        }
        n += 1;
    });
    eprintln!("production acceptance {rate:.3}");

    let nf = STEPS as f64;
    let mean_x = &sums[0] / nf;
    let mean_x2 = &sums[1] / nf;
    let mean_x4 = &sums[2] / nf;
    let var_x = DVector::from_fn(d, |j, _| mean_x2[j] - mean_x[j] * mean_x[j]);
    let var_x2 = DVector::from_fn(d, |j, _| mean_x4[j] - mean_x2[j] * mean_x2[j]);

    let mut worst = 0.0f64;
    for j in 0..2 * d {
        let bm: Vec<f64> = batch_sum.iter().map(|b| b[j] / per_batch as f64).collect();
        let mean = bm.iter().sum::<f64>() / BATCHES as f64;
        let var = bm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
        let sd = if j < d { var_x[j] } else { var_x2[j - d] }.sqrt();
        worst = worst.max((var / BATCHES as f64).sqrt() / sd);
    }
    eprintln!(
        "largest standard error relative to the posterior sd: {worst:.2e} (bias floor {:.1e})",
        worst * worst
    );

    let reference =
        ReferenceMoments::new(mean_x, var_x, mean_x2, var_x2).expect("positive variances");
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).expect("output directory");
    }
    reference.write_csv(&out).expect("write reference");
    eprintln!("wrote {}", out.display());
}
