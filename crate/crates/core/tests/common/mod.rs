//! Helpers shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded generator for test-side randomness.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` draws from `N(mean, L Lᵀ)` as rows.
pub fn gaussian_rows(
    n: usize,
    mean: &DVector<f64>,
    lower: &DMatrix<f64>,
    seed: u64,
) -> DMatrix<f64> {
    let mut r = rng(seed);
    let d = mean.len();
    let mut out = DMatrix::zeros(n, d);
    for i in 0..n {
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut r));
        out.set_row(i, &(mean + lower * z).transpose());
    }
    out
}

/// Mean and batch-means standard error of a correlated series.
pub fn batch_mean_se(series: &[f64], batches: usize) -> (f64, f64) {
    let n = series.len();
    let per = n / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| series[b * per..(b + 1) * per].iter().sum::<f64>() / per as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let v = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (
        series.iter().sum::<f64>() / n as f64,
        (v / batches as f64).sqrt(),
    )
}

/// Moments of a 2-d density tabulated on a tensor grid by the midpoint rule:
/// `(E[x₁], E[x₂], Var[x₁], Var[x₂])`.
pub fn grid_moments_2d(
    log_density: impl Fn(f64, f64) -> f64,
    lo: f64,
    hi: f64,
    n: usize,
) -> [f64; 4] {
    let h = (hi - lo) / n as f64;
    let mut s = [0.0; 5];
    for i in 0..n {
        let a = lo + (i as f64 + 0.5) * h;
        for j in 0..n {
            let b = lo + (j as f64 + 0.5) * h;
            let p = log_density(a, b).exp();
            s[0] += p;
            s[1] += p * a;
            s[2] += p * b;
            s[3] += p * a * a;
            s[4] += p * b * b;
        }
    }
    let m1 = s[1] / s[0];
    let m2 = s[2] / s[0];
    [m1, m2, s[3] / s[0] - m1 * m1, s[4] / s[0] - m2 * m2]
}

/// Largest absolute entry of a matrix difference.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

/// `J` prior draws of `model` from the prior-draw streams of `seed`.
pub fn prior_draws(model: &skt_core::ModelSpec, j: usize, seed: u64) -> DMatrix<f64> {
    let rngs = skt_core::rng::Streams::new(seed).particles(skt_core::rng::Purpose::PriorDraw, 0, 0);
    model.sample_prior(j, |i| rngs.for_particle(i))
}

/// Per-particle Kalman noise streams of `seed` at `level`.
pub fn kalman_rngs(seed: u64, level: u64) -> skt_core::rng::ParticleRngs {
    skt_core::rng::Streams::new(seed).particles(skt_core::rng::Purpose::KalmanNoise, level, 0)
}

/// Reference posterior moments of the default nonlinear toy problem.
pub fn nonlinear_reference() -> skt_core::diagnostics::ReferenceMoments {
    let path =
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data/nonlinear_toy_reference.csv");
    skt_core::diagnostics::ReferenceMoments::read_csv(&path).expect("reference moments")
}
