//! Metropolis kernels against closed-form and quadrature oracles.

mod common;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Gamma, StandardNormal};

use common::{batch_mean_se, grid_moments_2d, rng};
use skt_core::ensemble::{annealed_log_target, EvalCounter};
use skt_core::kernels::{
    pcn_step, tpcn_latent_step, tpcn_step, ChainState, FnTarget, LogTarget, ParticleEval,
    PcnParams, TDistParams,
};
use skt_core::models::toy::LinearGaussianToy;
use skt_core::precond::{fit_affine, IdentityMap, Preconditioner};
use skt_core::student_t::{fit_multivariate_t, t_log_density, EmOptions};

const BANANA_CURVE: f64 = 0.3;
const BANANA_SD: f64 = 0.7;

/// Non-Gaussian 2-d density: `a ~ N(0,1)`, `b | a ~ N(0.3(a² − 1), 0.7²)`.
fn banana(a: f64, b: f64) -> f64 {
    let r = b - BANANA_CURVE * (a * a - 1.0);
    -0.5 * a * a - 0.5 * r * r / (BANANA_SD * BANANA_SD)
}

fn banana_oracle() -> [f64; 4] {
    grid_moments_2d(banana, -12.0, 12.0, 1200)
}

/// Checks chain means and variances against an oracle within 3 batch-means
/// standard errors.
fn assert_moments_within_3se(chain: &[DVector<f64>], oracle: [f64; 4]) {
    for k in 0..2 {
        let xs: Vec<f64> = chain.iter().map(|x| x[k]).collect();
        let (m, se) = batch_mean_se(&xs, 100);
        assert!(
            (m - oracle[k]).abs() < 3.0 * se,
            "mean {k}: chain {m}, oracle {}, se {se}",
            oracle[k]
        );
        let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
        let (v, se_v) = batch_mean_se(&sq, 100);
        assert!(
            (v - oracle[2 + k]).abs() < 3.0 * se_v,
            "variance {k}: chain {v}, oracle {}, se {se_v}",
            oracle[2 + k]
        );
    }
}

fn run_chain<T: LogTarget>(
    target: &T,
    start: DVector<f64>,
    steps: usize,
    seed: u64,
    mut step: impl FnMut(&ChainState<T::Aux>, &T, &mut dyn rand::RngCore) -> ChainState<T::Aux>,
) -> Vec<DVector<f64>> {
    let mut r = rng(seed);
    let mut s = target.state_at(start).unwrap();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        s = step(&s, target, &mut r);
        out.push(s.point.clone());
    }
    out
}

#[test]
fn pcn_chain_reproduces_gaussian_target_moments() {
    let mean = DVector::from_vec(vec![1.0, -0.5]);
    let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0]);
    let prec = cov.clone().try_inverse().unwrap();
    let m = mean.clone();
    let target = FnTarget(move |x: &DVector<f64>| {
        let r = x - &m;
        -0.5 * (r.transpose() * &prec * &r)[0]
    });
    let params = PcnParams::new(DVector::zeros(2), &DMatrix::identity(2, 2), 0.5).unwrap();
    let chain = run_chain(&target, DVector::zeros(2), 100_000, 1, |s, t, r| {
        pcn_step(s, t, &params, r).state
    });
    let oracle = [mean[0], mean[1], cov[(0, 0)], cov[(1, 1)]];
    assert_moments_within_3se(&chain, oracle);
}

#[test]
fn inverse_scale_draws_have_gamma_mean() {
    let p = TDistParams::new(
        4.0,
        DVector::from_vec(vec![0.5, -1.0, 0.0]),
        &DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 2.0, 0.1, 0.0, 0.1, 0.5]),
        0.7,
    )
    .unwrap();
    let x = DVector::from_vec(vec![2.0, 1.0, -1.0]);
    let (k, theta) = p.inverse_scale_gamma(&x);
    let expected = (3.0 + 4.0) / (4.0 + p.mahalanobis_sq(&x));
    assert!((k * theta - expected).abs() < 1e-14);
    let g = Gamma::new(k, theta).unwrap();
    let mut r = rng(2);
    let n = 1_000_000;
    let mean = (0..n).map(|_| g.sample(&mut r)).sum::<f64>() / n as f64;
    assert!((mean / expected - 1.0).abs() < 0.01, "{mean} vs {expected}");
}

#[test]
fn tpcn_chain_reproduces_heavy_tailed_quantiles() {
    let nu_t = 3.0;
    let mu_t = DVector::from_vec(vec![0.5, 0.0]);
    let c_t = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let (m2, c2) = (mu_t.clone(), c_t.clone());
    let target = FnTarget(move |x: &DVector<f64>| t_log_density(x, nu_t, &m2, &c2).unwrap());
    let params = TDistParams::new(5.0, DVector::zeros(2), &DMatrix::identity(2, 2), 0.5).unwrap();
    let chain = run_chain(&target, DVector::zeros(2), 100_000, 3, |s, t, r| {
        tpcn_step(s, t, &params, r).state
    });

    // Marginal CDFs by midpoint quadrature of the 2-d density.
    let (lo, hi, n) = (-40.0, 40.0, 1600);
    let h = (hi - lo) / n as f64;
    let mut marg = [vec![0.0; n], vec![0.0; n]];
    for i in 0..n {
        for j in 0..n {
            let x = DVector::from_vec(vec![lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h]);
            let p = t_log_density(&x, nu_t, &mu_t, &c_t).unwrap().exp();
            marg[0][i] += p;
            marg[1][j] += p;
        }
    }
    for (k, m) in marg.iter().enumerate() {
        let total: f64 = m.iter().sum();
        let mut cdf = 0.0;
        let mut quantiles = Vec::new();
        let mut probs = [0.1, 0.25, 0.5, 0.75, 0.9].iter().peekable();
        for (i, v) in m.iter().enumerate() {
            cdf += v / total;
            while let Some(&&p) = probs.peek() {
                if cdf >= p {
                    quantiles.push((p, lo + (i as f64 + 1.0) * h));
                    probs.next();
                } else {
                    break;
                }
            }
        }
        for (p, q) in quantiles {
            let frac = chain.iter().filter(|x| x[k] <= q).count() as f64 / chain.len() as f64;
            assert!(
                (frac - p).abs() < 0.02,
                "coordinate {k}: P(x ≤ {q}) = {frac}, oracle {p}"
            );
        }
    }
}

#[test]
fn tpcn_chain_reproduces_banana_moments() {
    let target = FnTarget(|x: &DVector<f64>| banana(x[0], x[1]));
    let params = TDistParams::new(
        5.0,
        DVector::zeros(2),
        &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.5]),
        0.5,
    )
    .unwrap();
    let chain = run_chain(&target, DVector::zeros(2), 100_000, 4, |s, t, r| {
        tpcn_step(s, t, &params, r).state
    });
    assert_moments_within_3se(&chain, banana_oracle());
}

#[test]
fn one_tpcn_step_preserves_exact_samples() {
    let target = FnTarget(|x: &DVector<f64>| banana(x[0], x[1]));
    let params = TDistParams::new(
        4.0,
        DVector::from_vec(vec![0.2, 0.1]),
        &DMatrix::identity(2, 2),
        0.8,
    )
    .unwrap();
    let oracle = banana_oracle();
    let mut r = rng(5);
    let n = 100_000;
    let mut moved = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut r);
        let e: f64 = StandardNormal.sample(&mut r);
        let x = DVector::from_vec(vec![a, BANANA_CURVE * (a * a - 1.0) + BANANA_SD * e]);
        let s = target.state_at(x).unwrap();
        moved.push(tpcn_step(&s, &target, &params, &mut r).state.point);
    }
    for k in 0..2 {
        let xs: Vec<f64> = moved.iter().map(|x| x[k]).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let fourth = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n as f64;
        let se_m = (v / n as f64).sqrt();
        let se_v = ((fourth - v * v) / n as f64).sqrt();
        assert!(
            (m - oracle[k]).abs() < 3.0 * se_m,
            "mean {k}: {m} vs {}",
            oracle[k]
        );
        assert!(
            (v - oracle[2 + k]).abs() < 3.0 * se_v,
            "variance {k}: {v} vs {}",
            oracle[2 + k]
        );
    }
}

fn evaluated_state<P: Preconditioner>(
    target: &skt_core::kernels::LatentTarget<'_, P>,
    z: DVector<f64>,
) -> ChainState<ParticleEval> {
    target.state_at(z).unwrap()
}

#[test]
fn identity_latent_step_matches_data_space_step() {
    let toy = LinearGaussianToy::random(2, 3, 0.5, 11);
    let model = toy.spec().unwrap();
    let beta = 0.7;
    let counter = EvalCounter::new();
    let id = IdentityMap::new(2);
    let latent = skt_core::kernels::LatentTarget {
        model: &model,
        precond: &id,
        beta,
        counter: &counter,
    };
    let m2 = model.clone();
    let data = FnTarget(move |x: &DVector<f64>| {
        let (_, misfit) = m2.evaluate(x, &EvalCounter::new()).unwrap();
        annealed_log_target(&m2, x, misfit, beta)
    });
    let params = TDistParams::new(6.0, DVector::zeros(2), &DMatrix::identity(2, 2), 0.6).unwrap();
    let mut ra = rng(12);
    let mut rb = rng(12);
    let mut sa = evaluated_state(&latent, DVector::from_vec(vec![0.3, -0.2]));
    let mut sb = data.state_at(DVector::from_vec(vec![0.3, -0.2])).unwrap();
    for _ in 0..2000 {
        let a = tpcn_latent_step(&sa, &id, &model, beta, &params, &mut ra, &counter);
        let b = tpcn_step(&sb, &data, &params, &mut rb);
        assert_eq!(a.accepted, b.accepted);
        assert_eq!(a.state.point, b.state.point);
        sa = a.state;
        sb = b.state;
    }
    // One evaluation for the starting state, one per proposal.
    assert_eq!(counter.get(), 2001);
}

#[test]
fn affine_latent_chain_matches_posterior_moments() {
    let toy = LinearGaussianToy::random(2, 3, 0.5, 13);
    let model = toy.spec().unwrap();
    let (mean, cov) = toy.posterior().unwrap();
    let lower = cov.clone().cholesky().unwrap().l() * 1.4;
    let draws = common::gaussian_rows(1000, &(&mean + DVector::from_element(2, 0.1)), &lower, 14);
    let map = fit_affine(&draws).unwrap();
    let counter = EvalCounter::new();
    let target = skt_core::kernels::LatentTarget {
        model: &model,
        precond: &map,
        beta: 1.0,
        counter: &counter,
    };
    let params = TDistParams::new(10.0, DVector::zeros(2), &DMatrix::identity(2, 2), 0.5).unwrap();
    let mut r = rng(15);
    let mut s = evaluated_state(&target, map.forward(&mean));
    let mut latent_chain = Vec::with_capacity(100_000);
    for _ in 0..100_000 {
        s = tpcn_latent_step(&s, &map, &model, 1.0, &params, &mut r, &counter).state;
        latent_chain.push(s.aux.x.clone());
    }
    let oracle = [mean[0], mean[1], cov[(0, 0)], cov[(1, 1)]];
    assert_moments_within_3se(&latent_chain, oracle);

    let m2 = model.clone();
    let data = FnTarget(move |x: &DVector<f64>| {
        let (_, misfit) = m2.evaluate(x, &EvalCounter::new()).unwrap();
        annealed_log_target(&m2, x, misfit, 1.0)
    });
    let dparams = TDistParams::new(10.0, mean.clone(), &(&cov * 2.0), 0.5).unwrap();
    let data_chain = run_chain(&data, mean.clone(), 100_000, 16, |s, t, r| {
        tpcn_step(s, t, &dparams, r).state
    });
    assert_moments_within_3se(&data_chain, oracle);
}

#[test]
fn whitened_prior_gives_high_acceptance() {
    let toy = LinearGaussianToy::random(3, 3, 0.5, 17);
    let model = toy.spec().unwrap();
    let draws = common::gaussian_rows(10_000, &DVector::zeros(3), &DMatrix::identity(3, 3), 18);
    let map = fit_affine(&draws).unwrap();
    let fit = fit_multivariate_t(&map.forward_rows(&draws), &EmOptions::default()).unwrap();
    let params = TDistParams::new(fit.nu, fit.mu, &fit.scale, 0.5).unwrap();
    let counter = EvalCounter::new();
    let target = skt_core::kernels::LatentTarget {
        model: &model,
        precond: &map,
        beta: 0.0,
        counter: &counter,
    };
    let mut r = rng(19);
    let mut s = evaluated_state(&target, DVector::zeros(3));
    let steps = 10_000;
    let mut alpha = 0.0;
    for _ in 0..steps {
        let res = tpcn_latent_step(&s, &map, &model, 0.0, &params, &mut r, &counter);
        alpha += res.alpha;
        s = res.state;
    }
    let rate = alpha / steps as f64;
    assert!(rate > 0.9, "acceptance {rate}");
}
