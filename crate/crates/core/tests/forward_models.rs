//! Oracle checks for the random-field bases, PDE solvers, priors, data
//! simulation and the linear-Gaussian toy.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skt_core::ensemble::{ForwardModel, Prior};
use skt_core::models::gravity::{
    quadrature_matrix, reference_density, GravityConfig, GravityModel,
};
use skt_core::models::heat::{ftcs_step, HeatConfig, HeatModel};
use skt_core::models::kl::{
    build_full, build_nystrom, build_se_separable, cell_centre, KernelDesc,
};
use skt_core::models::prior::{prior_log_density, Dist, PriorBlock, PriorSpec, Transform};
use skt_core::models::reaction_diffusion::{
    solve_reaction_diffusion, ReactionDiffusionConfig, ReactionDiffusionModel,
};
use skt_core::models::simulate::{
    simulate_gravity, simulate_heat, simulate_reaction_diffusion, GravityTruth, HeatTruth,
    ReactionDiffusionTruth,
};
use skt_core::models::toy::LinearGaussianToy;

fn orthonormality_residual(phi: &DMatrix<f64>) -> f64 {
    let n = phi.nrows() as f64;
    let g = phi.transpose() * phi / n;
    (g - DMatrix::identity(phi.ncols(), phi.ncols()))
        .abs()
        .max()
}

#[test]
fn heat_basis_is_orthonormal_on_grid() {
    let b = build_se_separable(64, 0.1, 100).unwrap();
    assert!(orthonormality_residual(&b.phi) < 1e-6);
    assert!(b.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    assert!(*b.eigenvalues.last().unwrap() > 0.0);
}

#[test]
fn separable_se_matches_full_gram() {
    let sep = build_se_separable(16, 0.2, 40).unwrap();
    let full = build_full(KernelDesc::SquaredExponential { ell: 0.2 }, 16, 40).unwrap();
    for (a, b) in sep.eigenvalues.iter().zip(&full.eigenvalues) {
        assert!((a - b).abs() <= 1e-8 * b, "{a} vs {b}");
    }
}

#[test]
fn too_many_modes_names_usable_rank() {
    let err = build_se_separable(8, 5.0, 60).unwrap_err().to_string();
    assert!(err.contains("only"), "{err}");
}

#[test]
fn matern_nystrom_close_to_full_on_small_grid() {
    let k = KernelDesc::Matern32 { ell: 0.2 };
    let full = build_full(k, 24, 10).unwrap();
    let ny = build_nystrom(k, 24, 12, 10).unwrap();
    for (a, b) in ny.eigenvalues.iter().zip(&full.eigenvalues) {
        assert!((a - b).abs() < 0.1 * b, "{a} vs {b}");
    }
}

fn sine_mode(n: usize) -> Vec<f64> {
    let mut u = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            u[i * n + j] = (std::f64::consts::PI * cell_centre(i, n)).sin()
                * (std::f64::consts::PI * cell_centre(j, n)).sin();
        }
    }
    u
}

fn small_heat_model() -> HeatModel {
    HeatModel::new(HeatConfig {
        order: 4,
        ..HeatConfig::default()
    })
    .unwrap()
}

#[test]
fn heat_zero_field_gives_zero_observations() {
    let m = small_heat_model();
    let out = m.forward(&DVector::zeros(m.dim())).unwrap();
    assert_eq!(out.len(), 64);
    assert!(out.iter().all(|v| *v == 0.0));
}

#[test]
fn heat_sine_mode_decays_at_continuum_rate() {
    let m = small_heat_model();
    let c = m.config().clone();
    let d = 0.5;
    let u0 = sine_mode(c.grid);
    let out = m.observe_from_field(&u0, d).unwrap();
    let k = std::f64::consts::PI / c.length;
    let decay = (-2.0 * d * k * k * c.t_final).exp();
    let exact = skt_core::models::heat::block_average(&u0, c.grid, c.obs_grid) * decay;
    for (a, b) in out.iter().zip(exact.iter()) {
        assert!(((a - b) / b).abs() < 0.01, "{a} vs {b}");
    }
}

#[test]
fn heat_max_principle_and_energy_decay() {
    let c = HeatConfig::default();
    let prior = c.prior().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let full = HeatModel::new(c.clone()).unwrap();
    let x = prior.sample(&mut rng);
    let ratio = c.ftcs_ratio(x[0].exp());
    let mut u = full.field(&x).as_slice().to_vec();
    let mut next = vec![0.0; u.len()];
    let mut last_max = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for _ in 0..200 {
        ftcs_step(&u, &mut next, c.grid, ratio);
        std::mem::swap(&mut u, &mut next);
        let mx = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(mx <= last_max * (1.0 + 1e-14));
        last_max = mx;
    }

    let mut u: Vec<f64> = vec![1.0; c.grid * c.grid];
    let mut energy: f64 = u.iter().sum();
    for _ in 0..200 {
        ftcs_step(&u, &mut next, c.grid, c.ftcs_ratio(0.5));
        std::mem::swap(&mut u, &mut next);
        let e: f64 = u.iter().sum();
        assert!(e.abs() <= energy.abs());
        energy = e;
    }
}

#[test]
fn heat_misfit_matches_hand_recomputation() {
    let c = HeatConfig {
        order: 10,
        ..HeatConfig::default()
    };
    let model = std::sync::Arc::new(HeatModel::new(c.clone()).unwrap());
    let prior = std::sync::Arc::new(c.prior().unwrap());
    let y = DVector::from_fn(64, |i, _| (i as f64 * 0.1).sin());
    let spec = skt_core::ModelSpec::new(
        prior.clone(),
        model.clone(),
        y.clone(),
        skt_core::NoiseCov::isotropic(64, 0.2).unwrap(),
    )
    .unwrap();
    let x = prior.sample(&mut ChaCha8Rng::seed_from_u64(11));
    let counter = skt_core::EvalCounter::new();
    let (out, misfit) = spec.evaluate(&x, &counter).unwrap();
    let hand: f64 = y
        .iter()
        .zip(out.iter())
        .map(|(a, b)| ((a - b) / 0.2).powi(2))
        .sum::<f64>()
        * 0.5;
    assert!((misfit - hand).abs() <= 1e-12 * hand.max(1.0));
    assert_eq!(counter.get(), 1);
}

#[test]
fn gravity_constant_density_matches_fine_quadrature() {
    let cfg = GravityConfig::default();
    let coarse = quadrature_matrix(cfg.quadrature, cfg.surface, cfg.depth)
        * DVector::from_element(cfg.quadrature * cfg.quadrature, 1.0);
    let q = 512;
    let w = 1.0 / (q * q) as f64;
    for i in 0..cfg.surface * cfg.surface {
        let (s1, s2) = (
            cell_centre(i / cfg.surface, cfg.surface),
            cell_centre(i % cfg.surface, cfg.surface),
        );
        let mut fine = 0.0;
        for a in 0..q {
            let dx = s1 - (a as f64 + 0.5) / q as f64;
            for b in 0..q {
                let dy = s2 - (b as f64 + 0.5) / q as f64;
                let r2 = dx * dx + dy * dy + cfg.depth * cfg.depth;
                fine += w * cfg.depth / r2.powf(1.5);
            }
        }
        assert!(
            ((coarse[i] - fine) / fine).abs() < 0.005,
            "{} vs {fine}",
            coarse[i]
        );
    }
}

#[test]
fn gravity_is_linear_and_zero_preserving() {
    let cfg = GravityConfig {
        basis_method: skt_core::models::kl::BasisMethod::Nystrom { coarse_side: 16 },
        ..GravityConfig::default()
    };
    let m = GravityModel::new(cfg.clone(), None).unwrap();
    let r1 = reference_density(cfg.quadrature);
    let r2 = DVector::from_fn(r1.len(), |i, _| (i as f64 * 0.37).cos());
    let lhs = m.observe_density(&(&r1 + &r2));
    let rhs = m.observe_density(&r1) + m.observe_density(&r2);
    assert!((lhs - rhs).abs().max() < 1e-12);
    assert!(m
        .observe_density(&DVector::zeros(r1.len()))
        .iter()
        .all(|v| *v == 0.0));

    // Forward agrees with quadrature of the assembled field for fixed σ_K.
    let mut x = DVector::from_fn(m.dim(), |i, _| ((i * 7) % 5) as f64 * 0.2 - 0.4);
    x[0] = 0.3;
    x[1] = (0.15f64).ln();
    let via_field = m.observe_density(&m.field(&x));
    let direct = m.forward(&x).unwrap();
    assert!((via_field - direct).abs().max() < 1e-12);
}

#[test]
fn reaction_diffusion_zero_source_is_fixed_point() {
    let m = ReactionDiffusionModel::new(ReactionDiffusionConfig::default()).unwrap();
    let out = m.forward(&DVector::zeros(m.dim())).unwrap();
    assert_eq!(out.len(), 100);
    assert!(out.iter().all(|v| *v == 0.0));
}

/// Independent Crank-Nicolson solver for the linear equation
/// `s_t = D s_xx + u` on `nodes` points and `steps` steps.
fn linear_cn_oracle(
    u: &dyn Fn(f64) -> f64,
    d: f64,
    nodes: usize,
    steps: usize,
    tf: f64,
) -> Vec<Vec<f64>> {
    let m = nodes - 2;
    let h = 1.0 / (nodes - 1) as f64;
    let dt = tf / steps as f64;
    let r = d * dt / (h * h);
    let src: Vec<f64> = (1..=m).map(|i| u(i as f64 * h)).collect();
    let mut s = vec![0.0; m];
    let mut out = vec![vec![0.0; nodes]];
    for _ in 0..steps {
        let mut rhs: Vec<f64> = (0..m)
            .map(|i| {
                let l = if i > 0 { s[i - 1] } else { 0.0 };
                let rr = if i + 1 < m { s[i + 1] } else { 0.0 };
                s[i] + 0.5 * r * (l - 2.0 * s[i] + rr) + dt * src[i]
            })
            .collect();
        // Tridiagonal (−r/2, 1+r, −r/2) forward elimination.
        let (a, b) = (-0.5 * r, 1.0 + r);
        let mut cp = vec![0.0; m];
        cp[0] = a / b;
        rhs[0] /= b;
        for i in 1..m {
            let den = b - a * cp[i - 1];
            cp[i] = a / den;
            rhs[i] = (rhs[i] - a * rhs[i - 1]) / den;
        }
        for i in (0..m - 1).rev() {
            rhs[i] -= cp[i] * rhs[i + 1];
        }
        s = rhs;
        let mut full = vec![0.0; nodes];
        full[1..=m].copy_from_slice(&s);
        out.push(full);
    }
    out
}

fn interp(grid: &[f64], x: f64) -> f64 {
    let n = grid.len();
    let p = x * (n - 1) as f64;
    let i = (p.floor() as usize).min(n - 2);
    let f = p - i as f64;
    (1.0 - f) * grid[i] + f * grid[i + 1]
}

#[test]
fn reaction_diffusion_linear_mode_matches_fine_grid() {
    let cfg = ReactionDiffusionConfig {
        reaction: 0.0,
        ..ReactionDiffusionConfig::default()
    };
    let u = |x: f64| (std::f64::consts::PI * x).sin() + 0.5 * (3.0 * x).cos() - 0.3;
    let src: Vec<f64> = cfg.grid().iter().map(|&x| u(x)).collect();
    let coarse = solve_reaction_diffusion(&cfg, &src).unwrap();
    let fine = linear_cn_oracle(&u, cfg.diffusion, 1000, 1000, cfg.t_final);
    let grid = cfg.grid();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for &k in &cfg.obs_steps {
        for &i in &cfg.obs_nodes {
            let f = interp(&fine[k * 10], grid[i]);
            worst = worst.max((coarse.states[k][i] - f).abs());
            scale = scale.max(f.abs());
        }
    }
    assert!(worst / scale < 0.005, "relative error {}", worst / scale);
}

#[test]
fn reaction_diffusion_reaches_poisson_profile() {
    // The slowest mode decays like exp(−Dπ²t); t_f = 10 leaves ~5e-5.
    let cfg = ReactionDiffusionConfig {
        reaction: 0.0,
        t_final: 10.0,
        steps: 1000,
        obs_steps: vec![1000],
        ..ReactionDiffusionConfig::default()
    };
    let c = 0.01;
    let sol = solve_reaction_diffusion(&cfg, &vec![c; cfg.nodes]).unwrap();
    let last = sol.states.last().unwrap();
    let peak = c * 0.25 / (2.0 * cfg.diffusion);
    for (i, &x) in cfg.grid().iter().enumerate() {
        let exact = c * x * (1.0 - x) / (2.0 * cfg.diffusion);
        assert!((last[i] - exact).abs() < 0.01 * peak);
    }
}

#[test]
fn reaction_diffusion_newton_converges_on_truth_source() {
    let cfg = ReactionDiffusionConfig::default();
    let sim = simulate_reaction_diffusion(&cfg, &ReactionDiffusionTruth::default(), 5, 6).unwrap();
    let sol = solve_reaction_diffusion(&cfg, &sim.field).unwrap();
    assert!(sol.max_residual <= 1e-10);
}

#[test]
fn inverse_gamma_density_matches_closed_form() {
    // Γ(4) = 6, so the density is β⁴ v⁻⁵ e^{−β/v} / 6.
    let d = Dist::InverseGamma {
        alpha: 4.0,
        beta: 0.3,
    };
    for &v in &[0.01f64, 0.05, 0.1, 0.3, 1.0, 4.0] {
        let oracle = (0.3f64.powi(4) * v.powi(-5) * (-0.3 / v).exp() / 6.0).ln();
        assert!((d.log_density(v) - oracle).abs() < 1e-10);
    }
}

#[test]
fn prior_log_density_adds_log_jacobian() {
    let spec = PriorSpec::new(vec![PriorBlock::Scalar {
        dist: Dist::InverseGamma {
            alpha: 4.0,
            beta: 0.3,
        },
        transform: Transform::Log,
    }])
    .unwrap();
    let z: f64 = -1.7;
    let expected = Dist::InverseGamma {
        alpha: 4.0,
        beta: 0.3,
    }
    .log_density(z.exp())
        + z;
    assert!((prior_log_density(&DVector::from_element(1, z), &spec) - expected).abs() < 1e-14);
}

#[test]
fn simulation_is_deterministic_and_sized() {
    let hc = HeatConfig::default();
    let a = simulate_heat(&hc, &HeatTruth::default(), 1, 9).unwrap();
    let b = simulate_heat(&hc, &HeatTruth::default(), 1, 9).unwrap();
    assert_eq!(a.y, b.y);
    assert_eq!(a.y.len(), 64);
    let g = simulate_gravity(&GravityConfig::default(), &GravityTruth::default(), 9).unwrap();
    assert_eq!(g.y.len(), 100);
    let max = g.field.iter().cloned().fold(f64::MIN, f64::max);
    assert!((max - 1.0).abs() < 1e-15);
}

fn noise_sd_of(runs: impl Iterator<Item = skt_core::models::simulate::Simulation>) -> f64 {
    let mut resid = Vec::new();
    for sim in runs {
        resid.extend(sim.y.iter().zip(&sim.signal).map(|(a, b)| a - b));
    }
    let n = resid.len() as f64;
    let mean = resid.iter().sum::<f64>() / n;
    (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn simulated_noise_has_configured_sd() {
    let hc = HeatConfig::default();
    let heat =
        noise_sd_of((0..40).map(|s| simulate_heat(&hc, &HeatTruth::default(), 1, s).unwrap()));
    assert!(((heat - 0.2) / 0.2).abs() < 0.05, "heat {heat}");

    let gc = GravityConfig::default();
    let grav =
        noise_sd_of((0..40).map(|s| simulate_gravity(&gc, &GravityTruth::default(), s).unwrap()));
    assert!(((grav - 0.1) / 0.1).abs() < 0.05, "gravity {grav}");

    let rc = ReactionDiffusionConfig::default();
    let rd = noise_sd_of((0..40).map(|s| {
        simulate_reaction_diffusion(&rc, &ReactionDiffusionTruth::default(), 1, s).unwrap()
    }));
    assert!(((rd - 0.01) / 0.01).abs() < 0.05, "reaction-diffusion {rd}");
}

#[test]
fn linear_toy_posterior_matches_grid_quadrature() {
    let toy = LinearGaussianToy::random(3, 4, 0.7, 42);
    let (mean, cov) = toy.posterior().unwrap();
    let spec = toy.spec().unwrap();
    let n = 120;
    let half: Vec<f64> = (0..3).map(|k| 7.0 * cov[(k, k)].sqrt()).collect();
    let axis = |k: usize, i: usize| mean[k] - half[k] + 2.0 * half[k] * (i as f64 + 0.5) / n as f64;
    let mut logs = Vec::with_capacity(n * n * n);
    let mut pts = Vec::with_capacity(n * n * n);
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let x = DVector::from_vec(vec![axis(0, a), axis(1, b), axis(2, c)]);
                let out = spec.forward.forward(&x).unwrap();
                logs.push(spec.prior.log_density(&x) - spec.misfit(&out));
                pts.push(x);
            }
        }
    }
    let top = logs.iter().cloned().fold(f64::MIN, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    let quad_mean = pts
        .iter()
        .zip(&w)
        .fold(DVector::zeros(3), |acc, (p, wi)| acc + p * *wi)
        / z;
    assert!((quad_mean - mean).abs().max() < 1e-3);
}
