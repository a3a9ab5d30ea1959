//! Tempering schedule: importance weights, ESS-driven temperature selection,
//! systematic resampling and the autocorrelation stopping rule.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};

use crate::error::{CoreError, Result};

/// Default fractional ESS target.
pub const DEFAULT_TAU: f64 = 0.5;
/// Default autocorrelation-product threshold.
pub const DEFAULT_TAU_CORR: f64 = 0.1;
/// β values within this distance of 1 are snapped to 1.
pub const BETA_SNAP: f64 = 1e-8;
/// Relative ESS tolerance `|ESS − τJ| ≤ tol·J` at which bisection stops.
pub const ESS_TOL: f64 = 1e-8;
const MAX_BISECTION: usize = 200;

/// Log importance weights `−(β_next − β_n) Φ_i` for moving between
/// temperatures.
pub fn importance_log_weights(misfits: &DVector<f64>, beta_n: f64, beta_next: f64) -> DVector<f64> {
    let db = beta_next - beta_n;
    if db == 0.0 {
        return DVector::zeros(misfits.len());
    }
    misfits.map(|phi| -db * phi)
}

/// Normalizes log weights onto the simplex with log-sum-exp.
pub fn normalize_log_weights(log_w: &DVector<f64>) -> DVector<f64> {
    let max = log_w.max();
    let shifted = log_w.map(|v| (v - max).exp());
    let total = shifted.sum();
    shifted / total
}

/// Effective sample size `(Σw)² / Σw²` of unnormalized log weights.
pub fn ess(log_w: &DVector<f64>) -> f64 {
    let max = log_w.max();
    let (s1, s2) = log_w.iter().fold((0.0, 0.0), |(a, b), v| {
        let w = (v - max).exp();
        (a + w, b + w * w)
    });
    s1 * s1 / s2
}

/// ESS of the incremental weights for a temperature increment `dbeta`.
pub fn ess_for_increment(misfits: &DVector<f64>, dbeta: f64) -> f64 {
    ess(&misfits.map(|phi| -dbeta * phi))
}

/// Next inverse temperature `β_{n+1} ∈ (β_n, 1]` with `ESS = τJ`.
///
/// Returns exactly 1 when the ESS of the full remaining increment is at
/// least `τJ`. Otherwise bisects on the increment until the ESS residual is
/// below `ESS_TOL · J` or the bracket can no longer shrink.
pub fn solve_next_beta(misfits: &DVector<f64>, beta_n: f64, tau: f64) -> Result<f64> {
    let j = misfits.len();
    if j < 2 {
        return Err(CoreError::Invalid("need at least 2 particles".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CoreError::Invalid(format!(
            "tau must lie in (0,1), got {tau}"
        )));
    }
    if !(0.0..1.0).contains(&beta_n) {
        return Err(CoreError::Invalid(format!(
            "beta_n must lie in [0,1), got {beta_n}"
        )));
    }
    if misfits.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numerical("non-finite misfit".into()));
    }
    let target = tau * j as f64;
    let remaining = 1.0 - beta_n;
    if ess_for_increment(misfits, remaining) >= target {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, remaining);
    let mut best = hi;
    for _ in 0..MAX_BISECTION {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let e = ess_for_increment(misfits, mid);
        if (e - target).abs() <= ESS_TOL * j as f64 {
            best = mid;
            break;
        }
        if e > target {
            lo = mid;
        } else {
            hi = mid;
        }
        best = if lo > 0.0 { lo } else { hi };
    }
    let next = beta_n + best;
    Ok(if 1.0 - next <= BETA_SNAP { 1.0 } else { next })
}

/// Systematic resampling of normalized weights.
///
/// Draws one uniform `u` and places the comb `(u + i)/J`, `i = 0..J`, against
/// the cumulative weights. Returns ancestor indices in comb order.
pub fn systematic_resample(weights: &DVector<f64>, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    let j = weights.len();
    if j == 0 {
        return Err(CoreError::Invalid("empty weight vector".into()));
    }
    if let Some(i) = weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(CoreError::Invalid(format!(
            "weight {i} is negative or non-finite: {}",
            weights[i]
        )));
    }
    let total = weights.sum();
    if !(total > 0.0) {
        return Err(CoreError::Invalid("weights sum to zero".into()));
    }
    let u: f64 = rng.random();
    let mut out = Vec::with_capacity(j);
    let mut cum = weights[0] / total;
    let mut k = 0;
    for i in 0..j {
        let point = (u + i as f64) / j as f64;
        while point >= cum && k < j - 1 {
            k += 1;
            cum += weights[k] / total;
        }
        out.push(k);
    }
    Ok(out)
}

/// Statistic whose lag-one ensemble correlation drives the stopping rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrStatistic {
    /// `x + x²` per coordinate.
    #[default]
    XPlusX2,
    /// `x` per coordinate.
    X,
}

impl CorrStatistic {
    fn apply(self, v: f64) -> f64 {
        match self {
            CorrStatistic::XPlusX2 => v + v * v,
            CorrStatistic::X => v,
        }
    }
}

/// Running products of per-coordinate lag-one correlations within a level.
#[derive(Clone, Debug)]
pub struct CorrTracker {
    products: DVector<f64>,
    statistic: CorrStatistic,
    tau_corr: f64,
}

impl CorrTracker {
    /// Fresh tracker with all products equal to 1.
    pub fn new(dim: usize, statistic: CorrStatistic, tau_corr: f64) -> Self {
        Self {
            products: DVector::from_element(dim, 1.0),
            statistic,
            tau_corr,
        }
    }

    pub fn products(&self) -> &DVector<f64> {
        &self.products
    }

    /// Multiplies in the correlations between two successive ensembles and
    /// reports whether every product is now below the threshold.
    pub fn update(&mut self, prev: &DMatrix<f64>, new: &DMatrix<f64>) -> Result<bool> {
        let rho = lag_correlations(prev, new, self.statistic)?;
        self.products.component_mul_assign(&rho);
        Ok(self.products.iter().all(|p| *p < self.tau_corr))
    }
}

/// Pearson correlation per coordinate between the statistic of two
/// ensembles; a coordinate with zero variance on either side gives 0.
pub fn lag_correlations(
    prev: &DMatrix<f64>,
    new: &DMatrix<f64>,
    statistic: CorrStatistic,
) -> Result<DVector<f64>> {
    if prev.shape() != new.shape() {
        return Err(CoreError::Dimension(format!(
            "ensemble shapes {:?} and {:?} differ",
            prev.shape(),
            new.shape()
        )));
    }
    let (j, d) = prev.shape();
    Ok(DVector::from_fn(d, |k, _| {
        let a: Vec<f64> = (0..j).map(|i| statistic.apply(prev[(i, k)])).collect();
        let b: Vec<f64> = (0..j).map(|i| statistic.apply(new[(i, k)])).collect();
        pearson(&a, &b)
    }))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
