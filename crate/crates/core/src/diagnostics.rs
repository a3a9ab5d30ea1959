//! Accuracy diagnostics: variance-normalized squared bias of the first two
//! moments against reference posterior moments, reference ingestion from
//! long chains, and posterior-mean field reconstruction.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ensemble::parse_numeric_csv;
use crate::error::{CoreError, Result};
use crate::models::FieldModel;

/// Bias below which a run is in the low-bias regime.
pub const LOW_BIAS_THRESHOLD: f64 = 1e-2;
/// Fewest chain samples accepted by [`reference_from_chain`].
pub const MIN_CHAIN_SAMPLES: usize = 1000;

const REFERENCE_HEADER: [&str; 5] = ["dim", "mean_x", "var_x", "mean_x2", "var_x2"];

/// Posterior `E[x]`, `Var[x]`, `E[x²]` and `Var[x²]` per dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceMoments {
    pub mean_x: DVector<f64>,
    pub var_x: DVector<f64>,
    pub mean_x2: DVector<f64>,
    pub var_x2: DVector<f64>,
}

impl ReferenceMoments {
    /// Checks shapes and that every variance is positive and finite.
    pub fn new(
        mean_x: DVector<f64>,
        var_x: DVector<f64>,
        mean_x2: DVector<f64>,
        var_x2: DVector<f64>,
    ) -> Result<Self> {
        let d = mean_x.len();
        if var_x.len() != d || mean_x2.len() != d || var_x2.len() != d {
            return Err(CoreError::Dimension(
                "reference moment vectors have different lengths".into(),
            ));
        }
        for k in 0..d {
            if !(var_x[k] > 0.0 && var_x[k].is_finite()) {
                return Err(CoreError::Invalid(format!(
                    "reference Var[x] must be positive in dimension {k}, got {}",
                    var_x[k]
                )));
            }
            if !(var_x2[k] > 0.0 && var_x2[k].is_finite()) {
                return Err(CoreError::Invalid(format!(
                    "reference Var[x²] must be positive in dimension {k}, got {}",
                    var_x2[k]
                )));
            }
        }
        Ok(Self {
            mean_x,
            var_x,
            mean_x2,
            var_x2,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean_x.len()
    }

    /// Exact moments of the marginals of `N(mean, cov)`:
    /// `E[x²] = m² + v` and `Var[x²] = 4m²v + 2v²`.
    pub fn from_gaussian(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(CoreError::Dimension(
                "Gaussian mean and covariance shapes differ".into(),
            ));
        }
        let v = cov.diagonal();
        let mean_x2 = DVector::from_fn(mean.len(), |k, _| mean[k] * mean[k] + v[k]);
        let var_x2 = DVector::from_fn(mean.len(), |k, _| {
            4.0 * mean[k] * mean[k] * v[k] + 2.0 * v[k] * v[k]
        });
        Self::new(mean.clone(), v, mean_x2, var_x2)
    }

    /// Sample moments of a `n × d` matrix of draws (variance divisor `n − 1`).
    pub fn from_samples(samples: &DMatrix<f64>) -> Result<Self> {
        let (n, d) = samples.shape();
        if n < 2 {
            return Err(CoreError::Invalid(
                "need at least 2 samples for reference moments".into(),
            ));
        }
        let moments = |g: &dyn Fn(f64) -> f64| -> (DVector<f64>, DVector<f64>) {
            let mut mean = DVector::zeros(d);
            let mut var = DVector::zeros(d);
            for k in 0..d {
                let col: Vec<f64> = samples.column(k).iter().map(|v| g(*v)).collect();
                let m = col.iter().sum::<f64>() / n as f64;
                mean[k] = m;
                var[k] = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
            }
            (mean, var)
        };
        let (mean_x, var_x) = moments(&|v| v);
        let (mean_x2, var_x2) = moments(&|v| v * v);
        Self::new(mean_x, var_x, mean_x2, var_x2)
    }

    /// Writes the CSV form with header `dim,mean_x,var_x,mean_x2,var_x2`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| CoreError::io(path, e);
        writeln!(w, "{}", REFERENCE_HEADER.join(",")).map_err(io)?;
        for k in 0..self.dim() {
            writeln!(
                w,
                "{k},{:.17e},{:.17e},{:.17e},{:.17e}",
                self.mean_x[k], self.var_x[k], self.mean_x2[k], self.var_x2[k]
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads the CSV form written by [`ReferenceMoments::write_csv`].
    /// Rows must list dimensions `0, 1, …` in order.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let name = path.display().to_string();
        let header: Vec<&str> = text
            .lines()
            .next()
            .unwrap_or("")
            .split(',')
            .map(str::trim)
            .collect();
        if header != REFERENCE_HEADER {
            return Err(CoreError::Parse {
                path: name,
                line: 1,
                message: format!("expected header {}", REFERENCE_HEADER.join(",")),
            });
        }
        let m = parse_numeric_csv(&text, &name)?;
        for (k, dim) in m.column(0).iter().enumerate() {
            if *dim != k as f64 {
                return Err(CoreError::Parse {
                    path: name,
                    line: k + 2,
                    message: format!("expected dimension {k}, found {dim}"),
                });
            }
        }
        let col = |c: usize| m.column(c).into_owned();
        Self::new(col(1), col(2), col(3), col(4))
    }
}

/// Sample moments of a chain stored as CSV (header row, one sample per
/// row). Requires at least [`MIN_CHAIN_SAMPLES`] rows and no constant column.
pub fn reference_from_chain(path: &Path) -> Result<ReferenceMoments> {
    let samples = crate::ensemble::read_ensemble_csv(path)?;
    if samples.nrows() < MIN_CHAIN_SAMPLES {
        return Err(CoreError::Invalid(format!(
            "{} has {} samples; at least {MIN_CHAIN_SAMPLES} are required",
            path.display(),
            samples.nrows()
        )));
    }
    ReferenceMoments::from_samples(&samples)
}

/// Per-dimension squared biases.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DimBias {
    pub dim: usize,
    pub b1_sq: f64,
    pub b2_sq: f64,
}

/// Dimension-averaged variance-normalized squared biases of `E[x]` and
/// `E[x²]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BiasReport {
    pub b1_sq: f64,
    pub b2_sq: f64,
    pub per_dim: Vec<DimBias>,
}

impl BiasReport {
    /// True when both biases are below [`LOW_BIAS_THRESHOLD`].
    pub fn low_bias(&self) -> bool {
        self.b1_sq < LOW_BIAS_THRESHOLD && self.b2_sq < LOW_BIAS_THRESHOLD
    }

    /// Writes the report as pretty JSON.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Numerical(format!("cannot serialize bias report: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
    }
}

/// `⟨b_g²⟩ = mean_k (E_ens[g_k] − E_ref[g_k])² / Var_ref[g_k]` for
/// `g = x` and `g = x²`, with ensemble averages over particles.
pub fn squared_bias(states: &DMatrix<f64>, reference: &ReferenceMoments) -> Result<BiasReport> {
    let (j, d) = states.shape();
    if d != reference.dim() {
        return Err(CoreError::Dimension(format!(
            "ensemble dimension {d} differs from reference dimension {}",
            reference.dim()
        )));
    }
    if j == 0 {
        return Err(CoreError::Invalid("empty ensemble".into()));
    }
    let per_dim: Vec<DimBias> = (0..d)
        .map(|k| {
            let col = states.column(k);
            let m1 = col.sum() / j as f64;
            let m2 = col.iter().map(|v| v * v).sum::<f64>() / j as f64;
            DimBias {
                dim: k,
                b1_sq: (m1 - reference.mean_x[k]).powi(2) / reference.var_x[k],
                b2_sq: (m2 - reference.mean_x2[k]).powi(2) / reference.var_x2[k],
            }
        })
        .collect();
    let n = d.max(1) as f64;
    Ok(BiasReport {
        b1_sq: per_dim.iter().map(|b| b.b1_sq).sum::<f64>() / n,
        b2_sq: per_dim.iter().map(|b| b.b2_sq).sum::<f64>() / n,
        per_dim,
    })
}

/// Ensemble average of the physical field of every particle.
pub fn reconstruct_field<M: FieldModel + ?Sized>(
    states: &DMatrix<f64>,
    model: &M,
) -> Result<DVector<f64>> {
    if states.ncols() != model.dim() {
        return Err(CoreError::Dimension(format!(
            "ensemble dimension {} differs from model dimension {}",
            states.ncols(),
            model.dim()
        )));
    }
    let (rows, cols) = model.field_shape();
    let mut acc = DVector::zeros(rows * cols);
    for i in 0..states.nrows() {
        acc += model.field(&states.row(i).transpose());
    }
    Ok(acc / states.nrows().max(1) as f64)
}

/// Writes a flattened row-major field as a headerless `rows × cols` CSV.
pub fn write_field_csv(path: &Path, field: &DVector<f64>, shape: (usize, usize)) -> Result<()> {
    let (rows, cols) = shape;
    if rows * cols != field.len() {
        return Err(CoreError::Dimension(format!(
            "field of length {} cannot be shaped {rows}×{cols}",
            field.len()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| format!("{:.17e}", field[r * cols + c]))
            .collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| CoreError::io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}
