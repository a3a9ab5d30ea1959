//! Spectral bases for Gaussian random fields: discrete Karhunen-Loève bases
//! on square grids and the Hilbert-space (Laplacian eigenfunction) basis on
//! an interval.
//!
//! Grid points are cell centres `((i+½)/n, (j+½)/n)` of the unit square,
//! flattened as `p = i·n + j` with `i` indexing the first coordinate.
//! Eigenvectors of the Gram matrix are rescaled by `√N` and eigenvalues by
//! `1/N` (Nyström normalization), so `(1/N) Σ_p φ_j(p) φ_k(p) = δ_jk`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::linalg::top_eigenpairs;

/// Covariance kernel of a random field.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelDesc {
    /// `exp(−r² / 2ℓ²)`.
    SquaredExponential { ell: f64 },
    /// `(1 + √3 r/ℓ) exp(−√3 r/ℓ)`.
    Matern32 { ell: f64 },
}

impl KernelDesc {
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            KernelDesc::SquaredExponential { ell } => (-0.5 * r * r / (ell * ell)).exp(),
            KernelDesc::Matern32 { ell } => {
                let a = 3f64.sqrt() * r / ell;
                (1.0 + a) * (-a).exp()
            }
        }
    }
}

/// Truncated Karhunen-Loève basis on an `n × n` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct KLBasis {
    /// Non-increasing positive eigenvalues `λ_1 ≥ … ≥ λ_R`.
    pub eigenvalues: Vec<f64>,
    /// `N × R` eigenfunction values, one column per mode.
    pub phi: DMatrix<f64>,
    pub kernel: KernelDesc,
    pub grid_side: usize,
}

/// Relative threshold below which a Gram eigenvalue counts as numerically
/// zero.
const POSITIVE_SPECTRUM_TOL: f64 = 1e-12;

impl KLBasis {
    pub fn order(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn grid_len(&self) -> usize {
        self.phi.nrows()
    }

    /// `Φ diag(√λ)`, the field response to unit mode coefficients.
    pub fn scaled_modes(&self) -> DMatrix<f64> {
        let mut m = self.phi.clone();
        for (k, mut col) in m.column_iter_mut().enumerate() {
            col *= self.eigenvalues[k].sqrt();
        }
        m
    }

    /// `μ + σ Σ_k √λ_k θ_k φ_k` on the grid; `theta` may be shorter than the
    /// basis order.
    pub fn field(&self, mean: f64, sigma: f64, theta: &[f64]) -> DVector<f64> {
        let mut u = DVector::from_element(self.grid_len(), mean);
        for (k, t) in theta.iter().enumerate() {
            u.axpy(
                sigma * self.eigenvalues[k].sqrt() * t,
                &self.phi.column(k),
                1.0,
            );
        }
        u
    }

    /// Leading `r` modes of this basis.
    pub fn truncated(&self, r: usize) -> Result<Self> {
        if r > self.order() {
            return Err(CoreError::Invalid(format!(
                "basis has {} modes, {r} requested",
                self.order()
            )));
        }
        Ok(Self {
            eigenvalues: self.eigenvalues[..r].to_vec(),
            phi: self.phi.columns(0, r).into_owned(),
            kernel: self.kernel,
            grid_side: self.grid_side,
        })
    }
}

/// Cell-centre coordinate `(i + ½)/n`.
pub fn cell_centre(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

fn grid_point(p: usize, n: usize) -> (f64, f64) {
    (cell_centre(p / n, n), cell_centre(p % n, n))
}

/// Squared-exponential basis built from the 1-d Gram eigendecomposition:
/// 2-d eigenpairs are products `λ_a λ_b`, `φ_a(x₁) φ_b(x₂)` sorted by value.
pub fn build_se_separable(n: usize, ell: f64, r: usize) -> Result<KLBasis> {
    let kernel = KernelDesc::SquaredExponential { ell };
    let k1 = DMatrix::from_fn(n, n, |i, j| {
        kernel.eval(cell_centre(i, n) - cell_centre(j, n))
    });
    let (vals, vecs) = top_eigenpairs(&k1, n)?;
    let lead = vals[0];
    let usable: Vec<usize> = (0..n)
        .filter(|&a| vals[a] > POSITIVE_SPECTRUM_TOL * lead)
        .collect();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(usable.len() * usable.len());
    for &a in &usable {
        for &b in &usable {
            pairs.push((vals[a] * vals[b], a, b));
        }
    }
    if pairs.len() < r {
        return Err(CoreError::Invalid(format!(
            "requested {r} modes but only {} are numerically positive",
            pairs.len()
        )));
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let nn = (n * n) as f64;
    let eigenvalues = pairs[..r].iter().map(|p| p.0 / nn).collect();
    let phi = DMatrix::from_fn(n * n, r, |p, k| {
        let (_, a, b) = pairs[k];
        vecs[(p / n, a)] * vecs[(p % n, b)] * nn.sqrt()
    });
    Ok(KLBasis {
        eigenvalues,
        phi,
        kernel,
        grid_side: n,
    })
}

/// Gram matrix of `kernel` on the `n × n` cell-centre grid.
pub fn grid_gram(kernel: KernelDesc, n: usize) -> DMatrix<f64> {
    let pts: Vec<(f64, f64)> = (0..n * n).map(|p| grid_point(p, n)).collect();
    DMatrix::from_fn(n * n, n * n, |p, q| {
        let (dx, dy) = (pts[p].0 - pts[q].0, pts[p].1 - pts[q].1);
        kernel.eval((dx * dx + dy * dy).sqrt())
    })
}

/// Basis from the eigendecomposition of the full `n² × n²` Gram matrix.
pub fn build_full(kernel: KernelDesc, n: usize, r: usize) -> Result<KLBasis> {
    let gram = grid_gram(kernel, n);
    let nn = (n * n) as f64;
    let (vals, vecs) = top_eigenpairs(&gram, r)?;
    let usable = vals
        .iter()
        .take_while(|v| **v > POSITIVE_SPECTRUM_TOL * vals[0])
        .count();
    if usable < r {
        return Err(CoreError::Invalid(format!(
            "requested {r} modes but only {usable} are numerically positive"
        )));
    }
    Ok(KLBasis {
        eigenvalues: vals.iter().map(|v| v / nn).collect(),
        phi: vecs * nn.sqrt(),
        kernel,
        grid_side: n,
    })
}

/// Basis computed on a coarse `m × m` grid and carried to the `n × n` grid
/// by bilinear interpolation of the eigenfunctions (clamped at the edges).
/// Eigenvalues are those of the coarse problem.
pub fn build_nystrom(kernel: KernelDesc, n: usize, m: usize, r: usize) -> Result<KLBasis> {
    let coarse = build_full(kernel, m, r)?;
    let interp = |col: usize, x: f64, y: f64| -> f64 {
        let pos = |t: f64| -> (usize, usize, f64) {
            let s = (t * m as f64 - 0.5).clamp(0.0, (m - 1) as f64);
            let i0 = (s.floor() as usize).min(m.saturating_sub(2));
            let i1 = (i0 + 1).min(m - 1);
            (i0, i1, s - i0 as f64)
        };
        let (i0, i1, fx) = pos(x);
        let (j0, j1, fy) = pos(y);
        let v = |i: usize, j: usize| coarse.phi[(i * m + j, col)];
        (1.0 - fx) * ((1.0 - fy) * v(i0, j0) + fy * v(i0, j1))
            + fx * ((1.0 - fy) * v(i1, j0) + fy * v(i1, j1))
    };
    let phi = DMatrix::from_fn(n * n, r, |p, k| {
        let (x, y) = grid_point(p, n);
        interp(k, x, y)
    });
    Ok(KLBasis {
        eigenvalues: coarse.eigenvalues,
        phi,
        kernel,
        grid_side: n,
    })
}

/// Hilbert-space basis of the Laplacian on `[−L, L]` with Dirichlet ends:
/// `λ_j = (jπ/2L)²`, `φ_j(x) = √(1/L) sin(√λ_j (x + L))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HilbertBasis {
    pub half_width: f64,
    pub order: usize,
}

impl HilbertBasis {
    pub fn eigenvalue(&self, j: usize) -> f64 {
        let w = j as f64 * std::f64::consts::PI / (2.0 * self.half_width);
        w * w
    }

    pub fn eigenfunction(&self, j: usize, x: f64) -> f64 {
        (1.0 / self.half_width).sqrt() * (self.eigenvalue(j).sqrt() * (x + self.half_width)).sin()
    }

    /// Squared-exponential spectral density `α √(2π) ℓ exp(−ℓ²ω²/2)`.
    pub fn se_spectral_density(alpha: f64, ell: f64, omega: f64) -> f64 {
        alpha * (2.0 * std::f64::consts::PI).sqrt() * ell * (-0.5 * ell * ell * omega * omega).exp()
    }

    /// `N × R` matrix of `φ_j` at the given points (`j = 1..=R`).
    pub fn design(&self, xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), self.order, |i, k| {
            self.eigenfunction(k + 1, xs[i])
        })
    }

    /// Mode weights `√S(√λ_j)` for given kernel hyperparameters.
    pub fn weights(&self, alpha: f64, ell: f64) -> DVector<f64> {
        DVector::from_fn(self.order, |k, _| {
            Self::se_spectral_density(alpha, ell, self.eigenvalue(k + 1).sqrt()).sqrt()
        })
    }
}

/// How the Matérn basis for the gravity problem is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum BasisMethod {
    /// Eigendecomposition of the Gram matrix on the full grid.
    Full,
    /// Eigendecomposition on a coarse grid plus bilinear interpolation.
    Nystrom { coarse_side: usize },
}

/// Hex SHA-256 of a basis description, used as the cache key.
pub fn basis_key(kernel: KernelDesc, n: usize, r: usize, method: BasisMethod) -> String {
    let desc = format!("{kernel:?}|grid={n}|R={r}|{method:?}");
    hex::encode(Sha256::digest(desc.as_bytes()))
}

const CACHE_MAGIC: &[u8; 8] = b"SKTKLB01";

/// Writes a basis to a binary cache file.
pub fn write_basis(path: &Path, b: &KLBasis) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 8 * (b.order() * (b.grid_len() + 1)));
    buf.extend_from_slice(CACHE_MAGIC);
    for v in [b.grid_side as u64, b.grid_len() as u64, b.order() as u64] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in b.eigenvalues.iter().chain(b.phi.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    f.write_all(&buf).map_err(|e| CoreError::io(path, e))
}

/// Reads a basis written by [`write_basis`].
pub fn read_basis(path: &Path, kernel: KernelDesc) -> Result<KLBasis> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CoreError::io(path, e))?;
    let bad = |m: &str| CoreError::Parse {
        path: path.display().to_string(),
        line: 0,
        message: m.to_string(),
    };
    if buf.len() < 32 || &buf[..8] != CACHE_MAGIC {
        return Err(bad("not a basis cache file"));
    }
    let word =
        |k: usize| u64::from_le_bytes(buf[8 + 8 * k..16 + 8 * k].try_into().unwrap()) as usize;
    let (side, n, r) = (word(0), word(1), word(2));
    let body = &buf[32..];
    if body.len() != 8 * r * (n + 1) {
        return Err(bad("truncated basis cache file"));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(KLBasis {
        eigenvalues: vals[..r].to_vec(),
        phi: DMatrix::from_column_slice(n, r, &vals[r..]),
        kernel,
        grid_side: side,
    })
}

/// Builds the basis, reading and writing `cache_dir/<key>.basis.bin` when a
/// cache directory is given.
pub fn cached_basis(
    cache_dir: Option<&Path>,
    kernel: KernelDesc,
    n: usize,
    r: usize,
    method: BasisMethod,
) -> Result<KLBasis> {
    let path: Option<PathBuf> =
        cache_dir.map(|d| d.join(format!("{}.basis.bin", basis_key(kernel, n, r, method))));
    if let Some(p) = &path {
        if p.exists() {
            return read_basis(p, kernel);
        }
    }
    let basis = match (kernel, method) {
        (KernelDesc::SquaredExponential { ell }, BasisMethod::Full) => {
            build_se_separable(n, ell, r)?
        }
        (_, BasisMethod::Full) => build_full(kernel, n, r)?,
        (_, BasisMethod::Nystrom { coarse_side }) => build_nystrom(kernel, n, coarse_side, r)?,
    };
    if let Some(p) = &path {
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        }
        write_basis(p, &basis)?;
    }
    Ok(basis)
}
