//! Dense linear-algebra helpers: jittered Cholesky and leading eigenpairs of
//! symmetric matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};

/// Number of decades of diagonal jitter tried after a failed factorization.
pub const JITTER_DECADES: i32 = 3;
/// Relative size of the first jitter, in units of `trace / d`.
pub const JITTER_BASE: f64 = 1e-10;

/// Lower Cholesky factor `L` of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct CholFactor {
    l: DMatrix<f64>,
    jitter: f64,
}

impl CholFactor {
    /// Factorizes `m`, adding `JITTER_BASE * trace/d * 10^k` to the diagonal
    /// for `k = 0..=JITTER_DECADES` if the plain factorization fails.
    pub fn new(m: &DMatrix<f64>, what: &str) -> Result<Self> {
        if !m.is_square() {
            return Err(CoreError::Dimension(format!("{what} is not square")));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical(format!(
                "{what} has non-finite entries"
            )));
        }
        let sym = symmetrize(m);
        let max_diag = sym.diagonal().max();
        if let Some(l) = try_cholesky(&sym, max_diag) {
            return Ok(Self { l, jitter: 0.0 });
        }
        let d = sym.nrows().max(1) as f64;
        let scale = (sym.trace() / d).abs();
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let mut jitter = JITTER_BASE * scale;
        for _ in 0..=JITTER_DECADES {
            let mut shifted = sym.clone();
            for k in 0..shifted.nrows() {
                shifted[(k, k)] += jitter;
            }
            if let Some(l) = try_cholesky(&shifted, max_diag) {
                log::debug!("{what}: factorized with jitter {jitter:e}");
                return Ok(Self { l, jitter });
            }
            jitter *= 10.0;
        }
        Err(CoreError::Factorization {
            what: what.to_string(),
            jitter: jitter / 10.0,
        })
    }

    /// Wraps an already lower-triangular factor with positive diagonal.
    pub fn from_lower(l: DMatrix<f64>) -> Result<Self> {
        if !l.is_square() || (0..l.nrows()).any(|k| !(l[(k, k)] > 0.0)) {
            return Err(CoreError::Invalid(
                "lower factor must be square with positive diagonal".into(),
            ));
        }
        Ok(Self {
            l: l.lower_triangle(),
            jitter: 0.0,
        })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Diagonal jitter that was needed, zero if none.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// The factorized matrix `L Lᵀ` (including any jitter).
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// `L⁻¹ v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.l
            .solve_lower_triangular(v)
            .expect("Cholesky factor has positive diagonal")
    }

    /// `L⁻¹ M` for a matrix right-hand side.
    pub fn whiten_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(m)
            .expect("Cholesky factor has positive diagonal")
    }

    /// `A⁻¹ v` with `A = L Lᵀ`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = self.whiten(v);
        self.l
            .tr_solve_lower_triangular(&w)
            .expect("Cholesky factor has positive diagonal")
    }

    /// `A⁻¹ M` with `A = L Lᵀ`.
    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let w = self.whiten_matrix(m);
        self.l
            .tr_solve_lower_triangular(&w)
            .expect("Cholesky factor has positive diagonal")
    }

    /// Squared Mahalanobis norm `vᵀ A⁻¹ v`.
    pub fn mahalanobis_sq(&self, v: &DVector<f64>) -> f64 {
        self.whiten(v).norm_squared()
    }

    /// `Σ log L_kk = ½ log det A`.
    pub fn half_log_det(&self) -> f64 {
        (0..self.l.nrows()).map(|k| self.l[(k, k)].ln()).sum()
    }
}

/// Pivots below this fraction of the largest diagonal entry count as a
/// failed factorization.
const PIVOT_FLOOR: f64 = 1e-14;

fn try_cholesky(m: &DMatrix<f64>, max_diag: f64) -> Option<DMatrix<f64>> {
    let l = m.clone().cholesky()?.unpack();
    let floor = PIVOT_FLOOR * max_diag.max(0.0);
    if (0..l.nrows()).all(|k| l[(k, k)] * l[(k, k)] > floor) {
        Some(l)
    } else {
        None
    }
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Matrix size above which [`top_eigenpairs`] switches from a full
/// decomposition to subspace iteration.
const FULL_EIGEN_LIMIT: usize = 600;

/// Leading `r` eigenpairs of a symmetric matrix, eigenvalues in non-increasing
/// order and unit-norm eigenvectors as columns.
///
/// Eigenvector signs are fixed so that the entry of largest magnitude is
/// positive.
pub fn top_eigenpairs(m: &DMatrix<f64>, r: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if !m.is_square() {
        return Err(CoreError::Dimension(
            "eigenproblem matrix is not square".into(),
        ));
    }
    if r == 0 || r > n {
        return Err(CoreError::Invalid(format!(
            "requested {r} eigenpairs of a {n}x{n} matrix"
        )));
    }
    let (vals, vecs) = if n <= FULL_EIGEN_LIMIT {
        full_sorted(&symmetrize(m), r)
    } else {
        subspace_iteration(m, r)?
    };
    Ok((vals, fix_signs(vecs)))
}

fn full_sorted(m: &DMatrix<f64>, r: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order[..r].iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = DMatrix::from_columns(
        &order[..r]
            .iter()
            .map(|&k| eig.eigenvectors.column(k).into_owned())
            .collect::<Vec<_>>(),
    );
    (vals, vecs)
}

/// Block subspace iteration with Rayleigh-Ritz projection.
fn subspace_iteration(m: &DMatrix<f64>, r: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    let p = (2 * r + 10).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut q = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    q = q.qr().q();
    for _ in 0..1000 {
        let y = m * &q;
        let t = symmetrize(&(q.transpose() * &y));
        let (vals, vecs) = full_sorted(&t, p);
        let ritz = &q * &vecs;
        let my = &y * &vecs;
        let lead = vals[0].abs().max(f64::MIN_POSITIVE);
        let converged = (0..r).all(|k| {
            let res = my.column(k) - ritz.column(k) * vals[k];
            res.norm() <= 1e-11 * lead
        });
        if converged {
            return Ok((vals[..r].to_vec(), ritz.columns(0, r).into_owned()));
        }
        q = my.qr().q();
    }
    Err(CoreError::Numerical(
        "subspace iteration did not converge in 1000 sweeps".into(),
    ))
}

fn fix_signs(mut vecs: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in vecs.column_iter_mut() {
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }
    vecs
}
