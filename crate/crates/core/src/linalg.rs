//! Small dense linear-algebra helpers shared by the model code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Result, VgpdsError};

/// First relative jitter tried before every factorization.
pub const JITTER: f64 = 1e-6;
/// Single retry level when the first factorization fails.
pub const JITTER_RETRY: f64 = 1e-4;

/// A Cholesky factor together with the relative jitter that made it succeed.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    /// Relative jitter level (multiplies the reference scale).
    pub rel_jitter: f64,
    /// Absolute amount added to the diagonal.
    pub added: f64,
}

impl JitteredCholesky {
    pub fn log_det(&self) -> f64 {
        log_det(&self.chol)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Factorizes `a + rel·scale·I`, trying [`JITTER`] and then [`JITTER_RETRY`].
pub fn cholesky_jittered(a: &DMatrix<f64>, scale: f64, what: &str) -> Result<JitteredCholesky> {
    for rel in [JITTER, JITTER_RETRY] {
        let added = rel * scale;
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += added;
        }
        if let Some(chol) = m.cholesky() {
            if chol.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
                return Ok(JitteredCholesky { chol, rel_jitter: rel, added });
            }
        }
    }
    Err(VgpdsError::NotPositiveDefinite(what.to_string()))
}

/// Factorizes `a` with exactly the absolute diagonal addition `added` (no retry).
pub fn cholesky_fixed(a: &DMatrix<f64>, rel: f64, added: f64, what: &str) -> Result<JitteredCholesky> {
    let mut m = a.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += added;
    }
    m.cholesky()
        .map(|chol| JitteredCholesky { chol, rel_jitter: rel, added })
        .ok_or_else(|| VgpdsError::NotPositiveDefinite(what.to_string()))
}

/// Plain Cholesky without jitter; used for matrices with eigenvalues bounded away from zero.
pub fn cholesky(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    a.clone()
        .cholesky()
        .ok_or_else(|| VgpdsError::NotPositiveDefinite(what.to_string()))
}

pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// tr(A B) without forming the product.
pub fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut s = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

/// Σ_ij A_ij B_ij.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn rows_to_matrix(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(VgpdsError::Shape(format!("expected rows of length {ncols}")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn column(m: &DMatrix<f64>, j: usize) -> DVector<f64> {
    m.column(j).into_owned()
}

/// Selects the given rows of a matrix, in order.
pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Selects the given columns of a matrix, in order.
pub fn select_cols(m: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}
