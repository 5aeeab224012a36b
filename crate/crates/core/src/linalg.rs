//! Small dense helpers shared by the covariance families and models.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

pub(crate) fn cholesky(a: &DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(a.clone())
        .ok_or_else(|| Error::Conditioning(format!("{context}: matrix is not positive definite")))
}

pub(crate) fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub(crate) fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `Σ_ij a_ij b_ij`.
pub(crate) fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Row-wise inner products `Σ_j a_ij b_ij` for every row `i`.
pub(crate) fn row_dots(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows()];
    for j in 0..a.ncols() {
        for ((o, x), y) in out.iter_mut().zip(a.column(j).iter()).zip(b.column(j).iter()) {
            *o += x * y;
        }
    }
    out
}

/// Sums of `g` along each pair of symmetric off-diagonals:
/// `s_k = Σ_{|i-j|=k} g_ij` for `k = 0..n`.
pub(crate) fn toeplitz_band_sums(g: &DMatrix<f64>) -> Vec<f64> {
    let n = g.nrows();
    let mut s = vec![0.0; n];
    for j in 0..n {
        for i in 0..n {
            s[i.abs_diff(j)] += g[(i, j)];
        }
    }
    s
}

/// Column-major unit matrix of size `n`.
pub(crate) fn eye(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}
