//! Dense kernels in the weighted geometry. A grid-weighted inner product
//! `delta * <a, b>` is reduced to the Euclidean one by scaling with
//! `sqrt(delta)`, so plain Householder QR and SVD can be used.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{KinlrError, Result};

/// Relative size below which a QR pivot is treated as zero.
pub const QR_DEFICIENCY_RTOL: f64 = 1e-13;

/// Householder QR of `a` in the geometry `delta * x^T y`.
///
/// Returns `(q, r)` with `q` of shape `n x k`, `r` of shape `k x m` and
/// `k = min(n, m)`, `a = q r`, `q^T (delta q) = I` and a nonnegative
/// diagonal in `r`. Pivots below `QR_DEFICIENCY_RTOL * ||a||` are zeroed; the
/// corresponding `q` columns are still orthonormal completions.
pub(crate) fn qr_weighted(a: &DMatrix<f64>, delta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = a.shape();
    let k = n.min(m);
    if k == 0 {
        return (DMatrix::zeros(n, 0), DMatrix::zeros(0, m));
    }
    let sq = delta.sqrt();
    let scaled = a * sq;
    let norm = scaled.norm();
    let qr = scaled.qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
            r.row_mut(j).neg_mut();
        }
        if r[(j, j)].abs() <= QR_DEFICIENCY_RTOL * norm {
            r[(j, j)] = 0.0;
        }
    }
    q /= sq;
    (q, r)
}

/// Singular value decomposition `m = p diag(sigma) q^T` with `sigma`
/// sorted in descending order. Thin: `p` is `rows x k`, `q` is `cols x k`
/// with `k = min(rows, cols)`.
///
/// Runs on faer; the nalgebra SVD loses accuracy on rank-deficient input,
/// which is the common case for rounding cores.
pub(crate) fn svd_sorted(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    if k == 0 {
        return Ok((DMatrix::zeros(rows, 0), Vec::new(), DMatrix::zeros(cols, 0)));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(KinlrError::Numeric("non-finite entry in SVD input".into()));
    }
    let a = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let svd = a
        .thin_svd()
        .map_err(|e| KinlrError::Numeric(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let sigma = order.iter().map(|&i| s[i]).collect();
    let p = DMatrix::from_fn(rows, k, |i, j| u[(i, order[j])]);
    let q = DMatrix::from_fn(cols, k, |i, j| v[(i, order[j])]);
    Ok((p, sigma, q))
}

/// Eigendecomposition `a = t diag(lambda) t^T` of a symmetric matrix.
pub(crate) fn sym_eigen(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(KinlrError::Numeric(
            "non-finite entry in coefficient matrix".into(),
        ));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    Ok((eig.eigenvectors, eig.eigenvalues))
}

/// `a^T diag(w) b * delta`.
pub(crate) fn weighted_gram(
    a: &DMatrix<f64>,
    w: Option<&[f64]>,
    b: &DMatrix<f64>,
    delta: f64,
) -> DMatrix<f64> {
    match w {
        None => a.tr_mul(b) * delta,
        Some(w) => {
            let mut wb = b.clone();
            scale_rows(&mut wb, w);
            a.tr_mul(&wb) * delta
        }
    }
}

/// Multiplies row `k` of `m` by `w[k]` (a Hadamard product on every column).
pub(crate) fn scale_rows(m: &mut DMatrix<f64>, w: &[f64]) {
    let n = m.nrows();
    debug_assert_eq!(n, w.len());
    for col in m.as_mut_slice().chunks_exact_mut(n) {
        for (c, wk) in col.iter_mut().zip(w) {
            *c *= wk;
        }
    }
}

pub(crate) fn scaled_rows(m: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    scale_rows(&mut out, w);
    out
}

/// Largest entry of `|a^T (delta a) - I|`.
pub(crate) fn orthonormality_residual(a: &DMatrix<f64>, delta: f64) -> f64 {
    let g = a.tr_mul(a) * delta;
    let mut res: f64 = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            res = res.max((g[(i, j)] - target).abs());
        }
    }
    res
}
