use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FaError, Result};

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

/// Inverts an SPD matrix by Cholesky, escalating a diagonal jitter from
/// 1e-10 to 1e-6 before giving up.
pub(crate) fn spd_inverse(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(FaError::numerical(
            context,
            "precision matrix has non-finite entries",
        ));
    }
    let mut jitter = 0.0;
    loop {
        let mut m = a.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = m.cholesky() {
            return Ok(symmetrize(chol.inverse()));
        }
        jitter = if jitter == 0.0 {
            JITTER_START
        } else {
            jitter * 10.0
        };
        if jitter > JITTER_MAX * 1.0001 {
            return Err(FaError::numerical(
                context,
                format!(
                    "matrix is not positive definite (condition estimate {:.3e})",
                    condition_estimate(a)
                ),
            ));
        }
    }
}

pub(crate) fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    if a.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let eig = SymmetricEigen::new(symmetrize(a.clone())).eigenvalues;
    let max = eig.iter().fold(f64::MIN, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::MAX, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `trace(A B)` without forming the product.
pub(crate) fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// Draws from `N(mean, cov)` using a Cholesky factor of `cov`.
pub(crate) fn mvn_sample(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    let chol = cov
        .clone()
        .cholesky()
        .or_else(|| {
            let mut c = cov.clone();
            for i in 0..c.nrows() {
                c[(i, i)] += 1e-12;
            }
            c.cholesky()
        })
        .ok_or_else(|| {
            FaError::numerical("posterior sampling", "covariance is not positive definite")
        })?;
    Ok(mean + chol.l() * eps)
}
