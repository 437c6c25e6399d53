//! Dense Cholesky plumbing shared by the likelihood, simulator, and predictor.
//!
//! Factorizations go through LAPACK (`dpotrf` via ndarray-linalg); the
//! triangular solves are hand-rolled forward/backward substitution, which is
//! O(n^2) and never the bottleneck. BLAS is pinned to a single thread so that
//! all parallelism lives in rayon and outputs do not depend on thread count.

use ndarray::Array2;
use ndarray_linalg::cholesky::{CholeskyInto, UPLO};
use std::sync::Once;

use crate::error::{Error, Result};

/// Diagonal jitter added to every covariance matrix at factorization time.
/// Guards against numerical semi-definiteness at near-duplicate lags; not a
/// model parameter and never reported.
pub const CHOL_JITTER: f64 = 1e-8;

static BLAS_SINGLE_THREAD: Once = Once::new();

fn pin_blas_threads() {
    BLAS_SINGLE_THREAD.call_once(|| {
        // Must run before OpenBLAS initializes its thread pool.
        std::env::set_var("OPENBLAS_NUM_THREADS", "1");
    });
}

/// Lower Cholesky factor of `a + jitter*I`. Consumes `a`; the upper triangle
/// of the result is zero.
pub fn cholesky_lower(mut a: Array2<f64>) -> Result<Array2<f64>> {
    pin_blas_threads();
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    for i in 0..n {
        a[[i, i]] += CHOL_JITTER;
    }
    a.cholesky_into(UPLO::Lower)
        .map_err(|_| Error::NotPositiveDefinite)
}

/// Solves L w = b in place for lower-triangular L.
pub fn solve_lower_inplace(l: &Array2<f64>, b: &mut [f64]) {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    let ls = l.as_slice().expect("factor is standard layout");
    for i in 0..n {
        let row = &ls[i * n..i * n + i];
        let mut acc = b[i];
        for (lij, bj) in row.iter().zip(b.iter()) {
            acc -= lij * bj;
        }
        b[i] = acc / ls[i * n + i];
    }
}

/// Solves L^T x = b in place for lower-triangular L.
pub fn solve_lower_transpose_inplace(l: &Array2<f64>, b: &mut [f64]) {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    let ls = l.as_slice().expect("factor is standard layout");
    for i in (0..n).rev() {
        let mut acc = b[i];
        for j in i + 1..n {
            acc -= ls[j * n + i] * b[j];
        }
        b[i] = acc / ls[i * n + i];
    }
}

/// Log-determinant of the factored matrix, from the factor diagonal.
pub fn log_det_from_factor(l: &Array2<f64>) -> f64 {
    (0..l.nrows()).map(|i| 2.0 * l[[i, i]].ln()).sum()
}

/// Inverts a small symmetric positive definite matrix via its Cholesky
/// factorization, without jitter. Returns `None` when the matrix is not PD.
/// Used for the 4x4 observed information; not a model-covariance path.
pub fn invert_spd_small(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    // Columns of the inverse via two triangular solves against unit vectors.
    let mut inv = vec![vec![0.0; n]; n];
    for col in 0..n {
        let mut x = vec![0.0; n];
        x[col] = 1.0;
        for i in 0..n {
            let mut s = x[i];
            for k in 0..i {
                s -= l[i][k] * x[k];
            }
            x[i] = s / l[i][i];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= l[k][i] * x[k];
            }
            x[i] = s / l[i][i];
        }
        for (row, xi) in x.iter().enumerate() {
            inv[row][col] = *xi;
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_and_solves_round_trip() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let l = cholesky_lower(a.clone()).unwrap();
        let mut b = vec![1.0, 2.0, 3.0];
        let x0 = b.clone();
        solve_lower_inplace(&l, &mut b);
        solve_lower_transpose_inplace(&l, &mut b);
        // b now holds (A + jitter I)^{-1} x0; multiply back.
        for i in 0..3 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += (a[[i, j]] + if i == j { CHOL_JITTER } else { 0.0 }) * b[j];
            }
            assert_abs_diff_eq!(acc, x0[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn log_det_matches_direct() {
        let a = array![[2.0, 0.3], [0.3, 1.5]];
        let l = cholesky_lower(a).unwrap();
        let expect = (2.0f64 + CHOL_JITTER) * (1.5 + CHOL_JITTER) - 0.09;
        assert_abs_diff_eq!(log_det_from_factor(&l), expect.ln(), epsilon = 1e-12);
    }

    #[test]
    fn spd_inverse_of_identity_like() {
        let a = vec![vec![2.0, 0.0], vec![0.0, 4.0]];
        let inv = invert_spd_small(&a).unwrap();
        assert_abs_diff_eq!(inv[0][0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(inv[1][1], 0.25, epsilon = 1e-14);
        let not_pd = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(invert_spd_small(&not_pd).is_none());
    }
}
