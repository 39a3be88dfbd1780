//! Dense least squares via Householder QR with column equilibration.
//! Small systems only (tens of columns); no pivoting, rank deficiency is
//! detected on the R diagonal and reported as an error.

use ndarray::Array2;

use super::FitError;

/// Solve `min ||A x - b||_2` for full-column-rank A (m >= n). Columns are
/// scaled to unit norm before factorization so Vandermonde-style magnitude
/// spreads don't poison the rank test.
pub fn solve_least_squares(a: &Array2<f64>, b: &[f64]) -> Result<Vec<f64>, FitError> {
    let (m, n) = a.dim();
    assert_eq!(m, b.len(), "row count mismatch");
    if m < n {
        return Err(FitError::InsufficientPoints { have: m, need: n });
    }

    // Column scaling.
    let mut scale = vec![0.0f64; n];
    for j in 0..n {
        let norm: f64 = (0..m).map(|i| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(FitError::SingularSystem);
        }
        scale[j] = norm;
    }
    let mut r = Array2::<f64>::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            r[[i, j]] = a[[i, j]] / scale[j];
        }
    }
    let mut rhs = b.to_vec();

    // Householder sweep.
    for k in 0..n {
        let mut alpha: f64 = (k..m).map(|i| r[[i, k]] * r[[i, k]]).sum::<f64>().sqrt();
        if alpha == 0.0 {
            return Err(FitError::SingularSystem);
        }
        if r[[k, k]] > 0.0 {
            alpha = -alpha;
        }
        let mut v = vec![0.0f64; m - k];
        v[0] = r[[k, k]] - alpha;
        for i in (k + 1)..m {
            v[i - k] = r[[i, k]];
        }
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            return Err(FitError::SingularSystem);
        }
        r[[k, k]] = alpha;
        for i in (k + 1)..m {
            r[[i, k]] = 0.0;
        }
        for j in (k + 1)..n {
            let dot: f64 = (k..m).map(|i| v[i - k] * r[[i, j]]).sum();
            let coef = 2.0 * dot / vnorm2;
            for i in k..m {
                r[[i, j]] -= coef * v[i - k];
            }
        }
        let dot: f64 = (k..m).map(|i| v[i - k] * rhs[i]).sum();
        let coef = 2.0 * dot / vnorm2;
        for i in k..m {
            rhs[i] -= coef * v[i - k];
        }
    }

    // Rank test on the scaled R diagonal (columns had unit norm, so a
    // healthy diagonal entry is O(1)).
    let max_diag = (0..n).map(|j| r[[j, j]].abs()).fold(0.0f64, f64::max);
    let tol = 1e-10 * max_diag.max(1.0);
    for j in 0..n {
        if r[[j, j]].abs() < tol {
            return Err(FitError::SingularSystem);
        }
    }

    // Back substitution.
    let mut x = vec![0.0f64; n];
    for j in (0..n).rev() {
        let mut s = rhs[j];
        for k in (j + 1)..n {
            s -= r[[j, k]] * x[k];
        }
        x[j] = s / r[[j, j]];
    }
    for j in 0..n {
        x[j] /= scale[j];
    }
    Ok(x)
}
