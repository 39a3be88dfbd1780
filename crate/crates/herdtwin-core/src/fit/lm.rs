//! Damped Gauss-Newton (Levenberg-Marquardt) for small nonlinear least
//! squares problems. The damped step solves the augmented linear system
//! [J; sqrt(lambda) D] delta = [-r; 0] by QR, with D the column norms of J,
//! which keeps the step well-posed even for rank-deficient Jacobians.

use ndarray::Array2;

use super::linalg::solve_least_squares;

#[derive(Debug, Clone)]
pub struct LmOptions {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    /// Convergence: infinity norm of the gradient J^T r.
    pub gradient_tol: f64,
    /// Convergence: relative SSE improvement of an accepted step.
    pub sse_rel_tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            // Edge shoulders fit as far-off-range centers with huge
            // amplitudes; LM crawls a long flat valley to reach them, so the
            // cap is generous. Iterations on 24-point problems cost almost
            // nothing.
            max_iterations: 4000,
            initial_lambda: 1e-3,
            gradient_tol: 1e-8,
            sse_rel_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: Vec<f64>,
    pub sse: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// `eval(params, residuals, jacobian)` fills `residuals` (model - data) and
/// `jacobian[(i, j)] = d residual_i / d param_j`.
pub fn minimize<F>(eval: F, x0: &[f64], n_residuals: usize, opts: &LmOptions) -> LmOutcome
where
    F: Fn(&[f64], &mut [f64], &mut Array2<f64>),
{
    let n_params = x0.len();
    let mut params = x0.to_vec();
    let mut residuals = vec![0.0; n_residuals];
    let mut jacobian = Array2::<f64>::zeros((n_residuals, n_params));
    let sse_of = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();

    eval(&params, &mut residuals, &mut jacobian);
    let mut sse = sse_of(&residuals);
    if !sse.is_finite() {
        return LmOutcome { params, sse, converged: false, iterations: 0 };
    }
    let mut lambda = opts.initial_lambda;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iterations {
        iterations += 1;

        // Gradient test at the current point.
        let mut gmax = 0.0f64;
        for j in 0..n_params {
            let g: f64 = (0..n_residuals).map(|i| jacobian[[i, j]] * residuals[i]).sum();
            gmax = gmax.max(g.abs());
        }
        if gmax < opts.gradient_tol {
            converged = true;
            break;
        }

        // Column scales of J, floored so dead parameters stay damped.
        let mut d = vec![0.0f64; n_params];
        for j in 0..n_params {
            let norm: f64 =
                (0..n_residuals).map(|i| jacobian[[i, j]] * jacobian[[i, j]]).sum::<f64>().sqrt();
            d[j] = norm.max(1e-12);
        }

        // Augmented system.
        let sqrt_l = lambda.sqrt();
        let mut aug = Array2::<f64>::zeros((n_residuals + n_params, n_params));
        let mut rhs = vec![0.0f64; n_residuals + n_params];
        for i in 0..n_residuals {
            for j in 0..n_params {
                aug[[i, j]] = jacobian[[i, j]];
            }
            rhs[i] = -residuals[i];
        }
        for j in 0..n_params {
            aug[[n_residuals + j, j]] = sqrt_l * d[j];
        }

        let step = match solve_least_squares(&aug, &rhs) {
            Ok(s) => s,
            Err(_) => {
                // Should not happen with the damping rows in place; treat as
                // a rejected step.
                lambda *= 10.0;
                if lambda > 1e12 {
                    break;
                }
                continue;
            }
        };

        let trial: Vec<f64> = params.iter().zip(&step).map(|(p, s)| p + s).collect();
        let mut trial_res = vec![0.0; n_residuals];
        let mut trial_jac = Array2::<f64>::zeros((n_residuals, n_params));
        eval(&trial, &mut trial_res, &mut trial_jac);
        let trial_sse = sse_of(&trial_res);

        if trial_sse.is_finite() && trial_sse < sse {
            let rel = (sse - trial_sse) / sse.max(f64::MIN_POSITIVE);
            params = trial;
            residuals = trial_res;
            jacobian = trial_jac;
            sse = trial_sse;
            lambda = (lambda / 10.0).max(1e-12);
            if rel < opts.sse_rel_tol {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }

    LmOutcome { params, sse, converged, iterations }
}
