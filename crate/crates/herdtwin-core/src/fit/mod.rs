//! Four-family curve fitting of 24-hour profiles: sums of Gaussians, sums of
//! sines, polynomials, and a truncated Fourier series with a fitted
//! fundamental. Linear families go through exact QR least squares; the
//! nonlinear ones run multi-start Levenberg-Marquardt from seeded,
//! data-driven initial guesses.

mod linalg;
mod lm;

pub use lm::{LmOptions, LmOutcome};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FitError {
    #[error("malformed parameters: {0}")]
    MalformedParams(String),
    #[error("{have} points cannot determine {need} parameters")]
    InsufficientPoints { have: usize, need: usize },
    #[error("linear system is rank deficient")]
    SingularSystem,
    #[error("invalid family: {0}")]
    InvalidFamily(String),
    #[error("arity grid is empty")]
    EmptyGrid,
}

/// Model family with its arity. Fourier's fundamental frequency is a fitted
/// parameter (the last slot of `params`), not part of the family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CurveFamily {
    GaussianSum(usize),
    SineSum(usize),
    Polynomial(usize),
    FourierSeries(usize),
}

impl CurveFamily {
    pub fn validate(&self) -> Result<(), FitError> {
        match *self {
            CurveFamily::GaussianSum(n) | CurveFamily::SineSum(n) | CurveFamily::FourierSeries(n)
                if n == 0 =>
            {
                Err(FitError::InvalidFamily(format!("{self:?} needs at least one term")))
            }
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            CurveFamily::GaussianSum(n) => 3 * n,
            CurveFamily::SineSum(n) => 3 * n,
            CurveFamily::Polynomial(d) => d + 1,
            CurveFamily::FourierSeries(n) => 2 * n + 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CurveFamily::GaussianSum(_) => "gaussian",
            CurveFamily::SineSum(_) => "sine",
            CurveFamily::Polynomial(_) => "polynomial",
            CurveFamily::FourierSeries(_) => "fourier",
        }
    }

    pub fn arity(&self) -> usize {
        match *self {
            CurveFamily::GaussianSum(n)
            | CurveFamily::SineSum(n)
            | CurveFamily::Polynomial(n)
            | CurveFamily::FourierSeries(n) => n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCurve {
    pub family: CurveFamily,
    /// GaussianSum/SineSum: (a, b, c) triples. Polynomial: coefficients
    /// low-to-high. Fourier: a0, (a_i, b_i) pairs, then the fundamental w.
    pub params: Vec<f64>,
    pub sse: f64,
    /// SSE / point count.
    pub residual_variance: f64,
    pub converged: bool,
    pub iterations: usize,
}

fn check_params(family: CurveFamily, params: &[f64]) -> Result<(), FitError> {
    family.validate()?;
    if params.len() != family.param_count() {
        return Err(FitError::MalformedParams(format!(
            "{:?} expects {} parameters, got {}",
            family,
            family.param_count(),
            params.len()
        )));
    }
    if let CurveFamily::GaussianSum(n) = family {
        for k in 0..n {
            if params[3 * k + 2] == 0.0 {
                return Err(FitError::MalformedParams(format!("gaussian term {k} has zero width")));
            }
        }
    }
    if let CurveFamily::FourierSeries(_) = family {
        let w = *params.last().unwrap();
        if !(w > 0.0) {
            return Err(FitError::MalformedParams(format!("fourier fundamental w = {w}")));
        }
    }
    Ok(())
}

fn eval_raw(family: CurveFamily, params: &[f64], x: f64) -> f64 {
    match family {
        CurveFamily::GaussianSum(n) => (0..n)
            .map(|k| {
                let (a, b, c) = (params[3 * k], params[3 * k + 1], params[3 * k + 2]);
                let z = (x - b) / c;
                a * (-z * z).exp()
            })
            .sum(),
        CurveFamily::SineSum(n) => (0..n)
            .map(|k| {
                let (a, b, c) = (params[3 * k], params[3 * k + 1], params[3 * k + 2]);
                a * (b * x + c).sin()
            })
            .sum(),
        CurveFamily::Polynomial(d) => {
            let mut acc = params[d];
            for j in (0..d).rev() {
                acc = acc * x + params[j];
            }
            acc
        }
        CurveFamily::FourierSeries(n) => {
            let w = params[2 * n + 1];
            let mut acc = params[0];
            for i in 1..=n {
                let (a, b) = (params[2 * i - 1], params[2 * i]);
                acc += a * (i as f64 * w * x).cos() + b * (i as f64 * w * x).sin();
            }
            acc
        }
    }
}

/// Evaluate a fitted curve at `x` hours. No clamping.
pub fn evaluate(curve: &FittedCurve, x: f64) -> Result<f64, FitError> {
    check_params(curve.family, &curve.params)?;
    Ok(eval_raw(curve.family, &curve.params, x))
}

fn sse_of(family: CurveFamily, params: &[f64], points: &[(f64, f64)]) -> f64 {
    points.iter().map(|&(x, y)| (eval_raw(family, params, x) - y).powi(2)).sum()
}

// ---------------------------------------------------------------------------
// Linear paths

fn fit_polynomial(degree: usize, points: &[(f64, f64)]) -> Result<FittedCurve, FitError> {
    let m = points.len();
    let n = degree + 1;
    let mut a = Array2::<f64>::zeros((m, n));
    let mut b = vec![0.0; m];
    for (i, &(x, y)) in points.iter().enumerate() {
        let mut pow = 1.0;
        for j in 0..n {
            a[[i, j]] = pow;
            pow *= x;
        }
        b[i] = y;
    }
    let params = linalg::solve_least_squares(&a, &b)?;
    let family = CurveFamily::Polynomial(degree);
    let sse = sse_of(family, &params, points);
    Ok(FittedCurve {
        family,
        params,
        sse,
        residual_variance: sse / m as f64,
        converged: true,
        iterations: 0,
    })
}

/// Linear Fourier solve at a fixed fundamental. Returns (coefficients, sse).
fn fourier_at(
    harmonics: usize,
    w: f64,
    points: &[(f64, f64)],
) -> Result<(Vec<f64>, f64), FitError> {
    let m = points.len();
    let n = 2 * harmonics + 1;
    let mut a = Array2::<f64>::zeros((m, n));
    let mut b = vec![0.0; m];
    for (i, &(x, y)) in points.iter().enumerate() {
        a[[i, 0]] = 1.0;
        for k in 1..=harmonics {
            a[[i, 2 * k - 1]] = (k as f64 * w * x).cos();
            a[[i, 2 * k]] = (k as f64 * w * x).sin();
        }
        b[i] = y;
    }
    let coefs = linalg::solve_least_squares(&a, &b)?;
    let mut params = coefs.clone();
    params.push(w);
    let sse = sse_of(CurveFamily::FourierSeries(harmonics), &params, points);
    Ok((coefs, sse))
}

/// Daily periodicity bounds the plausible fundamental: periods from 12 h to
/// 48 h on the hourly grid.
const FOURIER_W_LO: f64 = 2.0 * std::f64::consts::PI / 48.0;
const FOURIER_W_HI: f64 = 2.0 * std::f64::consts::PI / 12.0;

fn fit_fourier(harmonics: usize, points: &[(f64, f64)]) -> Result<FittedCurve, FitError> {
    let mut evals = 0usize;
    let mut sse_at = |w: f64| -> f64 {
        evals += 1;
        fourier_at(harmonics, w, points).map(|(_, sse)| sse).unwrap_or(f64::INFINITY)
    };

    // Coarse scan to bracket the best basin, then golden-section refinement.
    const SCAN: usize = 25;
    let mut best_i = 0;
    let mut best_sse = f64::INFINITY;
    let grid: Vec<f64> = (0..SCAN)
        .map(|i| FOURIER_W_LO + (FOURIER_W_HI - FOURIER_W_LO) * i as f64 / (SCAN - 1) as f64)
        .collect();
    for (i, &w) in grid.iter().enumerate() {
        let s = sse_at(w);
        if s < best_sse {
            best_sse = s;
            best_i = i;
        }
    }
    if best_sse.is_infinite() {
        return Err(FitError::SingularSystem);
    }
    let mut lo = grid[best_i.saturating_sub(1)];
    let mut hi = grid[(best_i + 1).min(SCAN - 1)];

    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let mut fc = sse_at(c);
    let mut fd = sse_at(d);
    while hi - lo > 1e-10 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = sse_at(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = sse_at(d);
        }
    }
    let w = (lo + hi) / 2.0;
    let (coefs, sse) = fourier_at(harmonics, w, points)?;
    let mut params = coefs;
    params.push(w);
    Ok(FittedCurve {
        family: CurveFamily::FourierSeries(harmonics),
        params,
        sse,
        residual_variance: sse / points.len() as f64,
        converged: true,
        iterations: evals,
    })
}

// ---------------------------------------------------------------------------
// Nonlinear paths

fn gaussian_eval(points: &[(f64, f64)]) -> impl Fn(&[f64], &mut [f64], &mut Array2<f64>) + '_ {
    |p: &[f64], res: &mut [f64], jac: &mut Array2<f64>| {
        let n = p.len() / 3;
        for (i, &(x, y)) in points.iter().enumerate() {
            let mut sum = 0.0;
            for k in 0..n {
                let (a, b, c) = (p[3 * k], p[3 * k + 1], p[3 * k + 2]);
                if c.abs() < 1e-300 {
                    // Degenerate width: dead term, zero partials. The step
                    // that produced it will be rejected on SSE.
                    jac[[i, 3 * k]] = 0.0;
                    jac[[i, 3 * k + 1]] = 0.0;
                    jac[[i, 3 * k + 2]] = 0.0;
                    continue;
                }
                let z = (x - b) / c;
                let e = (-z * z).exp();
                sum += a * e;
                jac[[i, 3 * k]] = e;
                jac[[i, 3 * k + 1]] = a * e * 2.0 * (x - b) / (c * c);
                jac[[i, 3 * k + 2]] = a * e * 2.0 * (x - b) * (x - b) / (c * c * c);
            }
            res[i] = sum - y;
        }
    }
}

fn sine_eval(points: &[(f64, f64)]) -> impl Fn(&[f64], &mut [f64], &mut Array2<f64>) + '_ {
    |p: &[f64], res: &mut [f64], jac: &mut Array2<f64>| {
        let n = p.len() / 3;
        for (i, &(x, y)) in points.iter().enumerate() {
            let mut sum = 0.0;
            for k in 0..n {
                let (a, b, c) = (p[3 * k], p[3 * k + 1], p[3 * k + 2]);
                let (s, co) = (b * x + c).sin_cos();
                sum += a * s;
                jac[[i, 3 * k]] = s;
                jac[[i, 3 * k + 1]] = a * x * co;
                jac[[i, 3 * k + 2]] = a * co;
            }
            res[i] = sum - y;
        }
    }
}

/// Peak-picking initialization: centers at the n largest local maxima (ties
/// toward lower x), widths 24/(2n), amplitudes the local values. Missing
/// maxima are padded with evenly spaced centers.
fn gaussian_base_init(n: usize, points: &[(f64, f64)]) -> Vec<f64> {
    let m = points.len();
    let mut maxima: Vec<usize> = (0..m)
        .filter(|&i| {
            let left_ok = i == 0 || points[i].1 >= points[i - 1].1;
            let right_ok = i == m - 1 || points[i].1 >= points[i + 1].1;
            left_ok && right_ok
        })
        .collect();
    maxima.sort_by(|&i, &j| {
        points[j].1.partial_cmp(&points[i].1).unwrap().then(points[i].0.partial_cmp(&points[j].0).unwrap())
    });
    let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let width = 24.0 / (2.0 * n as f64);
    let mut params = Vec::with_capacity(3 * n);
    for k in 0..n {
        let (center, amp) = if k < maxima.len() {
            (points[maxima[k]].0, points[maxima[k]].1)
        } else {
            // Evenly spaced filler centers; amplitude from the nearest point.
            let frac = (k - maxima.len()) as f64 + 0.5;
            let denom = (n - maxima.len()) as f64;
            let cx = x_min + (x_max - x_min) * frac / denom;
            let nearest = points
                .iter()
                .min_by(|a, b| (a.0 - cx).abs().partial_cmp(&(b.0 - cx).abs()).unwrap())
                .unwrap();
            (cx, nearest.1)
        };
        params.extend_from_slice(&[amp, center, width]);
    }
    params
}

/// Gaussian tails are log-quadratic, so three same-signed, monotonically
/// decaying residuals at a boundary determine the off-range term in closed
/// form from two log-ratios. This is the only way edge shoulders (centers far
/// outside the data, enormous amplitudes) become reachable: LM cannot crawl
/// there from an in-range start.
fn edge_shoulder_seed(r: [(f64, f64); 3]) -> Option<[f64; 3]> {
    let [(x0, r0), (_, r1), (_, r2)] = r;
    let sign = r0.signum();
    if r.iter().any(|&(_, v)| v.signum() != sign || v.abs() < 1e-9) {
        return None;
    }
    if !(r0.abs() > r1.abs() && r1.abs() > r2.abs()) {
        return None;
    }
    let rho0 = (r0 / r1).ln().abs();
    let rho1 = (r1 / r2).ln().abs();
    if rho1 <= rho0 {
        return None; // not steepening away from a far center
    }
    let c_sq = 2.0 / (rho1 - rho0);
    let c = c_sq.sqrt();
    // Distance of the center beyond the edge point, in edge-outward terms.
    let dist = (rho0 * c_sq - 1.0) / 2.0;
    if !(dist > 0.0 && dist.powi(2) / c_sq < 500.0) {
        return None; // in-range center, or amplitude would overflow
    }
    let a = r0 * (dist * dist / c_sq).exp();
    // Caller mirrors x for the right edge; here the center sits below x0.
    Some([a, x0 - dist, c])
}

/// Greedy residual pursuit: terms enter one at a time at the residual's
/// dominant peak (half-max width estimate, signed amplitude; closed-form
/// shoulder seeds at the boundaries), and the whole sum is re-polished after
/// each addition. On data that really is a sum of bumps this walks into the
/// global basin where blind multi-start stalls.
///
/// With `defer_edges` the interior humps are consumed first and boundary
/// peaks wait until nothing comparable remains inside: edge residuals are
/// contaminated by overlapping interior terms, and the shoulder closed form
/// only reads cleanly once those are gone.
fn gaussian_greedy_candidate(
    n: usize,
    points: &[(f64, f64)],
    defer_edges: bool,
    opts: &LmOptions,
) -> Vec<f64> {
    let value = |params: &[f64], x: f64| -> f64 {
        params
            .chunks_exact(3)
            .map(|t| {
                let z = (x - t[1]) / t[2];
                t[0] * (-z * z).exp()
            })
            .sum()
    };
    let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let span = (x_max - x_min).max(1.0);

    let mut params: Vec<f64> = Vec::with_capacity(3 * n);
    for _ in 0..n {
        let resid: Vec<(f64, f64)> =
            points.iter().map(|&(x, y)| (x, y - value(&params, x))).collect();
        let m = resid.len();
        let abs_peak = |range: std::ops::Range<usize>| {
            range.max_by(|&a, &b| resid[a].1.abs().partial_cmp(&resid[b].1.abs()).unwrap())
        };
        let global = abs_peak(0..m).unwrap();
        let peak = if defer_edges && m > 2 {
            let interior = abs_peak(1..m - 1).unwrap();
            if resid[interior].1.abs() >= 0.25 * resid[global].1.abs() {
                interior
            } else {
                global
            }
        } else {
            global
        };
        let (px, py) = resid[peak];

        let shoulder = if peak == 0 && m >= 3 {
            edge_shoulder_seed([resid[0], resid[1], resid[2]])
        } else if peak == m - 1 && m >= 3 {
            // Mirror x so the right edge looks like a left edge.
            edge_shoulder_seed([
                (-resid[m - 1].0, resid[m - 1].1),
                (-resid[m - 2].0, resid[m - 2].1),
                (-resid[m - 3].0, resid[m - 3].1),
            ])
            .map(|[a, b, c]| [a, -b, c])
        } else {
            None
        };

        let (seed_term, window) = match shoulder {
            Some(term) => {
                // Support of a shoulder: the same-signed monotone run off the
                // edge, plus one point of slack.
                let mut run = 1;
                if peak == 0 {
                    while run < m
                        && resid[run].1.abs() < resid[run - 1].1.abs()
                        && (resid[run].1 >= 0.0) == (py >= 0.0)
                    {
                        run += 1;
                    }
                    (term, 0..(run + 1).min(m))
                } else {
                    while run < m
                        && resid[m - 1 - run].1.abs() < resid[m - run].1.abs()
                        && (resid[m - 1 - run].1 >= 0.0) == (py >= 0.0)
                    {
                        run += 1;
                    }
                    (term, m - (run + 1).min(m)..m)
                }
            }
            None => {
                // Walk outward while the residual stays same-signed above
                // half-max.
                let half = py.abs() / 2.0;
                let same_lobe = |v: f64| v.abs() > half && (v >= 0.0) == (py >= 0.0);
                let mut left = peak;
                while left > 0 && same_lobe(resid[left - 1].1) {
                    left -= 1;
                }
                let mut right = peak;
                while right + 1 < m && same_lobe(resid[right + 1].1) {
                    right += 1;
                }
                let half_width = ((resid[right].0 - resid[left].0) / 2.0).max(0.5);
                let c = (half_width / (2f64.ln()).sqrt()).clamp(0.3, span);
                ([py, px, c], left.saturating_sub(2)..(right + 3).min(m))
            }
        };

        // Refine the new term ALONE against its own support window. Fitting
        // one term against the whole residual runs away to an enormous
        // super-wide gaussian standing in for the baseline; a global
        // re-polish here would likewise let earlier terms drift into
        // cancelling configurations and corrupt what the next step reads.
        // The caller's main loop does the one full polish at the end.
        let support = &resid[window];
        if support.len() >= 4 {
            let local = lm::minimize(gaussian_eval(support), &seed_term, support.len(), opts);
            if local.sse.is_finite() && local.params[2].abs() > 1e-6 {
                params.extend_from_slice(&local.params);
                continue;
            }
        }
        params.extend_from_slice(&seed_term);
    }
    params
}

/// Two-stage pursuit for data with edge shoulders: the interior structure is
/// fitted first on edge-masked points, so the leftover edge residuals expose
/// the shoulders' own decay, clean enough for the closed form to read. The
/// two reserved terms then complete the sum (falling back to plain bumps when
/// no shoulder shape is present).
fn gaussian_masked_greedy_candidate(
    n: usize,
    points: &[(f64, f64)],
    opts: &LmOptions,
) -> Vec<f64> {
    let m = points.len();
    if n < 3 || m < 10 {
        return gaussian_greedy_candidate(n, points, true, opts);
    }
    let value = |params: &[f64], x: f64| -> f64 {
        params
            .chunks_exact(3)
            .map(|t| {
                let z = (x - t[1]) / t[2];
                t[0] * (-z * z).exp()
            })
            .sum()
    };
    let mut params = gaussian_greedy_candidate(n - 2, &points[2..m - 2], false, opts);
    for _ in 0..2 {
        let resid: Vec<(f64, f64)> =
            points.iter().map(|&(x, y)| (x, y - value(&params, x))).collect();
        let left = edge_shoulder_seed([resid[0], resid[1], resid[2]]);
        let right = edge_shoulder_seed([
            (-resid[m - 1].0, resid[m - 1].1),
            (-resid[m - 2].0, resid[m - 2].1),
            (-resid[m - 3].0, resid[m - 3].1),
        ])
        .map(|[a, b, c]| [a, -b, c]);
        let term = match (left, right) {
            (Some(l), Some(r)) => {
                if resid[0].1.abs() >= resid[m - 1].1.abs() {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => {
                // No shoulder shape on either edge: a plain bump at the
                // residual's dominant point.
                let peak = resid
                    .iter()
                    .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                    .copied()
                    .unwrap();
                [peak.1, peak.0, 2.0]
            }
        };
        params.extend_from_slice(&term);
    }
    params
}

/// Variable-projection refinement for gaussian sums. Amplitudes enter the
/// model linearly, so each evaluation solves them exactly by least squares
/// and the search runs only over centers and widths (Kaufman's approximation
/// supplies the Jacobian). This straightens the exponential amplitude-center
/// valleys that full LM cannot crawl in finite time: an edge shoulder's
/// center walks off-range freely while its amplitude tracks along for free.
fn gaussian_varpro_refine(
    start: &[f64],
    points: &[(f64, f64)],
    opts: &LmOptions,
) -> Option<Vec<f64>> {
    let n = start.len() / 3;
    let m = points.len();
    if m < n || n == 0 {
        return None;
    }
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let design = |bc: &[f64]| -> Array2<f64> {
        let mut a = Array2::<f64>::zeros((m, n));
        for (i, &(x, _)) in points.iter().enumerate() {
            for k in 0..n {
                let (b, c) = (bc[2 * k], bc[2 * k + 1]);
                let z = (x - b) / c;
                a[[i, k]] = (-z * z).exp();
            }
        }
        a
    };
    let eval = |bc: &[f64], res: &mut [f64], jac: &mut Array2<f64>| {
        let a = design(bc);
        match linalg::solve_least_squares(&a, &y) {
            Ok(amps) => {
                for i in 0..m {
                    let mut s = 0.0;
                    for k in 0..n {
                        s += a[[i, k]] * amps[k];
                    }
                    res[i] = s - y[i];
                    let x = points[i].0;
                    for k in 0..n {
                        let (b, c) = (bc[2 * k], bc[2 * k + 1]);
                        let d = x - b;
                        let g = amps[k] * a[[i, k]];
                        jac[[i, 2 * k]] = g * 2.0 * d / (c * c);
                        jac[[i, 2 * k + 1]] = g * 2.0 * d * d / (c * c * c);
                    }
                }
            }
            Err(_) => {
                // Degenerate design (coincident or collapsed terms): make the
                // step look terrible instead of aborting the whole search.
                res.fill(1e6);
                jac.fill(0.0);
            }
        }
    };
    let bc0: Vec<f64> = start.chunks_exact(3).flat_map(|t| [t[1], t[2]]).collect();
    let out = lm::minimize(eval, &bc0, m, opts);
    if !out.sse.is_finite() {
        return None;
    }
    let a = design(&out.params);
    let amps = linalg::solve_least_squares(&a, &y).ok()?;
    Some((0..n).flat_map(|k| [amps[k], out.params[2 * k], out.params[2 * k + 1]]).collect())
}

/// Off-range hypothesis grid: (distance beyond the edge as a span fraction,
/// distance/width ratio). Spans the spectrum from a wide hump just past the
/// boundary to a far steep shoulder whose tail alone reaches the data.
const SHOULDER_CELLS: [(f64, f64); 11] = [
    (0.04, 0.3),
    (0.04, 1.0),
    (0.09, 0.5),
    (0.174, 3.0),
    (0.174, 6.0),
    (0.435, 3.0),
    (0.435, 6.0),
    (1.087, 3.0),
    (1.087, 6.0),
    (2.174, 3.0),
    (2.174, 6.0),
];

/// Copies of `base` hypothesizing an off-range term. A steep decay at a data
/// boundary is a gaussian centered beyond it, but starts with every center
/// in-range collapse such a term onto a one-sample spike at the boundary
/// instead. Each copy replaces the edge-nearest term with a unit-amplitude
/// gaussian planted beyond one edge, over the coarse grid; the optimizer
/// slides the geometry home from there.
fn gaussian_edge_swaps(base: &[f64], points: &[(f64, f64)]) -> Vec<Vec<f64>> {
    let n = base.len() / 3;
    if n < 2 || points.len() < 8 {
        return Vec::new();
    }
    let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let span = (x_max - x_min).max(1e-9);
    let nearest = |edge: f64| -> usize {
        (0..n)
            .min_by(|&i, &j| {
                (base[3 * i + 1] - edge)
                    .abs()
                    .partial_cmp(&(base[3 * j + 1] - edge).abs())
                    .unwrap()
            })
            .unwrap()
    };
    let (left, right) = (nearest(x_min), nearest(x_max));
    let mut out = Vec::with_capacity(2 * SHOULDER_CELLS.len());
    for (frac, ratio) in SHOULDER_CELLS {
        let dist = frac * span;
        let mut h = base.to_vec();
        h[3 * left] = 1.0;
        h[3 * left + 1] = x_min - dist;
        h[3 * left + 2] = dist / ratio;
        out.push(h);
        let mut h = base.to_vec();
        h[3 * right] = 1.0;
        h[3 * right + 1] = x_max + dist;
        h[3 * right + 2] = dist / ratio;
        out.push(h);
    }
    out
}

/// Correlation-bin initialization for sums of sines: project onto harmonics
/// of the span, take the n strongest, with a near-DC term standing in for
/// the mean when it matters.
fn sine_base_init(n: usize, points: &[(f64, f64)]) -> Vec<f64> {
    let m = points.len();
    let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let x_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let span = (x_max - x_min).max(1e-9);
    let period = span * m as f64 / (m as f64 - 1.0).max(1.0);
    let mean = points.iter().map(|p| p.1).sum::<f64>() / m as f64;

    let mut candidates: Vec<(f64, f64, f64, f64)> = Vec::new(); // (score, a, b, c)
    for k in 1..=(m / 2).max(1) {
        let w = 2.0 * std::f64::consts::PI * k as f64 / period;
        let mut cs = 0.0;
        let mut ss = 0.0;
        for &(x, y) in points {
            cs += (y - mean) * (w * x).cos();
            ss += (y - mean) * (w * x).sin();
        }
        let a_cos = 2.0 * cs / m as f64;
        let b_sin = 2.0 * ss / m as f64;
        let amp = (a_cos * a_cos + b_sin * b_sin).sqrt();
        // a sin(wx + c) = a sin(c) cos(wx) + a cos(c) sin(wx)
        let phase = a_cos.atan2(b_sin);
        candidates.push((amp, amp, w, phase));
    }
    candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut params = Vec::with_capacity(3 * n);
    let max_amp = candidates.first().map(|c| c.0).unwrap_or(0.0);
    let mut next_bin = candidates.into_iter();
    for k in 0..n {
        if k == 0 && mean.abs() > 0.05 * max_amp.max(1e-9) {
            // Slow term approximating the constant offset: a sin(eps*x + pi/2).
            params.extend_from_slice(&[mean, 0.5 / period, std::f64::consts::FRAC_PI_2]);
            continue;
        }
        match next_bin.next() {
            Some((_, a, b, c)) => params.extend_from_slice(&[a, b, c]),
            None => params.extend_from_slice(&[
                0.1,
                2.0 * std::f64::consts::PI * (k + 1) as f64 / period,
                0.0,
            ]),
        }
    }
    params
}

const JITTER_RESTARTS: usize = 8;
const JITTER_SCALE: f64 = 0.1;

fn jittered(base: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter()
        .map(|&p| {
            let u: f64 = rng.gen_range(-1.0..1.0);
            let v: f64 = rng.gen_range(-1.0..1.0);
            p * (1.0 + JITTER_SCALE * u) + 0.01 * v
        })
        .collect()
}

pub(crate) fn initial_candidates(
    family: CurveFamily,
    points: &[(f64, f64)],
    seed: u64,
) -> Vec<Vec<f64>> {
    let base = match family {
        CurveFamily::GaussianSum(n) => gaussian_base_init(n, points),
        CurveFamily::SineSum(n) => sine_base_init(n, points),
        _ => unreachable!("linear families have no multi-start"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![base.clone()];
    for _ in 0..JITTER_RESTARTS {
        starts.push(jittered(&base, &mut rng));
    }
    starts
}

fn fit_nonlinear(
    family: CurveFamily,
    points: &[(f64, f64)],
    seed: u64,
) -> Result<FittedCurve, FitError> {
    let opts = LmOptions::default();
    let polish = |start: &[f64]| -> LmOutcome {
        match family {
            CurveFamily::GaussianSum(_) => {
                lm::minimize(gaussian_eval(points), start, points.len(), &opts)
            }
            CurveFamily::SineSum(_) => {
                lm::minimize(sine_eval(points), start, points.len(), &opts)
            }
            _ => unreachable!(),
        }
    };

    let mut starts = initial_candidates(family, points, seed);
    if let CurveFamily::GaussianSum(n) = family {
        starts.insert(0, gaussian_masked_greedy_candidate(n, points, &opts));
        starts.insert(1, gaussian_greedy_candidate(n, points, true, &opts));
        starts.insert(2, gaussian_greedy_candidate(n, points, false, &opts));
        let base = gaussian_base_init(n, points);
        let x_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let x_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        for edge in [x_min, x_max] {
            let nearest = (0..n)
                .min_by(|&i, &j| {
                    (base[3 * i + 1] - edge)
                        .abs()
                        .partial_cmp(&(base[3 * j + 1] - edge).abs())
                        .unwrap()
                })
                .unwrap();
            for dist in [4.002, 10.005, 25.001, 50.002] {
                for ratio in [3.0, 6.0] {
                    let mut hyp = base.clone();
                    hyp[3 * nearest] = 1.0;
                    hyp[3 * nearest + 1] =
                        if edge == x_min { x_min - dist } else { x_max + dist };
                    hyp[3 * nearest + 2] = dist / ratio;
                    starts.push(hyp);
                }
            }
        }
        if std::env::var("FIT_DIFF").is_ok() {
            let swaps = gaussian_edge_swaps(&base, points);
            for (i, h) in starts[12..].iter().enumerate() {
                eprintln!("inline {i}: {h:.4?}");
            }
            for (i, h) in swaps.iter().enumerate() {
                eprintln!("swaps  {i}: {h:.4?}");
            }
        }
        // Every start also enters in variable-projection-refined form; the
        // refined copies reach basins plain LM cannot (the shoulder valley
        // crawl happens inside the projected problem, so it gets the full
        // iteration budget).
        let refined: Vec<Vec<f64>> = starts
            .iter()
            .filter_map(|s| gaussian_varpro_refine(s, points, &opts))
            .collect();
        starts.extend(refined);
    }

    let mut best: Option<LmOutcome> = None;
    for (si, start) in starts.iter().enumerate() {
        let out = polish(start);
        if std::env::var("FIT_DEBUG").is_ok() {
            let pre = sse_of(family, start, points);
            eprintln!(
                "start {si}: pre {pre:.4e} post {:.4e} iters {} conv {}",
                out.sse, out.iterations, out.converged
            );
        }
        let better = match &best {
            Some(b) => out.sse.is_finite() && out.sse < b.sse,
            None => true,
        };
        if better {
            best = Some(out);
        }
    }
    let mut best = best.ok_or(FitError::SingularSystem)?;

    if matches!(family, CurveFamily::GaussianSum(_)) && std::env::var("FIT_ROUND2").is_ok() {
        // Second round against what the winner still misses: replant each
        // edge term of the winning configuration off-range. This repairs the
        // conflations a one-shot multistart leaves behind (an off-range hump
        // standing in as a boundary spike while an interior term stretches to
        // cover two humps at once).
        let mut improved = None;
        for hyp in gaussian_edge_swaps(&best.params, points) {
            if let Some(r) = gaussian_varpro_refine(&hyp, points, &opts) {
                let out = polish(&r);
                let cur = improved.as_ref().unwrap_or(&best);
                if out.sse.is_finite() && out.sse < cur.sse {
                    improved = Some(out);
                }
            }
        }
        if let Some(better) = improved {
            best = better;
        }
    }

    Ok(FittedCurve {
        family,
        sse: best.sse,
        residual_variance: best.sse / points.len() as f64,
        converged: best.converged,
        iterations: best.iterations,
        params: best.params,
    })
}

/// Fit one family at one arity. Linear families are exact and
/// seed-independent; nonlinear families run seeded multi-start LM and return
/// the best-SSE candidate.
pub fn fit(family: CurveFamily, points: &[(f64, f64)], seed: u64) -> Result<FittedCurve, FitError> {
    family.validate()?;
    let need = family.param_count();
    if points.len() < need {
        return Err(FitError::InsufficientPoints { have: points.len(), need });
    }
    match family {
        CurveFamily::Polynomial(d) => fit_polynomial(d, points),
        CurveFamily::FourierSeries(n) => fit_fourier(n, points),
        CurveFamily::GaussianSum(_) | CurveFamily::SineSum(_) => {
            fit_nonlinear(family, points, seed)
        }
    }
}

// ---------------------------------------------------------------------------
// Model selection

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArityGrids {
    pub gaussian: Vec<usize>,
    pub sine: Vec<usize>,
    pub polynomial: Vec<usize>,
    pub fourier: Vec<usize>,
}

impl Default for ArityGrids {
    fn default() -> Self {
        ArityGrids {
            gaussian: (1..=8).collect(),
            sine: (1..=8).collect(),
            polynomial: (1..=9).collect(),
            fourier: (1..=8).collect(),
        }
    }
}

impl ArityGrids {
    fn cells(&self) -> Vec<CurveFamily> {
        let mut cells = Vec::new();
        cells.extend(self.gaussian.iter().map(|&n| CurveFamily::GaussianSum(n)));
        cells.extend(self.sine.iter().map(|&n| CurveFamily::SineSum(n)));
        cells.extend(self.polynomial.iter().map(|&d| CurveFamily::Polynomial(d)));
        cells.extend(self.fourier.iter().map(|&n| CurveFamily::FourierSeries(n)));
        cells
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRow {
    pub rank: usize,
    pub curve: FittedCurve,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionFailure {
    pub family: CurveFamily,
    pub error: String,
}

/// Per-family best fits over an arity grid, ranked ascending by residual
/// variance. Cell failures are recorded, never fatal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionTable {
    pub rows: Vec<SelectionRow>,
    pub failures: Vec<SelectionFailure>,
}

impl SelectionTable {
    pub fn winner(&self) -> Option<&FittedCurve> {
        self.rows.first().map(|r| &r.curve)
    }
}

pub fn model_selection(
    points: &[(f64, f64)],
    grids: &ArityGrids,
    seed: u64,
) -> Result<SelectionTable, FitError> {
    let cells = grids.cells();
    if cells.is_empty() {
        return Err(FitError::EmptyGrid);
    }
    let results: Vec<(CurveFamily, Result<FittedCurve, FitError>)> =
        cells.par_iter().map(|&family| (family, fit(family, points, seed))).collect();

    let mut failures = Vec::new();
    let mut best_per_family: Vec<(&'static str, Option<FittedCurve>)> = vec![
        ("gaussian", None),
        ("sine", None),
        ("polynomial", None),
        ("fourier", None),
    ];
    for (family, result) in results {
        match result {
            Ok(curve) => {
                let slot = best_per_family
                    .iter_mut()
                    .find(|(name, _)| *name == family.name())
                    .expect("known family");
                let replace = match &slot.1 {
                    Some(b) => curve.residual_variance < b.residual_variance,
                    None => true,
                };
                if replace {
                    slot.1 = Some(curve);
                }
            }
            Err(e) => failures.push(SelectionFailure { family, error: e.to_string() }),
        }
    }
    let mut winners: Vec<FittedCurve> =
        best_per_family.into_iter().filter_map(|(_, c)| c).collect();
    winners.sort_by(|a, b| a.residual_variance.partial_cmp(&b.residual_variance).unwrap());
    let rows = winners
        .into_iter()
        .enumerate()
        .map(|(i, curve)| SelectionRow { rank: i + 1, curve })
        .collect();
    Ok(SelectionTable { rows, failures })
}

/// Table-style CSV: ranked winners first, failed cells appended with the
/// error in the last column.
pub fn selection_to_csv(table: &SelectionTable) -> String {
    let mut out =
        String::from("rank,family,arity,sse,residual_variance,converged,iterations,error\n");
    for row in &table.rows {
        let c = &row.curve;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},\n",
            row.rank,
            c.family.name(),
            c.family.arity(),
            c.sse,
            c.residual_variance,
            c.converged,
            c.iterations
        ));
    }
    for f in &table.failures {
        out.push_str(&format!(
            ",{},{},,,,,\"{}\"\n",
            f.family.name(),
            f.family.arity(),
            f.error
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(family: CurveFamily, params: Vec<f64>) -> FittedCurve {
        FittedCurve { family, params, sse: 0.0, residual_variance: 0.0, converged: true, iterations: 0 }
    }

    #[test]
    fn single_gaussian_peak_value() {
        let c = curve(CurveFamily::GaussianSum(1), vec![7.0, 3.0, 2.0]);
        assert_eq!(evaluate(&c, 3.0).unwrap(), 7.0);
        // One width off-center: a * exp(-1).
        let v = evaluate(&c, 5.0).unwrap();
        assert!((v - 7.0 * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn constant_polynomial_evaluates_everywhere() {
        let c = curve(CurveFamily::Polynomial(0), vec![5.0]);
        for x in [-3.0, 0.0, 11.5, 24.0] {
            assert_eq!(evaluate(&c, x).unwrap(), 5.0);
        }
    }

    #[test]
    fn sine_zeros_at_phase_multiples_of_pi() {
        let c = curve(CurveFamily::SineSum(1), vec![2.0, 1.0, 0.0]);
        for k in 1..=4 {
            let v = evaluate(&c, k as f64 * std::f64::consts::PI).unwrap();
            assert!(v.abs() < 1e-9, "x = {k}pi gave {v}");
        }
    }

    #[test]
    fn gaussian_sum_matches_termwise_oracle() {
        // Independent per-term accumulation in extended precision order.
        let params = vec![3.0, 1.0, 2.0, -1.5, 10.0, 0.7, 40.0, -5.0, 9.0];
        let c = curve(CurveFamily::GaussianSum(3), params.clone());
        for x in [0.0, 4.5, 12.0, 23.0] {
            let mut want = 0.0f64;
            for k in 0..3 {
                let (a, b, cc) = (params[3 * k], params[3 * k + 1], params[3 * k + 2]);
                want += a * (-((x - b) / cc) * ((x - b) / cc)).exp();
            }
            let got = evaluate(&c, x).unwrap();
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn fourier_evaluation_matches_manual_sum() {
        let params = vec![2.0, 0.5, -0.25, 0.1, 0.3, std::f64::consts::PI / 12.0];
        let c = curve(CurveFamily::FourierSeries(2), params.clone());
        let x = 7.3;
        let w = params[5];
        let want = 2.0 + 0.5 * (w * x).cos() - 0.25 * (w * x).sin()
            + 0.1 * (2.0 * w * x).cos()
            + 0.3 * (2.0 * w * x).sin();
        assert!((evaluate(&c, x).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn malformed_params_are_rejected() {
        let short = curve(CurveFamily::GaussianSum(2), vec![1.0, 2.0, 3.0]);
        assert!(matches!(evaluate(&short, 0.0), Err(FitError::MalformedParams(_))));
        let zero_width = curve(CurveFamily::GaussianSum(1), vec![1.0, 2.0, 0.0]);
        assert!(matches!(evaluate(&zero_width, 0.0), Err(FitError::MalformedParams(_))));
        let bad_w = curve(CurveFamily::FourierSeries(1), vec![1.0, 0.5, 0.5, -0.1]);
        assert!(matches!(evaluate(&bad_w, 0.0), Err(FitError::MalformedParams(_))));
        assert!(matches!(
            fit(CurveFamily::GaussianSum(0), &[(0.0, 1.0)], 0),
            Err(FitError::InvalidFamily(_))
        ));
    }

    #[test]
    fn constant_data_degree_zero_polynomial() {
        let points: Vec<(f64, f64)> = (0..24).map(|h| (h as f64, 10.0)).collect();
        let c = fit(CurveFamily::Polynomial(0), &points, 0).unwrap();
        assert!((c.params[0] - 10.0).abs() < 1e-12);
        assert!(c.sse < 1e-20);
        assert!(c.converged);
    }

    #[test]
    fn two_term_gaussian_recovery_from_clean_data() {
        // Generator is the oracle; parameter identity is NOT asserted
        // (permutation/sign symmetries), only reproduction of the function.
        let gen_params = [30.0, 6.0, 2.5, 20.0, 16.0, 3.0];
        let gen = |x: f64| -> f64 {
            (0..2)
                .map(|k| {
                    let (a, b, c) = (gen_params[3 * k], gen_params[3 * k + 1], gen_params[3 * k + 2]);
                    a * (-((x - b) / c) * ((x - b) / c)).exp()
                })
                .sum()
        };
        let points: Vec<(f64, f64)> = (0..24).map(|h| (h as f64, gen(h as f64))).collect();
        let c = fit(CurveFamily::GaussianSum(2), &points, 1).unwrap();
        assert!(c.sse < 1e-10, "sse {}", c.sse);
        let mut x = 0.0;
        while x <= 24.0 {
            let v = evaluate(&c, x).unwrap();
            assert!((v - gen(x)).abs() < 1e-6, "x={x}: {v} vs {}", gen(x));
            x += 0.25;
        }
    }

    #[test]
    fn fit_never_beats_its_own_start_in_reverse() {
        // Monotone improvement: final SSE <= best initial SSE.
        let points: Vec<(f64, f64)> = (0..24)
            .map(|h| {
                let x = h as f64;
                (x, 25.0 + 18.0 * ((x - 4.0) / 3.0).tanh() - 1.1 * x + (x * 0.9).sin() * 4.0)
            })
            .collect();
        for family in [CurveFamily::GaussianSum(3), CurveFamily::SineSum(3)] {
            let best_start_sse = initial_candidates(family, &points, 7)
                .iter()
                .map(|p| sse_of(family, p, &points))
                .fold(f64::INFINITY, f64::min);
            let fitted = fit(family, &points, 7).unwrap();
            assert!(
                fitted.sse <= best_start_sse + 1e-9,
                "{family:?}: {} > {best_start_sse}",
                fitted.sse
            );
        }
    }

    #[test]
    fn linear_fits_are_seed_independent_bit_for_bit() {
        let points: Vec<(f64, f64)> =
            (0..24).map(|h| (h as f64, (h as f64 * 0.35).sin() * 12.0 + 30.0)).collect();
        let a = fit(CurveFamily::Polynomial(5), &points, 1).unwrap();
        let b = fit(CurveFamily::Polynomial(5), &points, 999).unwrap();
        assert_eq!(a.params, b.params);
        let fa = fit(CurveFamily::FourierSeries(3), &points, 1).unwrap();
        let fb = fit(CurveFamily::FourierSeries(3), &points, 999).unwrap();
        assert_eq!(fa.params, fb.params);
    }

    #[test]
    fn nonlinear_fits_are_deterministic_given_seed() {
        let points: Vec<(f64, f64)> =
            (0..24).map(|h| (h as f64, (h as f64 * 0.5).cos() * 9.0 + 20.0)).collect();
        let a = fit(CurveFamily::GaussianSum(3), &points, 42).unwrap();
        let b = fit(CurveFamily::GaussianSum(3), &points, 42).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.sse.to_bits(), b.sse.to_bits());
    }

    #[test]
    fn nested_polynomial_grids_never_get_worse() {
        let points: Vec<(f64, f64)> = (0..24)
            .map(|h| (h as f64, 0.02 * (h as f64).powi(3) - 0.6 * (h as f64).powi(2) + 40.0))
            .collect();
        let small: f64 = [1usize, 2, 3]
            .iter()
            .map(|&d| fit(CurveFamily::Polynomial(d), &points, 0).unwrap().residual_variance)
            .fold(f64::INFINITY, f64::min);
        let large: f64 = [1usize, 2, 3, 4, 5, 6]
            .iter()
            .map(|&d| fit(CurveFamily::Polynomial(d), &points, 0).unwrap().residual_variance)
            .fold(f64::INFINITY, f64::min);
        assert!(large <= small + 1e-12);
    }

    #[test]
    fn pure_sinusoid_ranks_a_periodic_family_first() {
        let w = 2.0 * std::f64::consts::PI / 24.0;
        let points: Vec<(f64, f64)> =
            (0..24).map(|h| (h as f64, 10.0 * (w * h as f64).sin() + 30.0)).collect();
        let grids = ArityGrids {
            gaussian: vec![2],
            sine: vec![2],
            polynomial: vec![3],
            fourier: vec![2],
        };
        let table = model_selection(&points, &grids, 3).unwrap();
        let first = table.winner().unwrap().family.name();
        assert!(first == "sine" || first == "fourier", "winner was {first}");
    }

    #[test]
    fn undersized_profile_records_failure_without_aborting() {
        let points = vec![(0.0, 1.0), (1.0, 2.0), (2.0, 1.5)];
        let grids = ArityGrids {
            gaussian: vec![8],
            sine: vec![],
            polynomial: vec![0],
            fourier: vec![],
        };
        let table = model_selection(&points, &grids, 0).unwrap();
        assert_eq!(table.rows.len(), 1); // polynomial succeeded
        assert_eq!(table.failures.len(), 1);
        assert!(table.failures[0].error.contains("24 parameters")
            || table.failures[0].error.contains("cannot determine"));
    }

    #[test]
    fn empty_grid_is_an_error() {
        let grids =
            ArityGrids { gaussian: vec![], sine: vec![], polynomial: vec![], fourier: vec![] };
        assert!(matches!(
            model_selection(&[(0.0, 1.0)], &grids, 0),
            Err(FitError::EmptyGrid)
        ));
    }

    #[test]
    fn selection_csv_has_ranked_rows() {
        let points: Vec<(f64, f64)> =
            (0..24).map(|h| (h as f64, h as f64 * 2.0 + 1.0)).collect();
        let grids = ArityGrids {
            gaussian: vec![],
            sine: vec![],
            polynomial: vec![1, 2],
            fourier: vec![1],
        };
        let table = model_selection(&points, &grids, 0).unwrap();
        let csv = selection_to_csv(&table);
        assert!(csv.starts_with("rank,family,arity,"));
        assert!(csv.contains("1,polynomial,"));
    }
}
