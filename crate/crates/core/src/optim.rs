//! Small dense optimizers: box-constrained Levenberg-Marquardt for
//! nonlinear least squares and BFGS with backtracking line search for
//! smooth scalar objectives.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Stop when an accepted step improves the RSS by less than this fraction.
    pub rel_tol: f64,
    /// Gradient criterion: largest cosine between the residual and a
    /// Jacobian column, over free coordinates.
    pub gtol: f64,
    /// RSS at or below which the fit counts as exact (working-precision floor).
    pub abs_tol: f64,
    pub lambda0: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions { max_iter: 500, rel_tol: 1e-10, gtol: 1e-6, abs_tol: 0.0, lambda0: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub x: Vec<f64>,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Final value of the gradient criterion.
    pub grad_cos: f64,
}

const LAMBDA_MAX: f64 = 1e16;
const LAMBDA_MIN: f64 = 1e-15;

/// Minimizes `‖r(x)‖²` subject to `lower <= x <= upper`.
///
/// `model(x)` returns the residual vector and its Jacobian. Steps use
/// Marquardt's diagonal scaling: the Jacobian columns are normalized and the
/// damped system is solved through the SVD of the scaled Jacobian, which
/// avoids squaring its condition number.
pub fn levenberg_marquardt<F>(mut model: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &LmOptions) -> LmOutcome
where
    F: FnMut(&[f64]) -> (DVector<f64>, DMatrix<f64>),
{
    let p = x0.len();
    let clamp = |x: &mut [f64]| {
        for j in 0..p {
            x[j] = x[j].clamp(lower[j], upper[j]);
        }
    };
    let mut x = x0.to_vec();
    clamp(&mut x);
    let (mut r, mut jac) = model(&x);
    let mut rss = r.norm_squared();
    let mut lambda = opts.lambda0;

    for iter in 0..opts.max_iter {
        if rss <= opts.abs_tol || !rss.is_finite() {
            return LmOutcome { x, rss, iterations: iter, converged: rss.is_finite(), grad_cos: 0.0 };
        }
        let scale = column_scale(&jac);
        let scaled = scale_columns(&jac, &scale);
        let g = scaled.tr_mul(&r);
        let grad_cos = projected_grad_cos(&g, r.norm(), &x, lower, upper);
        if grad_cos <= opts.gtol {
            return LmOutcome { x, rss, iterations: iter, converged: true, grad_cos };
        }

        // Variables pinned at a bound with descent pointing outward stay fixed.
        let mut scaled = scaled;
        for j in 0..p {
            if (x[j] <= lower[j] && g[j] > 0.0) || (x[j] >= upper[j] && g[j] < 0.0) {
                scaled.column_mut(j).fill(0.0);
            }
        }
        let svd = scaled.svd(true, true);
        let u = svd.u.as_ref().expect("u requested");
        let v_t = svd.v_t.as_ref().expect("v_t requested");
        let utr = u.tr_mul(&r);

        loop {
            let mut step_scaled = DVector::zeros(p);
            for (k, &s) in svd.singular_values.iter().enumerate() {
                let coef = -s / (s * s + lambda) * utr[k];
                step_scaled += v_t.row(k).transpose() * coef;
            }
            let mut x_new: Vec<f64> = (0..p).map(|j| x[j] + step_scaled[j] / scale[j]).collect();
            clamp(&mut x_new);
            let moved = x_new.iter().zip(&x).any(|(a, b)| a != b);
            if moved {
                let (r_new, jac_new) = model(&x_new);
                let rss_new = r_new.norm_squared();
                if rss_new < rss {
                    let rel = (rss - rss_new) / rss;
                    x = x_new;
                    r = r_new;
                    jac = jac_new;
                    rss = rss_new;
                    lambda = (lambda / 10.0).max(LAMBDA_MIN);
                    if rel < opts.rel_tol {
                        return LmOutcome { x, rss, iterations: iter + 1, converged: true, grad_cos };
                    }
                    break;
                }
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                // No descent step exists at working precision: a numerical minimum.
                return LmOutcome { x, rss, iterations: iter + 1, converged: true, grad_cos };
            }
        }
    }
    let scale = column_scale(&jac);
    let g = scale_columns(&jac, &scale).tr_mul(&r);
    let grad_cos = projected_grad_cos(&g, r.norm(), &x, lower, upper);
    let converged = grad_cos <= opts.gtol || rss <= opts.abs_tol;
    LmOutcome { x, rss, iterations: opts.max_iter, converged, grad_cos }
}

fn column_scale(jac: &DMatrix<f64>) -> Vec<f64> {
    let norms: Vec<f64> = jac.column_iter().map(|c| c.norm()).collect();
    let max = norms.iter().cloned().fold(0.0_f64, f64::max);
    let floor = (max * 1e-12).max(f64::MIN_POSITIVE);
    norms.into_iter().map(|n| n.max(floor)).collect()
}

fn scale_columns(jac: &DMatrix<f64>, scale: &[f64]) -> DMatrix<f64> {
    let mut out = jac.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col /= scale[j];
    }
    out
}

fn projected_grad_cos(g: &DVector<f64>, r_norm: f64, x: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    if r_norm == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0_f64;
    for j in 0..g.len() {
        let blocked = (x[j] <= lower[j] && g[j] > 0.0) || (x[j] >= upper[j] && g[j] < 0.0);
        if !blocked {
            worst = worst.max(g[j].abs() / r_norm);
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the infinity norm of the projected gradient falls below this.
    pub gtol: f64,
    /// Stop when an iteration improves the objective by less than this (relative).
    pub ftol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 200, gtol: 1e-5, ftol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

/// Box-projected BFGS with Armijo backtracking.
///
/// `objective(x)` returns `Some((f, grad))`, or `None` where the objective is
/// undefined (treated as +∞ by the line search). The returned `f` is never
/// larger than the objective at the (projected) start point.
pub fn bfgs<F>(mut objective: F, x0: &[f64], lower: &[f64], upper: &[f64], opts: &BfgsOptions) -> Option<BfgsOutcome>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let p = x0.len();
    let project = |x: &mut Vec<f64>| {
        for j in 0..p {
            x[j] = x[j].clamp(lower[j], upper[j]);
        }
    };
    let mut x = x0.to_vec();
    project(&mut x);
    let (mut f, mut g) = objective(&x)?;
    let mut evaluations = 1;
    let mut h_inv = DMatrix::<f64>::identity(p, p);
    let free_grad = |x: &[f64], g: &[f64]| -> f64 {
        (0..p)
            .filter(|&j| !((x[j] <= lower[j] && g[j] > 0.0) || (x[j] >= upper[j] && g[j] < 0.0)))
            .map(|j| g[j].abs())
            .fold(0.0, f64::max)
    };

    let mut iterations = 0;
    while iterations < opts.max_iter {
        if free_grad(&x, &g) < opts.gtol {
            break;
        }
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let mut dir = -(&h_inv * &gv);
        // Coordinates pinned at a bound with the direction pointing outward stay put.
        for j in 0..p {
            if (x[j] <= lower[j] && dir[j] < 0.0) || (x[j] >= upper[j] && dir[j] > 0.0) {
                dir[j] = 0.0;
            }
        }
        let mut slope = dir.dot(&gv);
        if slope >= 0.0 || !slope.is_finite() {
            // Not a descent direction: restart from steepest descent.
            h_inv = DMatrix::identity(p, p);
            dir = -gv.clone();
            for j in 0..p {
                if (x[j] <= lower[j] && dir[j] < 0.0) || (x[j] >= upper[j] && dir[j] > 0.0) {
                    dir[j] = 0.0;
                }
            }
            slope = dir.dot(&gv);
            if slope >= 0.0 {
                break;
            }
        }
        // Cap the first trial step to keep log-hyperparameters in a sane range.
        let dir_norm = dir.amax();
        let mut step = if dir_norm > 3.0 { 3.0 / dir_norm } else { 1.0 };
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = (0..p).map(|j| x[j] + step * dir[j]).collect();
            project(&mut trial);
            evaluations += 1;
            if let Some((ft, gt)) = objective(&trial) {
                let actual: f64 = (0..p).map(|j| (trial[j] - x[j]) * g[j]).sum();
                if ft.is_finite() && ft <= f + 1e-4 * actual.min(0.0) && ft <= f {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else { break };
        let s = DVector::from_iterator(p, (0..p).map(|j| x_new[j] - x[j]));
        let y = DVector::from_iterator(p, (0..p).map(|j| g_new[j] - g[j]));
        let sy = s.dot(&y);
        let improvement = f - f_new;
        x = x_new;
        g = g_new;
        let f_old = f;
        f = f_new;
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(p, p);
            let left = &i - rho * &s * y.transpose();
            let right = &i - rho * &y * s.transpose();
            h_inv = &left * &h_inv * &right + rho * &s * s.transpose();
        }
        if improvement <= opts.ftol * f_old.abs().max(1.0) {
            break;
        }
    }
    Some(BfgsOutcome { x, f, iterations, evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lm_fits_exponential_decay() {
        let t: Vec<f64> = (0..20).map(|k| k as f64 * 0.5).collect();
        let y: Vec<f64> = t.iter().map(|&t| 2.0 + 3.0 * (-t / 1.7f64).exp()).collect();
        let model = |x: &[f64]| {
            let n = t.len();
            let mut r = DVector::zeros(n);
            let mut j = DMatrix::zeros(n, 3);
            for i in 0..n {
                let e = (-t[i] / x[2]).exp();
                r[i] = x[0] + x[1] * e - y[i];
                j[(i, 0)] = 1.0;
                j[(i, 1)] = e;
                j[(i, 2)] = x[1] * e * t[i] / (x[2] * x[2]);
            }
            (r, j)
        };
        let out = levenberg_marquardt(
            model,
            &[0.0, 1.0, 5.0],
            &[-10.0, -10.0, 0.01],
            &[10.0, 10.0, 100.0],
            &LmOptions::default(),
        );
        assert!(out.converged);
        assert!((out.x[2] - 1.7).abs() < 1e-8, "{:?}", out);
        assert!(out.rss < 1e-20);
    }

    #[test]
    fn bfgs_minimizes_rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Some((v, g))
        };
        let opts = BfgsOptions { max_iter: 500, gtol: 1e-8, ftol: 0.0 };
        let out = bfgs(f, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &opts).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5, "{out:?}");
    }

    #[test]
    fn bfgs_respects_bounds() {
        let f = |x: &[f64]| Some(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]));
        let out = bfgs(f, &[0.0], &[-1.0], &[1.0], &BfgsOptions::default()).unwrap();
        assert_eq!(out.x, vec![1.0]);
    }
}
