//! Epsilon-insensitive support vector regression with an RBF kernel.
//!
//! The dual is solved on the usual doubled variable set by sequential minimal
//! optimization with second-order working-set selection.

use serde::{Deserialize, Serialize};

use super::{validate_training, LearnerError};
use crate::linalg::{canonical_order, reorder, Standardizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvrParams {
    pub c: f64,
    /// Tube half-width in target units.
    pub epsilon: f64,
    /// RBF width on standardized inputs; `None` means 1/d.
    pub gamma: Option<f64>,
    /// KKT violation tolerance (standardized units).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvrParams {
    fn default() -> Self {
        SvrParams { c: 10.0, epsilon: 0.01, gamma: None, tol: 1e-6, max_iter: 10_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    /// Standardized inputs with nonzero dual coefficient.
    pub support_vectors: Vec<Vec<f64>>,
    /// `α_i − α_i*` per support vector, each in `[−C, C]`.
    pub dual_coeffs: Vec<f64>,
    pub bias: f64,
    pub rbf_gamma: f64,
    pub c: f64,
    pub epsilon: f64,
    pub in_std: Standardizer,
    pub out_std: Standardizer,
    pub iterations: usize,
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>()).exp()
}

impl SvrModel {
    pub fn n_features(&self) -> usize {
        self.in_std.means.len()
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64, LearnerError> {
        if x.len() != self.n_features() {
            return Err(LearnerError::DimensionMismatch { expected: self.n_features(), got: x.len() });
        }
        let z = self.in_std.transform(x);
        let f: f64 = self
            .support_vectors
            .iter()
            .zip(&self.dual_coeffs)
            .map(|(sv, a)| a * rbf(sv, &z, self.rbf_gamma))
            .sum::<f64>()
            + self.bias;
        Ok(self.out_std.inverse_one(f))
    }
}

/// Result of the dual solver on standardized data.
pub(crate) struct DualSolution {
    /// `α − α*`, one per training row.
    pub coef: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

/// Dual objective `−½ θᵀKθ − ε Σ|θ| + Σ y θ` (to be maximized).
#[cfg(test)]
pub(crate) fn dual_objective(k: &[Vec<f64>], y: &[f64], eps: f64, theta: &[f64]) -> f64 {
    let n = y.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += theta[i] * theta[j] * k[i][j];
        }
    }
    -0.5 * quad - eps * theta.iter().map(|t| t.abs()).sum::<f64>()
        + y.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>()
}

pub(crate) fn solve_dual(k: &[Vec<f64>], y: &[f64], c: f64, eps: f64, tol: f64, max_iter: usize) -> DualSolution {
    const TAU: f64 = 1e-12;
    let n = y.len();
    let m = 2 * n;
    let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
    let q = |s: usize, t: usize| sign(s) * sign(t) * k[s % n][t % n];
    let mut beta = vec![0.0; m];
    let mut grad: Vec<f64> = (0..m).map(|t| if t < n { eps - y[t] } else { eps + y[t - n] }).collect();
    let up = |t: usize, b: f64| if t < n { b < c } else { b > 0.0 };
    let low = |t: usize, b: f64| if t < n { b > 0.0 } else { b < c };

    let mut iterations = 0;
    while iterations < max_iter {
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..m {
            if up(t, beta[t]) && -sign(t) * grad[t] >= gmax {
                gmax = -sign(t) * grad[t];
                i_sel = Some(t);
            }
        }
        let Some(i) = i_sel else { break };
        let mut gmax2 = f64::NEG_INFINITY;
        let mut obj_min = f64::INFINITY;
        let mut j_sel = None;
        for t in 0..m {
            if !low(t, beta[t]) {
                continue;
            }
            let yg = sign(t) * grad[t];
            gmax2 = gmax2.max(yg);
            let b = gmax + yg;
            if b > 0.0 {
                let mut a = q(i, i) + q(t, t) - 2.0 * sign(i) * sign(t) * q(i, t);
                if a <= 0.0 {
                    a = TAU;
                }
                let obj = -(b * b) / a;
                if obj <= obj_min {
                    obj_min = obj;
                    j_sel = Some(t);
                }
            }
        }
        if gmax + gmax2 < tol {
            break;
        }
        let Some(j) = j_sel else { break };
        iterations += 1;

        let (old_i, old_j) = (beta[i], beta[j]);
        if sign(i) != sign(j) {
            let mut quad = q(i, i) + q(j, j) + 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = beta[i] - beta[j];
            beta[i] += delta;
            beta[j] += delta;
            if diff > 0.0 {
                if beta[j] < 0.0 {
                    beta[j] = 0.0;
                    beta[i] = diff;
                }
            } else if beta[i] < 0.0 {
                beta[i] = 0.0;
                beta[j] = -diff;
            }
            if diff > 0.0 {
                if beta[i] > c {
                    beta[i] = c;
                    beta[j] = c - diff;
                }
            } else if beta[j] > c {
                beta[j] = c;
                beta[i] = c + diff;
            }
        } else {
            let mut quad = q(i, i) + q(j, j) - 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = beta[i] + beta[j];
            beta[i] -= delta;
            beta[j] += delta;
            if sum > c {
                if beta[i] > c {
                    beta[i] = c;
                    beta[j] = sum - c;
                }
            } else if beta[j] < 0.0 {
                beta[j] = 0.0;
                beta[i] = sum;
            }
            if sum > c {
                if beta[j] > c {
                    beta[j] = c;
                    beta[i] = sum - c;
                }
            } else if beta[i] < 0.0 {
                beta[i] = 0.0;
                beta[j] = sum;
            }
        }
        let (di, dj) = (beta[i] - old_i, beta[j] - old_j);
        for t in 0..m {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    // ρ from free variables, or the midpoint of the feasible interval.
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..m {
        let yg = sign(t) * grad[t];
        let at_upper = beta[t] >= c;
        let at_lower = beta[t] <= 0.0;
        if at_upper {
            if sign(t) < 0.0 {
                ub = ub.min(yg)
            } else {
                lb = lb.max(yg)
            }
        } else if at_lower {
            if sign(t) > 0.0 {
                ub = ub.min(yg)
            } else {
                lb = lb.max(yg)
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    let rho = if n_free > 0 { sum_free / n_free as f64 } else { (ub + lb) / 2.0 };
    DualSolution { coef: (0..n).map(|t| beta[t] - beta[t + n]).collect(), bias: -rho, iterations }
}

pub fn fit_svr(x: &[Vec<f64>], y: &[f64], params: &SvrParams, _seed: u64) -> Result<SvrModel, LearnerError> {
    let d = validate_training(x, y)?;
    if !(params.c > 0.0) || !(params.epsilon >= 0.0) || params.gamma.is_some_and(|g| !(g > 0.0)) {
        return Err(LearnerError::InvalidParams(format!("{params:?}")));
    }
    let order = canonical_order(x, y);
    let (x, y) = (reorder(x, &order), reorder(y, &order));
    let in_std = Standardizer::fit(&x);
    let out_std = Standardizer::fit_values(&y);
    let xs: Vec<Vec<f64>> = x.iter().map(|r| in_std.transform(r)).collect();
    let ys: Vec<f64> = y.iter().map(|&v| out_std.transform_one(v)).collect();
    let gamma = params.gamma.unwrap_or(1.0 / d as f64);
    let eps = params.epsilon / out_std.scales[0];
    let k: Vec<Vec<f64>> = xs.iter().map(|a| xs.iter().map(|b| rbf(a, b, gamma)).collect()).collect();
    let sol = solve_dual(&k, &ys, params.c, eps, params.tol, params.max_iter);
    let (support_vectors, dual_coeffs) = xs.into_iter().zip(sol.coef).filter(|(_, a)| *a != 0.0).unzip();
    Ok(SvrModel {
        support_vectors,
        dual_coeffs,
        bias: sol.bias,
        rbf_gamma: gamma,
        c: params.c,
        epsilon: params.epsilon,
        in_std,
        out_std,
        iterations: sol.iterations,
    })
}
