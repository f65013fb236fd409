//! Gaussian process regression with the ARD exponential kernel
//!
//! ```text
//! k(a, b) = σ_f² · exp(−sqrt(Σ_m (a_m − b_m)² / l_m²))
//! ```
//!
//! Inputs and targets are standardized before fitting, so the zero prior mean
//! sits at the training-target mean. Hyperparameters are chosen by minimizing
//! the negative log marginal likelihood (NLML) with box-projected BFGS on
//! log-hyperparameters, from several seeded start points.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{canonical_order, cholesky_with_jitter, reorder, Standardizer, MIN_SCALE};
use crate::optim::{bfgs, BfgsOptions};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GprError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in training data")]
    NonFiniteInput,
    #[error("too few training samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("kernel matrix not positive definite after maximum jitter")]
    NotPositiveDefinite,
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GprHyperparams {
    /// Observation noise standard deviation σ.
    pub noise_sigma: f64,
    /// Signal standard deviation σ_f.
    pub signal_sigma: f64,
    pub length_scales: Vec<f64>,
}

impl GprHyperparams {
    pub fn new(noise_sigma: f64, signal_sigma: f64, length_scales: Vec<f64>) -> Result<Self, GprError> {
        let h = GprHyperparams { noise_sigma, signal_sigma, length_scales };
        h.validate()?;
        Ok(h)
    }

    fn validate(&self) -> Result<(), GprError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.noise_sigma) && ok(self.signal_sigma) && self.length_scales.iter().all(|&l| ok(l)) {
            Ok(())
        } else {
            Err(GprError::InvalidHyperparams(format!("{self:?}")))
        }
    }

    /// `[ln σ, ln σ_f, ln l_1, …, ln l_d]`.
    pub fn to_log(&self) -> Vec<f64> {
        let mut v = vec![self.noise_sigma.ln(), self.signal_sigma.ln()];
        v.extend(self.length_scales.iter().map(|l| l.ln()));
        v
    }

    pub fn from_log(theta: &[f64]) -> Self {
        GprHyperparams {
            noise_sigma: theta[0].exp(),
            signal_sigma: theta[1].exp(),
            length_scales: theta[2..].iter().map(|t| t.exp()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GprConfig {
    /// Number of optimizer start points.
    pub restarts: usize,
    pub seed: u64,
    /// Fixed hyperparameters (in standardized units); skips optimization.
    pub hyper: Option<GprHyperparams>,
    /// Lower bound on σ during optimization (standardized units).
    pub noise_floor: f64,
    /// Standardize inputs and targets. Disabling is meant for testing.
    pub standardize: bool,
    /// Add σ² to the reported predictive variance.
    pub include_noise_in_variance: bool,
    pub max_iter: usize,
}

impl Default for GprConfig {
    fn default() -> Self {
        GprConfig {
            restarts: 8,
            seed: 0,
            hyper: None,
            noise_floor: 1e-4,
            standardize: true,
            include_noise_in_variance: true,
            max_iter: 100,
        }
    }
}

const LOG_BOUNDS_SIGNAL: (f64, f64) = (1e-3, 1e2);
const LOG_BOUNDS_LENGTH: (f64, f64) = (1e-3, 1e3);
const NOISE_MAX: f64 = 10.0;
const START_LENGTH: (f64, f64) = (0.1, 10.0);
const START_SIGNAL: (f64, f64) = (0.1, 2.0);
const START_NOISE: (f64, f64) = (1e-3, 0.5);

/// A fitted model. Immutable; prediction is safe from several threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GprModelData", into = "GprModelData")]
pub struct GprModel {
    data: GprModelData,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GprModelData {
    /// Standardized training inputs restricted to the kept features.
    x_train: Vec<Vec<f64>>,
    /// Standardized training targets.
    y_train: Vec<f64>,
    hyper: GprHyperparams,
    /// `true` for each input feature that was kept.
    feature_mask: Vec<bool>,
    in_std: Standardizer,
    out_std: Standardizer,
    include_noise_in_variance: bool,
    jitter: f64,
    nlml: f64,
    start_nlmls: Vec<f64>,
}

impl TryFrom<GprModelData> for GprModel {
    type Error = GprError;

    fn try_from(data: GprModelData) -> Result<Self, GprError> {
        data.hyper.validate()?;
        let (chol, jitter) = factorize(&data.x_train, &data.hyper).ok_or(GprError::NotPositiveDefinite)?;
        let alpha = chol.solve(&DVector::from_column_slice(&data.y_train));
        Ok(GprModel { data: GprModelData { jitter, ..data }, chol, alpha })
    }
}

impl From<GprModel> for GprModelData {
    fn from(m: GprModel) -> Self {
        m.data
    }
}

impl GprModel {
    pub fn hyper(&self) -> &GprHyperparams {
        &self.data.hyper
    }

    /// NLML of the standardized training data at the selected hyperparameters.
    pub fn nlml(&self) -> f64 {
        self.data.nlml
    }

    /// NLML at each optimizer start point (`+∞` where it was undefined).
    pub fn start_nlmls(&self) -> &[f64] {
        &self.data.start_nlmls
    }

    pub fn feature_mask(&self) -> &[bool] {
        &self.data.feature_mask
    }

    /// Indices of features dropped for having zero variance.
    pub fn dropped_features(&self) -> Vec<usize> {
        self.data.feature_mask.iter().enumerate().filter(|(_, &k)| !k).map(|(i, _)| i).collect()
    }

    pub fn n_features(&self) -> usize {
        self.data.feature_mask.len()
    }

    pub fn jitter(&self) -> f64 {
        self.data.jitter
    }

    pub fn n_train(&self) -> usize {
        self.data.y_train.len()
    }
}

/// The ARD exponential kernel.
pub fn kernel_ard_exp(xi: &[f64], xj: &[f64], h: &GprHyperparams) -> Result<f64, GprError> {
    let d = h.length_scales.len();
    for x in [xi, xj] {
        if x.len() != d {
            return Err(GprError::DimensionMismatch { expected: d, got: x.len() });
        }
    }
    Ok(kernel(xi, xj, &h.length_scales, h.signal_sigma * h.signal_sigma))
}

fn scaled_distance(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter().zip(b).zip(ls).map(|((u, v), l)| ((u - v) / l).powi(2)).sum::<f64>().sqrt()
}

fn kernel(a: &[f64], b: &[f64], ls: &[f64], sf2: f64) -> f64 {
    sf2 * (-scaled_distance(a, b, ls)).exp()
}

fn kernel_matrix(x: &[Vec<f64>], h: &GprHyperparams) -> DMatrix<f64> {
    let n = x.len();
    let sf2 = h.signal_sigma * h.signal_sigma;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = sf2;
        for j in 0..i {
            let v = kernel(&x[i], &x[j], &h.length_scales, sf2);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn factorize(x: &[Vec<f64>], h: &GprHyperparams) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let mut k = kernel_matrix(x, h);
    let s2 = h.noise_sigma * h.noise_sigma;
    for i in 0..x.len() {
        k[(i, i)] += s2;
    }
    cholesky_with_jitter(&k)
}

fn nlml_from_factor(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    0.5 * y.dot(alpha) + log_det_half + 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

fn check_training_shape(x: &[Vec<f64>], y: &[f64], d: usize) -> Result<(), GprError> {
    if x.len() != y.len() {
        return Err(GprError::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if let Some(r) = x.iter().find(|r| r.len() != d) {
        return Err(GprError::DimensionMismatch { expected: d, got: r.len() });
    }
    Ok(())
}

/// Negative log marginal likelihood of `y` under a zero-mean GP on `x`.
pub fn nlml(x: &[Vec<f64>], y: &[f64], h: &GprHyperparams) -> Result<f64, GprError> {
    h.validate()?;
    check_training_shape(x, y, h.length_scales.len())?;
    if y.is_empty() {
        return Err(GprError::TooFewSamples { needed: 1, got: 0 });
    }
    let (chol, _) = factorize(x, h).ok_or(GprError::NotPositiveDefinite)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    Ok(nlml_from_factor(&chol, &yv, &alpha))
}

/// Gradient of [`nlml`] with respect to `[ln σ, ln σ_f, ln l_1, …]`.
pub fn nlml_gradient(x: &[Vec<f64>], y: &[f64], h: &GprHyperparams) -> Result<Vec<f64>, GprError> {
    h.validate()?;
    check_training_shape(x, y, h.length_scales.len())?;
    nlml_and_gradient(x, y, &h.to_log()).map(|(_, g)| g).ok_or(GprError::NotPositiveDefinite)
}

fn nlml_and_gradient(x: &[Vec<f64>], y: &[f64], theta: &[f64]) -> Option<(f64, Vec<f64>)> {
    let h = GprHyperparams::from_log(theta);
    let n = x.len();
    let d = h.length_scales.len();
    let (chol, _) = factorize(x, &h)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let value = nlml_from_factor(&chol, &yv, &alpha);
    if !value.is_finite() {
        return None;
    }
    // W = K⁻¹ − ααᵀ; dNLML/dθ = ½ tr(W ∂K/∂θ).
    let mut w = chol.inverse();
    w -= &alpha * alpha.transpose();

    let sf2 = h.signal_sigma * h.signal_sigma;
    let inv_l2: Vec<f64> = h.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut grad = vec![0.0; 2 + d];
    grad[0] = h.noise_sigma * h.noise_sigma * w.trace();
    let mut sq = vec![0.0; d];
    for i in 0..n {
        grad[1] += w[(i, i)] * sf2;
        for j in 0..i {
            let mut r2 = 0.0;
            for m in 0..d {
                sq[m] = (x[i][m] - x[j][m]).powi(2) * inv_l2[m];
                r2 += sq[m];
            }
            let r = r2.sqrt();
            let k = sf2 * (-r).exp();
            let wij = w[(i, j)];
            // Off-diagonal pairs appear twice in the trace; the ½ cancels one.
            grad[1] += 2.0 * wij * k;
            if r > 0.0 {
                let f = wij * k / r;
                for m in 0..d {
                    grad[2 + m] += f * sq[m];
                }
            }
        }
    }
    Some((value, grad))
}

/// Fits a GP to rows `x` and targets `y`.
pub fn fit_gpr(x: &[Vec<f64>], y: &[f64], config: &GprConfig) -> Result<GprModel, GprError> {
    let n = x.len();
    if n < 2 {
        return Err(GprError::TooFewSamples { needed: 2, got: n });
    }
    let d = x[0].len();
    if d == 0 {
        return Err(GprError::DimensionMismatch { expected: 1, got: 0 });
    }
    check_training_shape(x, y, d)?;
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(GprError::NonFiniteInput);
    }

    let order = canonical_order(x, y);
    let (x, y) = (reorder(x, &order), reorder(y, &order));

    let feature_mask: Vec<bool> = crate::linalg::column_std(&x)
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let mag = x.iter().map(|r| r[j].abs()).fold(1.0, f64::max);
            s > MIN_SCALE * mag
        })
        .collect();
    let active: Vec<Vec<f64>> =
        x.iter().map(|r| r.iter().zip(&feature_mask).filter(|(_, &k)| k).map(|(v, _)| *v).collect()).collect();
    let d_active = active[0].len();

    let (in_std, out_std) = if config.standardize {
        (Standardizer::fit(&active), Standardizer::fit_values(&y))
    } else {
        (Standardizer::identity(d_active), Standardizer::identity(1))
    };
    let xs: Vec<Vec<f64>> = active.iter().map(|r| in_std.transform(r)).collect();
    let ys: Vec<f64> = y.iter().map(|&v| out_std.transform_one(v)).collect();

    let (hyper, start_nlmls) = match &config.hyper {
        Some(h) => {
            h.validate()?;
            if h.length_scales.len() != d_active {
                return Err(GprError::DimensionMismatch { expected: d_active, got: h.length_scales.len() });
            }
            (h.clone(), Vec::new())
        }
        None => optimize_hyper(&xs, &ys, config)?,
    };

    let (chol, jitter) = factorize(&xs, &hyper).ok_or(GprError::NotPositiveDefinite)?;
    let yv = DVector::from_column_slice(&ys);
    let alpha = chol.solve(&yv);
    let nlml = nlml_from_factor(&chol, &yv, &alpha);
    Ok(GprModel {
        data: GprModelData {
            x_train: xs,
            y_train: ys,
            hyper,
            feature_mask,
            in_std,
            out_std,
            include_noise_in_variance: config.include_noise_in_variance,
            jitter,
            nlml,
            start_nlmls,
        },
        chol,
        alpha,
    })
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo.ln()..hi.ln())
}

fn optimize_hyper(x: &[Vec<f64>], y: &[f64], config: &GprConfig) -> Result<(GprHyperparams, Vec<f64>), GprError> {
    let d = x[0].len();
    let noise_floor = config.noise_floor.max(f64::MIN_POSITIVE);
    let mut lower = vec![noise_floor.ln(), LOG_BOUNDS_SIGNAL.0.ln()];
    let mut upper = vec![NOISE_MAX.max(noise_floor).ln(), LOG_BOUNDS_SIGNAL.1.ln()];
    lower.extend(std::iter::repeat_n(LOG_BOUNDS_LENGTH.0.ln(), d));
    upper.extend(std::iter::repeat_n(LOG_BOUNDS_LENGTH.1.ln(), d));
    let opts = BfgsOptions { max_iter: config.max_iter, ..BfgsOptions::default() };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut start_nlmls = Vec::with_capacity(config.restarts.max(1));
    for k in 0..config.restarts.max(1) {
        let mut rng = seed::rng(seed::derive_labeled(config.seed, "gpr-start", k as u64));
        let mut theta = vec![log_uniform(&mut rng, START_NOISE), log_uniform(&mut rng, START_SIGNAL)];
        theta.extend((0..d).map(|_| log_uniform(&mut rng, START_LENGTH)));
        for j in 0..theta.len() {
            theta[j] = theta[j].clamp(lower[j], upper[j]);
        }
        let start_value = nlml_and_gradient(x, y, &theta).map_or(f64::INFINITY, |(v, _)| v);
        start_nlmls.push(start_value);
        let Some(out) = bfgs(|t| nlml_and_gradient(x, y, t), &theta, &lower, &upper, &opts) else {
            continue;
        };
        if best.as_ref().is_none_or(|(f, _)| out.f < *f) {
            best = Some((out.f, out.x));
        }
    }
    let (_, theta) = best.ok_or(GprError::NotPositiveDefinite)?;
    Ok((GprHyperparams::from_log(&theta), start_nlmls))
}

/// Posterior mean and variance at `xstar`, in target units. The variance
/// includes σ² unless the model was fitted with
/// `include_noise_in_variance = false`.
pub fn predict_gpr(m: &GprModel, xstar: &[f64]) -> Result<(f64, f64), GprError> {
    m.predict_with(xstar, m.data.include_noise_in_variance)
}

impl GprModel {
    /// Mean and variance; `with_noise` selects predictive vs latent variance.
    pub fn predict_with(&self, xstar: &[f64], with_noise: bool) -> Result<(f64, f64), GprError> {
        let d = &self.data;
        if xstar.len() != d.feature_mask.len() {
            return Err(GprError::DimensionMismatch { expected: d.feature_mask.len(), got: xstar.len() });
        }
        let active: Vec<f64> = xstar.iter().zip(&d.feature_mask).filter(|(_, &k)| k).map(|(v, _)| *v).collect();
        let z = d.in_std.transform(&active);
        let sf2 = d.hyper.signal_sigma * d.hyper.signal_sigma;
        let kstar = DVector::from_iterator(
            d.x_train.len(),
            d.x_train.iter().map(|xi| kernel(&z, xi, &d.hyper.length_scales, sf2)),
        );
        let mean_std = kstar.dot(&self.alpha);
        let v = self.chol.l_dirty().solve_lower_triangular(&kstar).expect("Cholesky factor has a positive diagonal");
        let mut var_std = (sf2 - v.norm_squared()).max(0.0);
        if with_noise {
            var_std += d.hyper.noise_sigma * d.hyper.noise_sigma;
        }
        let scale = d.out_std.scales[0];
        Ok((d.out_std.inverse_one(mean_std), var_std * scale * scale))
    }

    /// Posterior mean only; skips the triangular solve for the variance.
    pub fn predict_mean(&self, xstar: &[f64]) -> Result<f64, GprError> {
        let d = &self.data;
        if xstar.len() != d.feature_mask.len() {
            return Err(GprError::DimensionMismatch { expected: d.feature_mask.len(), got: xstar.len() });
        }
        let active: Vec<f64> = xstar.iter().zip(&d.feature_mask).filter(|(_, &k)| k).map(|(v, _)| *v).collect();
        let z = d.in_std.transform(&active);
        let sf2 = d.hyper.signal_sigma * d.hyper.signal_sigma;
        let mean_std: f64 = d
            .x_train
            .iter()
            .zip(self.alpha.iter())
            .map(|(xi, a)| kernel(&z, xi, &d.hyper.length_scales, sf2) * a)
            .sum();
        Ok(d.out_std.inverse_one(mean_std))
    }
}
