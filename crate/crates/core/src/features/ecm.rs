//! Second-order RC equivalent circuit identification from a relaxation curve.
//!
//! During the rest after charging, the terminal voltage is
//!
//! ```text
//! U(t) = OCV - I·R1·exp(-t / (R1·C1)) - I·R2·exp(-t / (R2·C2))
//! ```
//!
//! where `I` is the CV cutoff current (negative when charging). OCV, R1, C1,
//! R2 and C2 are fitted by nonlinear least squares; R0 then follows from the
//! voltage drop between the end of charge and OCV.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FeatureError;
use crate::dataset::RelaxationCurve;
use crate::optim::{levenberg_marquardt, LmOptions};
use crate::seed;

/// Minimum number of samples needed to identify the circuit.
pub const MIN_SAMPLES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcmParams {
    pub ocv_v: f64,
    pub r0_ohm: f64,
    pub r1_ohm: f64,
    pub r2_ohm: f64,
    pub c1_f: f64,
    pub c2_f: f64,
    /// Residual sum of squares of the fit, V².
    pub fit_rss: f64,
    pub degenerate: bool,
}

impl EcmParams {
    /// Parameters without fit metadata, e.g. for simulation.
    pub fn new(ocv_v: f64, r0_ohm: f64, r1_ohm: f64, c1_f: f64, r2_ohm: f64, c2_f: f64) -> Self {
        EcmParams { ocv_v, r0_ohm, r1_ohm, r2_ohm, c1_f, c2_f, fit_rss: 0.0, degenerate: false }
    }

    pub fn tau1(&self) -> f64 {
        self.r1_ohm * self.c1_f
    }

    pub fn tau2(&self) -> f64 {
        self.r2_ohm * self.c2_f
    }

    /// Feature order: `[OCV, R0, R1, R2, C1, C2]`.
    pub fn feature_values(&self) -> [f64; 6] {
        [self.ocv_v, self.r0_ohm, self.r1_ohm, self.r2_ohm, self.c1_f, self.c2_f]
    }

    /// Swaps the RC branches if needed so that `τ1 <= τ2`.
    pub fn canonicalize(mut self) -> Self {
        if self.tau1() > self.tau2() {
            std::mem::swap(&mut self.r1_ohm, &mut self.r2_ohm);
            std::mem::swap(&mut self.c1_f, &mut self.c2_f);
        }
        self
    }
}

/// Terminal voltage `t` seconds into the rest.
pub fn relaxation_model_voltage(p: &EcmParams, current_a: f64, t: f64) -> f64 {
    p.ocv_v
        - current_a * p.r1_ohm * (-t / (p.r1_ohm * p.c1_f)).exp()
        - current_a * p.r2_ohm * (-t / (p.r2_ohm * p.c2_f)).exp()
}

/// Ohmic resistance from the end-of-charge voltage `ut0_v`:
/// `|ut0 - OCV| / |I| - R1 - R2`.
pub fn compute_r0(ut0_v: f64, p: &EcmParams, current_a: f64) -> Result<f64, FeatureError> {
    if current_a == 0.0 {
        return Err(FeatureError::ZeroCurrent);
    }
    let r0 = (ut0_v - p.ocv_v).abs() / current_a.abs() - p.r1_ohm - p.r2_ohm;
    if r0 < 0.0 {
        Err(FeatureError::NegativeR0(r0))
    } else {
        Ok(r0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcmFitOptions {
    /// Seed for the jittered restarts.
    pub seed: u64,
    /// Jittered restarts in addition to the heuristic and grid-scan starts.
    pub restarts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub gtol: f64,
    /// A branch with `|I·R| <` this many volts marks the fit degenerate.
    pub amplitude_eps_v: f64,
    /// Time constants are bounded by this multiple of the last sample time.
    pub tau_max_factor: f64,
}

impl Default for EcmFitOptions {
    fn default() -> Self {
        EcmFitOptions {
            seed: 0,
            restarts: 5,
            max_iter: 5000,
            rel_tol: 1e-10,
            gtol: 1e-6,
            amplitude_eps_v: 1e-5,
            tau_max_factor: 10.0,
        }
    }
}

// Search box.
const R_MIN: f64 = 1e-6;
const R_MAX: f64 = 10.0;
const TAU_MIN: f64 = 1e-2;
const TAU_MAX: f64 = 1e7;
// Restart jitter: factors in [1/JITTER, JITTER].
const JITTER: f64 = 4.0;
// Nodes per axis of the coarse scan that seeds one extra start.
const SCAN_NODES: usize = 16;

/// Identifies the circuit parameters from `curve`.
///
/// For fixed time constants, OCV and the branch amplitudes `−I·R_i` enter the
/// model linearly and are solved exactly (with the resistance bounds as box
/// constraints). Levenberg-Marquardt then searches `[ln τ1, ln τ2]` on the
/// projected residual. The result has `τ1 <= τ2`.
pub fn fit_ecm(curve: &RelaxationCurve, opts: &EcmFitOptions) -> Result<EcmParams, FeatureError> {
    let n = curve.len();
    if n < MIN_SAMPLES {
        return Err(FeatureError::TooFewSamples { needed: MIN_SAMPLES, got: n });
    }
    let current = curve.cutoff_current_a;
    if current == 0.0 {
        return Err(FeatureError::ZeroCurrent);
    }
    let t = &curve.times_s;
    let v = DVector::from_column_slice(&curve.voltages_v);
    let (a, b) = (-current * R_MIN, -current * R_MAX);
    let amp_bounds = (a.min(b), a.max(b));

    let model = |x: &[f64], bounds: Option<(f64, f64)>| -> (DVector<f64>, DMatrix<f64>) {
        let taus = [x[0].exp(), x[1].exp()];
        let lin = solve_linear(t, &v, taus, bounds);
        let mut j = DMatrix::zeros(n, 2);
        for k in 0..2 {
            // Kaufman's approximation; exact for the gradient Jᵀr.
            let d = DVector::from_iterator(n, t.iter().map(|&ti| lin.amp[k] * (-ti / taus[k]).exp() * ti / taus[k]));
            let proj = &d - &lin.basis * lin.basis.tr_mul(&d);
            j.set_column(k, &proj);
        }
        (lin.resid, j)
    };
    let tau_max = (opts.tau_max_factor * curve.last_time()).clamp(10.0 * TAU_MIN, TAU_MAX);
    let lower = [TAU_MIN.ln(); 2];
    let upper = [tau_max.ln(); 2];
    // residuals this small are rounding noise in the voltages themselves
    let v_max = v.amax();
    let abs_tol = n as f64 * (64.0 * f64::EPSILON * v_max).powi(2);
    let lm =
        LmOptions { max_iter: opts.max_iter, rel_tol: opts.rel_tol, gtol: opts.gtol, abs_tol, ..LmOptions::default() };

    let base = initial_guess(curve).map(|x| x.clamp(lower[0], upper[0]));
    let scanned = scan_start(t, &v, amp_bounds, lower[0], upper[0]);
    let mut rng = seed::rng(opts.seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut worst_failure = (f64::INFINITY, 0.0);
    for k in 0..=opts.restarts + 1 {
        let mut x0 = if k == opts.restarts + 1 { scanned } else { base };
        if k > 0 && k <= opts.restarts {
            for x in &mut x0 {
                *x += rng.random_range(-1.0..=1.0) * JITTER.ln();
            }
        }
        // Unconstrained amplitudes first: a branch pinned at its bound has no
        // gradient in τ, so searching with the bounds active can stall.
        let mut out = levenberg_marquardt(|x: &[f64]| model(x, None), &x0, &lower, &upper, &lm);
        let taus = [out.x[0].exp(), out.x[1].exp()];
        let amp = solve_linear(t, &v, taus, None).amp;
        if !out.converged || amp.iter().any(|a| *a < amp_bounds.0 || *a > amp_bounds.1) {
            let start = if out.x.iter().all(|x| x.is_finite()) { out.x.clone() } else { x0.to_vec() };
            out = levenberg_marquardt(|x: &[f64]| model(x, Some(amp_bounds)), &start, &lower, &upper, &lm);
        }
        if !out.converged {
            worst_failure = (out.rss, out.grad_cos);
            continue;
        }
        if best.as_ref().is_none_or(|(_, rss)| out.rss < *rss) {
            best = Some((out.x, out.rss));
        }
    }
    let Some((x, rss)) = best else {
        return Err(FeatureError::NoConvergence { rss: worst_failure.0, grad: worst_failure.1 });
    };

    let taus = [x[0].exp(), x[1].exp()];
    let lin = solve_linear(t, &v, taus, Some(amp_bounds));
    let (r1, r2) = (lin.amp[0] / -current, lin.amp[1] / -current);
    let mut p = EcmParams::new(lin.ocv, 0.0, r1, taus[0] / r1, r2, taus[1] / r2).canonicalize();
    p.fit_rss = rss;
    p.degenerate =
        (current * p.r1_ohm).abs() < opts.amplitude_eps_v || (current * p.r2_ohm).abs() < opts.amplitude_eps_v;
    match compute_r0(curve.charge_end_voltage_v, &p, current) {
        Ok(r0) => p.r0_ohm = r0,
        Err(FeatureError::NegativeR0(_)) => {
            p.r0_ohm = 0.0;
            p.degenerate = true;
        }
        Err(e) => return Err(e),
    }
    Ok(p)
}

/// Least-squares OCV and amplitudes for fixed time constants.
struct LinearSolution {
    ocv: f64,
    amp: [f64; 2],
    resid: DVector<f64>,
    /// Orthonormal basis of the columns that were solved for.
    basis: DMatrix<f64>,
}

/// Minimizes `‖OCV + a1·e^(−t/τ1) + a2·e^(−t/τ2) − v‖`, with each `a_i` in
/// `bounds` when given. Every combination of free and bound-fixed amplitudes
/// is tried (the unconstrained one first) and the best feasible one kept.
fn solve_linear(t: &[f64], v: &DVector<f64>, taus: [f64; 2], bounds: Option<(f64, f64)>) -> LinearSolution {
    let n = t.len();
    let cols = taus.map(|tau| DVector::from_iterator(n, t.iter().map(|&ti| (-ti / tau).exp())));
    let (constrained, bounds) = match bounds {
        Some(b) => (true, b),
        None => (false, (f64::NEG_INFINITY, f64::INFINITY)),
    };
    let choices: &[Option<f64>] = if constrained { &[None, Some(bounds.0), Some(bounds.1)] } else { &[None] };
    let mut best: Option<(f64, LinearSolution)> = None;
    for fixed in choices.iter().flat_map(|&f1| choices.iter().map(move |&f2| [f1, f2])) {
        let mut target = v.clone();
        let mut free = Vec::with_capacity(2);
        for k in 0..2 {
            match fixed[k] {
                Some(a) => target.axpy(-a, &cols[k], 1.0),
                None => free.push(k),
            }
        }
        let mut phi = DMatrix::from_element(n, 1 + free.len(), 1.0);
        for (c, &k) in free.iter().enumerate() {
            phi.set_column(c + 1, &cols[k]);
        }
        let svd = phi.clone().svd(true, true);
        let tol = svd.singular_values.max() * 1e-12;
        let coef = svd.solve(&target, tol).expect("U and V were computed");
        let mut amp = [fixed[0].unwrap_or(0.0), fixed[1].unwrap_or(0.0)];
        for (c, &k) in free.iter().enumerate() {
            amp[k] = coef[c + 1];
        }
        let slack = if constrained { 1e-12 * bounds.1.abs().max(bounds.0.abs()) } else { 0.0 };
        if free.iter().any(|&k| amp[k] < bounds.0 - slack || amp[k] > bounds.1 + slack) {
            continue;
        }
        for a in &mut amp {
            *a = a.clamp(bounds.0, bounds.1);
        }
        let resid = &phi * &coef - &target;
        let rss = resid.norm_squared();
        if best.as_ref().is_none_or(|(b, _)| rss < *b) {
            let u = svd.u.as_ref().expect("U was computed");
            let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
            let basis = u.columns(0, rank).into_owned();
            let done = free.len() == 2;
            best = Some((rss, LinearSolution { ocv: coef[0], amp, resid, basis }));
            if done {
                // The unconstrained optimum is feasible, hence optimal.
                break;
            }
        }
    }
    best.expect("both amplitudes fixed at bounds is always feasible").1
}

/// Best node of a coarse `ln τ1 <= ln τ2` grid on `[lo, hi]` under the
/// bounded linear solve.
fn scan_start(t: &[f64], v: &DVector<f64>, bounds: (f64, f64), lo: f64, hi: f64) -> [f64; 2] {
    let nodes: Vec<f64> = (0..SCAN_NODES).map(|k| lo + (hi - lo) * k as f64 / (SCAN_NODES - 1) as f64).collect();
    let mut best = ([lo, hi], f64::INFINITY);
    for (i, &a) in nodes.iter().enumerate() {
        for &b in &nodes[i..] {
            let rss = solve_linear(t, v, [a.exp(), b.exp()], Some(bounds)).resid.norm_squared();
            if rss < best.1 {
                best = ([a, b], rss);
            }
        }
    }
    best.0
}

/// Heuristic start `[ln(T/10), ln(T/2)]` with `T` the last sample time.
fn initial_guess(curve: &RelaxationCurve) -> [f64; 2] {
    let last_t = curve.last_time().max(1.0);
    [(last_t / 10.0).ln(), (last_t / 2.0).ln()]
}

#[cfg(test)]
mod tests {
    use super::*;

    const I: f64 = -0.177;

    fn reference() -> EcmParams {
        EcmParams::new(4.18, 0.0, 0.01, 2000.0, 0.03, 40000.0)
    }

    fn d1_curve(p: &EcmParams) -> RelaxationCurve {
        let times: Vec<f64> = (1..=14).map(|k| 120.0 * k as f64).collect();
        let volts = times.iter().map(|&t| relaxation_model_voltage(p, I, t)).collect();
        RelaxationCurve::new(times, volts, I, 4.25).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn model_limits() {
        let p = reference();
        assert_eq!(relaxation_model_voltage(&p, I, 1e12), 4.18);
        assert!((relaxation_model_voltage(&p, I, 0.0) - (4.18 - I * 0.04)).abs() < 1e-15);
        // direct scalar evaluation at t = 2000 s
        let expected = 4.18 + 0.177 * 0.01 * (-2000.0f64 / 20.0).exp() + 0.177 * 0.03 * (-2000.0f64 / 1200.0).exp();
        assert!((relaxation_model_voltage(&p, I, 2000.0) - expected).abs() < 1e-15);
        assert!((relaxation_model_voltage(&p, I, 2000.0) - 4.181_002_929_451_067_6).abs() < 1e-12);
    }

    #[test]
    fn r0_examples() {
        let p = EcmParams::new(4.18, 0.0, 0.0, 1.0, 0.0, 1.0);
        assert_eq!(compute_r0(4.18, &p, I).unwrap(), 0.0);
        let p = EcmParams::new(4.18, 0.0, 0.01, 1.0, 0.03, 1.0);
        assert!((compute_r0(4.25, &p, I).unwrap() - 0.355_480_225_988_702_2).abs() < 1e-12);
        let p = EcmParams::new(4.18, 0.0, 0.01, 1.0, 0.0, 1.0);
        match compute_r0(4.18, &p, I) {
            Err(FeatureError::NegativeR0(v)) => assert!((v + 0.01).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
        assert_eq!(compute_r0(4.2, &p, 0.0), Err(FeatureError::ZeroCurrent));
    }

    #[test]
    fn recovers_noise_free_reference() {
        let truth = reference();
        let fit = fit_ecm(&d1_curve(&truth), &EcmFitOptions::default()).unwrap();
        assert!(fit.fit_rss < 1e-12, "{fit:?}");
        assert!(rel(fit.ocv_v, truth.ocv_v) < 1e-3);
        assert!(rel(fit.r1_ohm, truth.r1_ohm) < 1e-3, "{fit:?}");
        assert!(rel(fit.c1_f, truth.c1_f) < 1e-3, "{fit:?}");
        assert!(rel(fit.r2_ohm, truth.r2_ohm) < 1e-3, "{fit:?}");
        assert!(rel(fit.c2_f, truth.c2_f) < 1e-3, "{fit:?}");
        assert!((fit.r0_ohm - 0.355_480_225_988_702_2).abs() < 1e-6);
        assert!(!fit.degenerate);
    }

    #[test]
    fn flat_curve_is_degenerate() {
        let times: Vec<f64> = (1..=14).map(|k| 120.0 * k as f64).collect();
        let curve = RelaxationCurve::new(times, vec![4.0; 14], I, 4.2).unwrap();
        let fit = fit_ecm(&curve, &EcmFitOptions::default()).unwrap();
        // both amplitudes sit at the resistance floor, which OCV absorbs
        assert!((fit.ocv_v - 4.0).abs() < 1e-6);
        assert!((I * fit.r1_ohm).abs() < 1e-5 && (I * fit.r2_ohm).abs() < 1e-5);
        assert!(fit.degenerate);
    }

    #[test]
    fn preconditions() {
        let truth = reference();
        let mut c = d1_curve(&truth);
        c.cutoff_current_a = 0.0;
        assert_eq!(fit_ecm(&c, &EcmFitOptions::default()), Err(FeatureError::ZeroCurrent));
        let short = crate::dataset::truncate_relaxation(&d1_curve(&truth), 600.0).unwrap();
        assert_eq!(fit_ecm(&short, &EcmFitOptions::default()), Err(FeatureError::TooFewSamples { needed: 6, got: 5 }));
    }

    #[test]
    fn canonical_branch_order() {
        let p = EcmParams::new(4.1, 0.0, 0.03, 40000.0, 0.01, 2000.0).canonicalize();
        assert_eq!((p.r1_ohm, p.c1_f), (0.01, 2000.0));
        assert!(p.tau1() <= p.tau2());
    }

    #[test]
    fn voltage_shift_moves_only_ocv() {
        let truth = reference();
        let base = d1_curve(&truth);
        let mut shifted = base.clone();
        shifted.voltages_v.iter_mut().for_each(|v| *v += 0.0125);
        let a = fit_ecm(&base, &EcmFitOptions::default()).unwrap();
        let b = fit_ecm(&shifted, &EcmFitOptions::default()).unwrap();
        assert!((b.ocv_v - a.ocv_v - 0.0125).abs() < 1e-9);
        for (x, y) in [(a.r1_ohm, b.r1_ohm), (a.r2_ohm, b.r2_ohm), (a.c1_f, b.c1_f), (a.c2_f, b.c2_f)] {
            assert!(rel(y, x) < 1e-4, "{a:?} vs {b:?}");
        }
    }
}
