//! Transfer learning from a data-rich source domain (SD) to a target domain
//! (TD) with few labelled cycles.
//!
//! * ZSL: the SD model applied to the target unchanged.
//! * No TL: a model trained on the TD samples alone.
//! * TL1: one model trained on SD and TD samples together.
//! * TL2: a per-feature map `x' = w ⊙ x + b` fitted so that the SD model
//!   predicts TD targets well.
//! * TL3: the SD model plus a correction model fitted to its TD residuals.

use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::error::{learner_kind, ErrorKind};
use crate::evaluation::{feature_table, rmse, EvalError, ExperimentConfig, FeatureTable};
use crate::learners::{train, LearnerConfig, LearnerError, LearnerKind, Model};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransferError {
    #[error("target dataset is empty")]
    EmptyTarget,
    #[error("condition {condition} has {have} cells, {needed} requested")]
    EmptyCondition { condition: String, needed: usize, have: usize },
    #[error("invalid target-domain spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no target-domain training samples")]
    EmptyTd,
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl TransferError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            TransferError::InvalidSpec(_) => ErrorKind::Usage,
            TransferError::Learner(e) => learner_kind(e),
            TransferError::Eval(e) => e.kind(),
            _ => ErrorKind::Data,
        }
    }
}

/// How the labelled target-domain subset is drawn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdSpec {
    pub cycle_stride: u32,
    pub cells_per_condition: usize,
    pub seed: u64,
}

impl Default for TdSpec {
    fn default() -> Self {
        TdSpec { cycle_stride: 100, cells_per_condition: 1, seed: 0 }
    }
}

/// Picks `cells_per_condition` random cells per condition and keeps their
/// cycles `1, 1 + stride, 1 + 2·stride, …`.
pub fn construct_td(target: &Dataset, spec: &TdSpec) -> Result<Dataset, TransferError> {
    if target.is_empty() {
        return Err(TransferError::EmptyTarget);
    }
    if spec.cycle_stride == 0 || spec.cells_per_condition == 0 {
        return Err(TransferError::InvalidSpec(format!("{spec:?}")));
    }
    let mut rng = seed::rng(spec.seed);
    let mut chosen: BTreeSet<String> = BTreeSet::new();
    for (condition, cells) in target.conditions() {
        if cells.len() < spec.cells_per_condition {
            return Err(TransferError::EmptyCondition {
                condition,
                needed: spec.cells_per_condition,
                have: cells.len(),
            });
        }
        let mut cells = cells;
        cells.shuffle(&mut rng);
        chosen.extend(cells.into_iter().take(spec.cells_per_condition));
    }
    let stride = spec.cycle_stride;
    Ok(target.filter(|r| chosen.contains(r.cell_id()) && r.cycle_number >= 1 && (r.cycle_number - 1) % stride == 0))
}

/// Learner inputs with SOH targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// The kept rows of `table` at `rows`.
    pub fn from_table(table: &FeatureTable, rows: impl IntoIterator<Item = usize>) -> Samples {
        let (x, y) = rows.into_iter().filter(|&i| table.keep[i]).map(|i| (table.x[i].clone(), table.y[i])).unzip();
        Samples { x, y }
    }

    fn check_dim(&self, d: usize) -> Result<(), TransferError> {
        match self.x.iter().find(|r| r.len() != d) {
            Some(r) => Err(TransferError::DimensionMismatch { expected: d, got: r.len() }),
            None => Ok(()),
        }
    }
}

pub fn zsl_predict(sd_model: &Model, x: &[Vec<f64>]) -> Result<Vec<f64>, TransferError> {
    Ok(x.iter().map(|r| sd_model.predict_mean(r)).collect::<Result<_, _>>()?)
}

pub fn no_tl(td: &Samples, learner: &LearnerConfig, seed: u64) -> Result<Model, TransferError> {
    Ok(train(learner, &td.x, &td.y, seed)?)
}

/// TL1: a single model on the union of both domains.
pub fn tl1_augment(sd: &Samples, td: &Samples, learner: &LearnerConfig, seed: u64) -> Result<Model, TransferError> {
    if let Some(first) = sd.x.first() {
        td.check_dim(first.len())?;
    }
    let x: Vec<Vec<f64>> = sd.x.iter().chain(&td.x).cloned().collect();
    let y: Vec<f64> = sd.y.iter().chain(&td.y).copied().collect();
    Ok(train(learner, &x, &y, seed)?)
}

/// Per-feature affine map `x'_j = w_j·x_j + b_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransform {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl FeatureTransform {
    pub fn identity(d: usize) -> Self {
        FeatureTransform { w: vec![1.0; d], b: vec![0.0; d] }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.w).zip(&self.b).map(|((v, w), b)| w * v + b).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tl2Fit {
    pub transform: FeatureTransform,
    /// TD RMSE of the SD model without the transform.
    pub identity_rmse: f64,
    /// TD RMSE with the returned transform; never above `identity_rmse`.
    pub rmse: f64,
    /// TD RMSE after each sweep.
    pub trace: Vec<f64>,
}

pub const TL2_MAX_SWEEPS: usize = 200;
pub const TL2_TOL: f64 = 1e-6;

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section minimum of `f` on `[lo, hi]`, to a bracket of `tol`.
fn golden_section(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// TL2: fits `(w, b)` minimizing the SD model's RMSE on the TD samples.
///
/// Coordinates are refined one at a time by golden-section search, cycling
/// until a sweep improves the RMSE by less than [`TL2_TOL`] or
/// [`TL2_MAX_SWEEPS`] is reached. Internally the map is centred on the TD
/// feature means, `x' = w ⊙ (x − μ) + μ + β`, so that `w` and `β` are
/// nearly decoupled; a candidate is accepted only if it lowers the RMSE, so
/// the result is never worse than the identity.
pub fn tl2_fit_transform(sd_model: &Model, td: &Samples) -> Result<Tl2Fit, TransferError> {
    if td.is_empty() {
        return Err(TransferError::EmptyTd);
    }
    let d = sd_model.n_features();
    td.check_dim(d)?;
    let n = td.len() as f64;
    let mu: Vec<f64> = (0..d).map(|j| td.x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let spread: Vec<f64> = (0..d)
        .map(|j| {
            let s = (td.x.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 0.0 {
                s
            } else {
                mu[j].abs().max(1.0) * 1e-3
            }
        })
        .collect();

    let to_transform = |w: &[f64], beta: &[f64]| FeatureTransform {
        w: w.to_vec(),
        b: (0..d).map(|j| beta[j] + mu[j] * (1.0 - w[j])).collect(),
    };
    let objective = |w: &[f64], beta: &[f64]| -> f64 {
        let t = to_transform(w, beta);
        let pred: Result<Vec<f64>, _> = td.x.iter().map(|r| sd_model.predict_mean(&t.apply(r))).collect();
        match pred {
            Ok(p) => rmse(&td.y, &p).unwrap_or(f64::INFINITY),
            Err(_) => f64::INFINITY,
        }
    };

    let (mut w, mut beta) = (vec![1.0; d], vec![0.0; d]);
    let identity_rmse = objective(&w, &beta);
    let mut current = identity_rmse;
    let mut trace = Vec::new();
    for _ in 0..TL2_MAX_SWEEPS {
        let before = current;
        for j in 0..d {
            let h = 2.0 * spread[j];
            let mut trial = beta.clone();
            let (bj, f) = golden_section(
                |v| {
                    trial[j] = v;
                    objective(&w, &trial)
                },
                beta[j] - h,
                beta[j] + h,
                h * 1e-6,
            );
            if f < current {
                beta[j] = bj;
                current = f;
            }
            let mut trial = w.clone();
            let (wj, f) = golden_section(
                |v| {
                    trial[j] = v;
                    objective(&trial, &beta)
                },
                w[j] - 0.5,
                w[j] + 0.5,
                1e-6,
            );
            if f < current {
                w[j] = wj;
                current = f;
            }
        }
        trace.push(current);
        if before - current < TL2_TOL {
            break;
        }
    }
    let (transform, rmse) = if current <= identity_rmse {
        (to_transform(&w, &beta), current)
    } else {
        (FeatureTransform::identity(d), identity_rmse)
    };
    Ok(Tl2Fit { transform, identity_rmse, rmse, trace })
}

/// Noise floor (standardized units) of a GPR correction model.
pub const TL3_GPR_NOISE_FLOOR: f64 = 0.05;

/// SD model plus a correction fitted to TD residuals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaModel {
    pub base: Model,
    pub correction: Model,
}

impl DeltaModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64, TransferError> {
        Ok(self.base.predict_mean(x)? + self.correction.predict_mean(x)?)
    }
}

/// TL3: trains `learner` on the residuals `y − sd_model(x)` of the TD samples.
pub fn tl3_fit(
    sd_model: &Model,
    td: &Samples,
    learner: &LearnerConfig,
    seed: u64,
) -> Result<DeltaModel, TransferError> {
    if td.is_empty() {
        return Err(TransferError::EmptyTd);
    }
    td.check_dim(sd_model.n_features())?;
    let base = zsl_predict(sd_model, &td.x)?;
    let residual: Vec<f64> = td.y.iter().zip(&base).map(|(y, p)| y - p).collect();
    let mut cfg = learner.clone();
    if cfg.kind == LearnerKind::Gpr {
        cfg.gpr.noise_floor = cfg.gpr.noise_floor.max(TL3_GPR_NOISE_FLOOR);
    }
    let correction = train(&cfg, &td.x, &residual, seed)?;
    Ok(DeltaModel { base: sd_model.clone(), correction })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TlMethod {
    Zsl,
    NoTl,
    Tl1,
    Tl2,
    Tl3,
}

impl TlMethod {
    pub const ALL: [TlMethod; 5] = [TlMethod::Zsl, TlMethod::NoTl, TlMethod::Tl1, TlMethod::Tl2, TlMethod::Tl3];
}

impl std::fmt::Display for TlMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TlMethod::Zsl => "zsl",
            TlMethod::NoTl => "no_tl",
            TlMethod::Tl1 => "tl1",
            TlMethod::Tl2 => "tl2",
            TlMethod::Tl3 => "tl3",
        })
    }
}

impl std::str::FromStr for TlMethod {
    type Err = TransferError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "zsl" => Ok(TlMethod::Zsl),
            "no_tl" | "notl" => Ok(TlMethod::NoTl),
            "tl1" => Ok(TlMethod::Tl1),
            "tl2" => Ok(TlMethod::Tl2),
            "tl3" => Ok(TlMethod::Tl3),
            _ => Err(TransferError::InvalidSpec(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// `None` runs every method.
    pub tl_method: Option<TlMethod>,
    pub td_stride: u32,
    pub td_cells_per_condition: usize,
    /// Defaults to a seed derived from the experiment seed.
    pub td_seed: Option<u64>,
    /// Independent TD draws.
    pub groups: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig { tl_method: None, td_stride: 100, td_cells_per_condition: 1, td_seed: None, groups: 20 }
    }
}

impl TransferConfig {
    pub fn methods(&self) -> Vec<TlMethod> {
        self.tl_method.map_or_else(|| TlMethod::ALL.to_vec(), |m| vec![m])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: usize,
    pub td_seed: u64,
    pub td_cells: Vec<String>,
    pub n_td: usize,
    pub n_test: usize,
    /// `(method, rmse)` in method order.
    pub rmse_pct: Vec<(TlMethod, f64)>,
    pub tl2_transform: Option<FeatureTransform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: TlMethod,
    /// Mean of the per-group RMSEs.
    pub mean_rmse_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub transfer: TransferConfig,
    pub methods: Vec<MethodSummary>,
    pub groups: Vec<GroupResult>,
    pub wall_time_s: f64,
}

impl TransferReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn mean_rmse(&self, method: TlMethod) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.mean_rmse_pct)
    }

    /// One row per method and group, for plotting.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "group", "rmse_pct"])?;
        for g in &self.groups {
            for (m, r) in &g.rmse_pct {
                w.write_record([m.to_string(), g.group.to_string(), r.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn run_group(
    exp: &ExperimentConfig,
    tcfg: &TransferConfig,
    target: &Dataset,
    target_table: &FeatureTable,
    sd: &Samples,
    zsl: &Model,
    group: usize,
    td_seed: u64,
) -> Result<GroupResult, TransferError> {
    let spec = TdSpec { cycle_stride: tcfg.td_stride, cells_per_condition: tcfg.td_cells_per_condition, seed: td_seed };
    let td_ds = construct_td(target, &spec)?;
    let td_keys: BTreeSet<(&str, u32)> = td_ds.records().iter().map(|r| (r.cell_id(), r.cycle_number)).collect();
    let td_cells: BTreeSet<&str> = td_ds.cell_ids().collect();
    let recs = target.records();
    let td_rows = (0..recs.len()).filter(|&i| td_keys.contains(&(recs[i].cell_id(), recs[i].cycle_number)));
    let test_rows = (0..recs.len()).filter(|&i| !td_cells.contains(recs[i].cell_id()));
    let td = Samples::from_table(target_table, td_rows);
    let test = Samples::from_table(target_table, test_rows);
    if test.is_empty() {
        return Err(EvalError::EmptyInput.into());
    }
    let seed = seed::derive_labeled(exp.seed, "transfer-group", group as u64);
    let mut results = Vec::new();
    let mut tl2_transform = None;
    for method in tcfg.methods() {
        let pred = match method {
            TlMethod::Zsl => zsl_predict(zsl, &test.x)?,
            TlMethod::NoTl => zsl_predict(&no_tl(&td, &exp.learner, seed)?, &test.x)?,
            TlMethod::Tl1 => zsl_predict(&tl1_augment(sd, &td, &exp.learner, seed)?, &test.x)?,
            TlMethod::Tl2 => {
                let fit = tl2_fit_transform(zsl, &td)?;
                let moved: Vec<Vec<f64>> = test.x.iter().map(|r| fit.transform.apply(r)).collect();
                tl2_transform = Some(fit.transform);
                zsl_predict(zsl, &moved)?
            }
            TlMethod::Tl3 => {
                let delta = tl3_fit(zsl, &td, &exp.learner, seed)?;
                test.x.iter().map(|r| delta.predict(r)).collect::<Result<_, _>>()?
            }
        };
        results.push((method, rmse(&test.y, &pred)?));
    }
    Ok(GroupResult {
        group,
        td_seed,
        td_cells: td_cells.iter().map(|s| s.to_string()).collect(),
        n_td: td.len(),
        n_test: test.len(),
        rmse_pct: results,
        tl2_transform,
    })
}

/// Runs the configured methods over `tcfg.groups` independent TD draws.
/// The SD model (used by ZSL, TL2 and TL3) is trained once on all source
/// records; TD cells are excluded from the target test set.
pub fn run_transfer(
    exp: &ExperimentConfig,
    tcfg: &TransferConfig,
    source: &Dataset,
    target: &Dataset,
) -> Result<TransferReport, TransferError> {
    let started = Instant::now();
    if target.is_empty() {
        return Err(TransferError::EmptyTarget);
    }
    if tcfg.groups == 0 {
        return Err(TransferError::InvalidSpec("groups must be at least 1".into()));
    }
    let sd_table = feature_table(source, exp)?;
    let target_table = feature_table(target, exp)?;
    let sd = Samples::from_table(&sd_table, 0..source.len());
    let zsl = train(&exp.learner, &sd.x, &sd.y, exp.learner_seed(0))?;
    let td_base = tcfg.td_seed.unwrap_or_else(|| seed::derive_labeled(exp.seed, "td", 0));
    let groups: Vec<GroupResult> = (0..tcfg.groups)
        .into_par_iter()
        .map(|g| {
            let td_seed = seed::derive_labeled(td_base, "group", g as u64);
            run_group(exp, tcfg, target, &target_table, &sd, &zsl, g, td_seed)
        })
        .collect::<Result<_, _>>()?;
    let methods = tcfg
        .methods()
        .into_iter()
        .enumerate()
        .map(|(k, method)| MethodSummary {
            method,
            mean_rmse_pct: groups.iter().map(|g| g.rmse_pct[k].1).sum::<f64>() / groups.len() as f64,
        })
        .collect();
    Ok(TransferReport {
        format: "soh-transfer-report".into(),
        version: 1,
        config: exp.clone(),
        transfer: tcfg.clone(),
        methods,
        groups,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_aging_dataset, SynthConfig};

    fn linear_model() -> (Model, Samples) {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 / 4.0, ((i * 7) % 11) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 100.0 - 2.0 * r[0] + 0.5 * r[1]).collect();
        let model = train(&LearnerConfig::of(LearnerKind::Gpr), &x, &y, 0).unwrap();
        (model, Samples { x, y })
    }

    #[test]
    fn td_keeps_strided_cycles_of_chosen_cells() {
        let mut cfg = SynthConfig::benchmark(3);
        cfg.conditions.iter_mut().for_each(|c| c.profile.n_cycles = 600);
        let ds = gen_aging_dataset(&cfg).unwrap().dataset;
        let spec = TdSpec { seed: 5, ..TdSpec::default() };
        let td = construct_td(&ds, &spec).unwrap();
        assert_eq!(td.n_cells(), 3);
        for cell in td.cell_ids() {
            let cycles: Vec<u32> = td.records_of_cell(cell).iter().map(|r| r.cycle_number).collect();
            assert_eq!(cycles, vec![1, 101, 201, 301, 401, 501]);
        }
        assert_eq!(construct_td(&ds, &spec).unwrap(), td);
        let all = TdSpec { cycle_stride: 1, cells_per_condition: 6, seed: 0 };
        assert_eq!(construct_td(&ds, &all).unwrap(), ds);
        let too_many = TdSpec { cells_per_condition: 7, ..TdSpec::default() };
        assert!(matches!(construct_td(&ds, &too_many), Err(TransferError::EmptyCondition { .. })));
    }

    #[test]
    fn golden_section_finds_parabola_minimum() {
        let (x, f) = golden_section(|v| (v - 0.3).powi(2) + 1.0, -2.0, 2.0, 1e-9);
        assert!((x - 0.3).abs() < 1e-6 && (f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tl1_with_empty_td_is_zsl() {
        let (_, sd) = linear_model();
        let cfg = LearnerConfig::of(LearnerKind::Gbrt);
        let a = tl1_augment(&sd, &Samples::default(), &cfg, 4).unwrap();
        let b = train(&cfg, &sd.x, &sd.y, 4).unwrap();
        assert_eq!(zsl_predict(&a, &sd.x).unwrap(), zsl_predict(&b, &sd.x).unwrap());
    }

    #[test]
    fn tl2_never_worse_than_identity() {
        let (model, sd) = linear_model();
        let fit = tl2_fit_transform(&model, &sd).unwrap();
        assert!(fit.rmse <= fit.identity_rmse);
        assert!(fit.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn tl3_removes_constant_bias() {
        let (model, sd) = linear_model();
        let td = Samples { x: sd.x.clone(), y: sd.y.iter().map(|y| y + 2.0).collect() };
        let delta = tl3_fit(&model, &td, &LearnerConfig::of(LearnerKind::Gpr), 1).unwrap();
        for r in &td.x {
            let gap = delta.predict(r).unwrap() - model.predict_mean(r).unwrap();
            assert!((gap - 2.0).abs() < 0.05, "{gap}");
        }
    }

    #[test]
    fn method_names() {
        for m in TlMethod::ALL {
            assert_eq!(m.to_string().parse::<TlMethod>().unwrap(), m);
        }
    }
}
