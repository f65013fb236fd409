//! Experiment engine: RMSE, train/test splits, repeat averaging, relaxation
//! duration sweeps and report assembly.
//!
//! Splits are expressed as indices into [`Dataset::records`]. For the
//! cell-level strategies (default, S1, S2, S3) a cell's records never
//! straddle train and test; S4 cuts every cell's cycle-ordered records at
//! 80 %.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetId};
use crate::error::{feature_kind, learner_kind, ErrorKind};
use crate::features::{extract_dataset, EcmFitOptions, FeatureError, FeatureFamily, InputTransform};
use crate::learners::{train, LearnerConfig, LearnerError, LearnerKind, Model};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {observed} observed vs {predicted} predicted values")]
    LengthMismatch { observed: usize, predicted: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("dataset mixes {0}; select a single dataset id")]
    MixedDatasets(String),
    #[error("condition {0} not present")]
    MissingCondition(String),
    #[error("not enough cells in {scope}: need {needed}, have {have}")]
    InsufficientCells { scope: String, needed: usize, have: usize },
    #[error("temperature {0} °C not present")]
    MissingTemperature(f64),
    #[error("leave-temperature-out needs two training temperatures, dataset has {0} in total")]
    InsufficientTemperatures(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("{duration_s} s of relaxation leaves {got} samples; {family} features need {needed}")]
    TooFewSamples { duration_s: f64, family: FeatureFamily, needed: usize, got: usize },
    #[error("no sample within {0} s")]
    EmptyTruncation(f64),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("{context}: {source}")]
    Context { context: String, source: Box<EvalError> },
    #[error("stored rmse {stored} disagrees with {recomputed} recomputed from the rows")]
    ReportMismatch { stored: f64, recomputed: f64 },
    #[error("report: {0}")]
    Format(String),
}

impl EvalError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            EvalError::InvalidSplit(_) | EvalError::TooFewSamples { .. } => ErrorKind::Usage,
            EvalError::Feature(e) => feature_kind(e),
            EvalError::Learner(e) => learner_kind(e),
            EvalError::Context { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    pub fn context(self, context: impl Into<String>) -> EvalError {
        EvalError::Context { context: context.into(), source: Box::new(self) }
    }
}

/// Root mean squared error.
pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch { observed: y.len(), predicted: yhat.len() });
    }
    if y.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let sse: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Half of each condition's cells train (extra cell to training); for
    /// D3, one cell each from CY25-0.5/1 and CY25-0.5/4.
    #[default]
    Default,
    /// Train ratio applied within each condition.
    #[serde(alias = "s1_ratio_per_condition")]
    S1,
    /// Train ratio applied over all cells.
    #[serde(alias = "s2_ratio_global")]
    S2,
    /// Leave one temperature out.
    #[serde(alias = "s3_leave_temp_out")]
    S3,
    /// First 80 % of each cell's cycles train, the rest test.
    #[serde(alias = "s4_first80_last20")]
    S4,
}

impl FromStr for SplitKind {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "default" => Ok(SplitKind::Default),
            "s1" | "s1_ratio_per_condition" => Ok(SplitKind::S1),
            "s2" | "s2_ratio_global" => Ok(SplitKind::S2),
            "s3" | "s3_leave_temp_out" => Ok(SplitKind::S3),
            "s4" | "s4_first80_last20" => Ok(SplitKind::S4),
            _ => Err(EvalError::InvalidSplit(format!("unknown split kind {s:?}"))),
        }
    }
}

/// Parses a train ratio given as `a:b` (train:test) or as a fraction.
pub fn parse_ratio(s: &str) -> Result<f64, EvalError> {
    let bad = || EvalError::InvalidSplit(format!("bad ratio {s:?}"));
    let r = match s.split_once(':') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            a / (a + b)
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if r > 0.0 && r < 1.0 {
        Ok(r)
    } else {
        Err(bad())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub kind: SplitKind,
    /// Fraction of cells used for training (S1, S2).
    pub ratio_train: f64,
    /// S3 only; `None` holds out each temperature in turn.
    pub held_out_temp_c: Option<f64>,
    /// Defaults to 20 for S1/S2 and 1 otherwise. S3 and S4 are deterministic.
    pub repeats: Option<usize>,
    /// Defaults to a seed derived from the experiment seed.
    pub seed: Option<u64>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { kind: SplitKind::Default, ratio_train: 0.5, held_out_temp_c: None, repeats: None, seed: None }
    }
}

impl SplitSpec {
    pub fn of(kind: SplitKind) -> Self {
        SplitSpec { kind, ..SplitSpec::default() }
    }

    pub fn effective_repeats(&self) -> usize {
        match (self.kind, self.repeats) {
            (SplitKind::S3 | SplitKind::S4, _) => 1,
            (_, Some(r)) => r,
            (SplitKind::S1 | SplitKind::S2, None) => 20,
            (_, None) => 1,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if matches!(self.kind, SplitKind::S1 | SplitKind::S2) && !(self.ratio_train > 0.0 && self.ratio_train < 1.0) {
            return Err(EvalError::InvalidSplit(format!("ratio_train {} outside (0, 1)", self.ratio_train)));
        }
        if self.repeats == Some(0) {
            return Err(EvalError::InvalidSplit("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// One train/test partition, as indices into [`Dataset::records`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub label: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn single_dataset_id(ds: &Dataset) -> Result<DatasetId, EvalError> {
    let ids = ds.dataset_ids();
    match ids.len() {
        0 => Err(EvalError::EmptyInput),
        1 => Ok(*ids.iter().next().expect("one id")),
        _ => Err(EvalError::MixedDatasets(ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", "))),
    }
}

fn split_from_cells(ds: &Dataset, label: String, train_cells: &BTreeSet<&str>) -> Split {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, r) in ds.records().iter().enumerate() {
        if train_cells.contains(r.cell_id()) {
            train.push(i);
        } else {
            test.push(i);
        }
    }
    Split { label, train, test }
}

/// Training-side count for `ratio` of `n` cells: `floor(ratio·n + 0.5)`,
/// kept within `[1, n − 1]`.
fn ratio_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).clamp(1, n - 1)
}

fn draw_cells<'a>(cells: &[&'a str], k: usize, rng: &mut impl rand::Rng) -> Vec<&'a str> {
    let mut cells = cells.to_vec();
    cells.shuffle(rng);
    cells.truncate(k);
    cells
}

/// The default split of a single-dataset `ds`.
pub fn split_default(ds: &Dataset, seed: u64) -> Result<Split, EvalError> {
    let id = single_dataset_id(ds)?;
    let mut rng = seed::rng(seed);
    let conditions = ds.conditions();
    let mut train: BTreeSet<&str> = BTreeSet::new();
    match id {
        DatasetId::D1 | DatasetId::D2 => {
            for cells in conditions.values() {
                let cells: Vec<&str> = cells.iter().map(String::as_str).collect();
                train.extend(draw_cells(&cells, cells.len().div_ceil(2), &mut rng));
            }
        }
        DatasetId::D3 => {
            for name in D3_TRAIN_CONDITIONS {
                let cells = conditions.get(name).ok_or_else(|| EvalError::MissingCondition(name.to_string()))?;
                let cells: Vec<&str> = cells.iter().map(String::as_str).collect();
                train.extend(draw_cells(&cells, 1, &mut rng));
            }
        }
    }
    if train.len() == ds.n_cells() {
        return Err(EvalError::InsufficientCells {
            scope: "dataset".into(),
            needed: train.len() + 1,
            have: ds.n_cells(),
        });
    }
    Ok(split_from_cells(ds, "default".into(), &train))
}

/// Conditions contributing one training cell each under the D3 default split.
pub const D3_TRAIN_CONDITIONS: [&str; 2] = ["CY25-0.5/1", "CY25-0.5/4"];

/// Seed of repeat `k` under split seed `base`.
pub fn repeat_seed(base: u64, k: usize) -> u64 {
    seed::derive_labeled(base, "repeat", k as u64)
}

/// All splits described by `spec`. `base_seed` is used when `spec.seed` is unset.
pub fn split_strategy(ds: &Dataset, spec: &SplitSpec, base_seed: u64) -> Result<Vec<Split>, EvalError> {
    spec.validate()?;
    if ds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let base = spec.seed.unwrap_or(base_seed);
    let repeats = spec.effective_repeats();
    match spec.kind {
        SplitKind::Default => (0..repeats)
            .map(|k| {
                let mut s = split_default(ds, repeat_seed(base, k))?;
                s.label = format!("default#{k}");
                Ok(s)
            })
            .collect(),
        SplitKind::S1 => {
            let conditions = ds.conditions();
            for (name, cells) in &conditions {
                if cells.len() < 2 {
                    return Err(EvalError::InsufficientCells { scope: name.clone(), needed: 2, have: cells.len() });
                }
            }
            Ok((0..repeats)
                .map(|k| {
                    let mut rng = seed::rng(repeat_seed(base, k));
                    let mut train = BTreeSet::new();
                    for cells in conditions.values() {
                        let cells: Vec<&str> = cells.iter().map(String::as_str).collect();
                        train.extend(draw_cells(&cells, ratio_count(spec.ratio_train, cells.len()), &mut rng));
                    }
                    split_from_cells(ds, format!("s1#{k}"), &train)
                })
                .collect())
        }
        SplitKind::S2 => {
            let cells: Vec<&str> = ds.cell_ids().collect();
            if cells.len() < 2 {
                return Err(EvalError::InsufficientCells { scope: "dataset".into(), needed: 2, have: cells.len() });
            }
            Ok((0..repeats)
                .map(|k| {
                    let mut rng = seed::rng(repeat_seed(base, k));
                    let train: BTreeSet<&str> =
                        draw_cells(&cells, ratio_count(spec.ratio_train, cells.len()), &mut rng).into_iter().collect();
                    split_from_cells(ds, format!("s2#{k}"), &train)
                })
                .collect())
        }
        SplitKind::S3 => {
            let temps = ds.temperatures();
            if temps.len() < 3 {
                return Err(EvalError::InsufficientTemperatures(temps.len()));
            }
            let held: Vec<f64> = match spec.held_out_temp_c {
                Some(t) if temps.contains(&t) => vec![t],
                Some(t) => return Err(EvalError::MissingTemperature(t)),
                None => temps,
            };
            Ok(held
                .into_iter()
                .map(|t| {
                    let train: BTreeSet<&str> =
                        ds.cells().filter(|c| c.temperature_c != t).map(|c| c.cell_id.as_str()).collect();
                    split_from_cells(ds, format!("s3:{t}C"), &train)
                })
                .collect())
        }
        SplitKind::S4 => {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            let mut offset = 0;
            for cell in ds.cell_ids() {
                let n = ds.records_of_cell(cell).len();
                let cut = n * 4 / 5;
                train.extend(offset..offset + cut);
                test.extend(offset + cut..offset + n);
                offset += n;
            }
            Ok(vec![Split { label: "s4".into(), train, test }])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Restrict to one dataset id; required when the input mixes several.
    pub dataset: Option<DatasetId>,
    pub features: FeatureFamily,
    /// Truncate every curve to this much relaxation; `None` uses it all.
    pub relaxation_duration_s: Option<f64>,
    pub learner: LearnerConfig,
    pub split: SplitSpec,
    pub ecm: EcmFitOptions,
    pub input_transform: InputTransform,
    /// Drop ECM records whose fit RSS exceeds this (V²).
    pub max_fit_rss: Option<f64>,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            features: FeatureFamily::Ecm,
            relaxation_duration_s: None,
            learner: LearnerConfig::default(),
            split: SplitSpec::default(),
            ecm: EcmFitOptions::default(),
            input_transform: InputTransform::default(),
            max_fit_rss: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, EvalError> {
        toml::from_str(s).map_err(|e| EvalError::InvalidSplit(format!("experiment config: {e}")))
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or_else(|| seed::derive_labeled(self.seed, "split", 0))
    }

    pub fn learner_seed(&self, repeat: usize) -> u64 {
        seed::derive_labeled(self.seed, "learner", repeat as u64)
    }
}

/// Learner inputs and targets for every record of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    /// False for records removed by the fit-RSS filter.
    pub keep: Vec<bool>,
}

/// Smallest per-curve sample count after truncating to `duration_s`.
pub fn min_samples_within(ds: &Dataset, duration_s: Option<f64>) -> usize {
    ds.records().iter().map(|r| duration_s.map_or(r.curve.len(), |d| r.curve.samples_within(d))).min().unwrap_or(0)
}

fn check_duration(ds: &Dataset, family: FeatureFamily, duration_s: Option<f64>) -> Result<(), EvalError> {
    let got = min_samples_within(ds, duration_s);
    let needed = family.min_samples();
    match duration_s {
        Some(d) if family == FeatureFamily::Ecm && got < needed => {
            Err(EvalError::TooFewSamples { duration_s: d, family, needed, got })
        }
        Some(d) if got == 0 => Err(EvalError::EmptyTruncation(d)),
        Some(d) if got < needed => Err(EvalError::TooFewSamples { duration_s: d, family, needed, got }),
        _ => Ok(()),
    }
}

/// Extracts features per `cfg` for every record of `ds`.
pub fn feature_table(ds: &Dataset, cfg: &ExperimentConfig) -> Result<FeatureTable, EvalError> {
    check_duration(ds, cfg.features, cfg.relaxation_duration_s)?;
    let fvs = extract_dataset(ds, cfg.features, cfg.relaxation_duration_s, &cfg.ecm)?;
    let x = fvs.iter().map(|f| cfg.input_transform.apply(cfg.features, &f.values)).collect();
    let keep = fvs.iter().map(|f| cfg.max_fit_rss.is_none_or(|m| f.fit_rss.is_none_or(|r| r <= m))).collect();
    let y = ds.records().iter().map(|r| r.soh_pct).collect();
    Ok(FeatureTable { x, y, keep })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub cell_id: String,
    pub cycle_number: u32,
    pub observed_soh_pct: f64,
    /// Mean over the repeats in which the record was a test sample.
    pub predicted_soh_pct: f64,
    /// Standard deviation of the repeat mixture, for learners with variance.
    pub predictive_std_pct: Option<f64>,
    pub n_repeats: usize,
    /// Training-mean prediction averaged the same way.
    pub baseline_soh_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub label: String,
    pub train_cells: Vec<String>,
    pub test_cells: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub learner_seed: u64,
    pub rmse_pct: f64,
}

pub const REPORT_FORMAT: &str = "soh-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    pub family: FeatureFamily,
    pub learner: LearnerKind,
    pub relaxation_duration_s: Option<f64>,
    pub n_records: usize,
    pub n_filtered: usize,
    pub rmse_pct: f64,
    pub baseline_rmse_pct: f64,
    pub splits: Vec<SplitManifest>,
    pub rows: Vec<PredictionRow>,
    /// The only field that varies between identical runs.
    pub wall_time_s: f64,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let r: ExperimentReport = serde_json::from_str(text).map_err(|e| EvalError::Format(e.to_string()))?;
        if r.format != REPORT_FORMAT || r.version != REPORT_VERSION {
            return Err(EvalError::Format(format!("unsupported report {} v{}", r.format, r.version)));
        }
        Ok(r)
    }

    /// RMSE recomputed from the stored rows.
    pub fn recompute_rmse(&self) -> Result<f64, EvalError> {
        let y: Vec<f64> = self.rows.iter().map(|r| r.observed_soh_pct).collect();
        let p: Vec<f64> = self.rows.iter().map(|r| r.predicted_soh_pct).collect();
        rmse(&y, &p)
    }

    /// Fails unless the stored RMSE matches the rows to 1e-12.
    pub fn verify(&self) -> Result<f64, EvalError> {
        let recomputed = self.recompute_rmse()?;
        if (recomputed - self.rmse_pct).abs() > 1e-12 {
            return Err(EvalError::ReportMismatch { stored: self.rmse_pct, recomputed });
        }
        Ok(recomputed)
    }
}

/// Fits `cfg.learner` on the kept training rows of `table`.
pub fn fit_on(cfg: &LearnerConfig, table: &FeatureTable, rows: &[usize], seed: u64) -> Result<Model, EvalError> {
    let (x, y): (Vec<Vec<f64>>, Vec<f64>) =
        rows.iter().filter(|&&i| table.keep[i]).map(|&i| (table.x[i].clone(), table.y[i])).unzip();
    Ok(train(cfg, &x, &y, seed)?)
}

struct RepeatOutcome {
    /// `(record index, mean, variance, baseline)`
    preds: Vec<(usize, f64, Option<f64>, f64)>,
    manifest: SplitManifest,
}

fn run_split(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    table: &FeatureTable,
    split: &Split,
    k: usize,
) -> Result<RepeatOutcome, EvalError> {
    let learner_seed = cfg.learner_seed(k);
    let train_rows: Vec<usize> = split.train.iter().copied().filter(|&i| table.keep[i]).collect();
    let test_rows: Vec<usize> = split.test.iter().copied().filter(|&i| table.keep[i]).collect();
    if test_rows.is_empty() {
        return Err(EvalError::EmptyInput.context(format!("split {}: no test records", split.label)));
    }
    let model = fit_on(&cfg.learner, table, &train_rows, learner_seed)
        .map_err(|e| e.context(format!("split {}: training", split.label)))?;
    let baseline = fit_on(&LearnerConfig::of(LearnerKind::ConstantMean), table, &train_rows, learner_seed)
        .map_err(|e| e.context(format!("split {}: baseline", split.label)))?;
    let mut preds = Vec::with_capacity(test_rows.len());
    for &i in &test_rows {
        let p = model.predict(&table.x[i]).map_err(|e| EvalError::from(e).context(format!("split {}", split.label)))?;
        preds.push((i, p.mean, p.variance, baseline.predict_mean(&table.x[i])?));
    }
    let y: Vec<f64> = preds.iter().map(|p| table.y[p.0]).collect();
    let m: Vec<f64> = preds.iter().map(|p| p.1).collect();
    let cells = |rows: &[usize]| -> Vec<String> {
        rows.iter().map(|&i| ds.records()[i].cell_id().to_string()).collect::<BTreeSet<_>>().into_iter().collect()
    };
    let manifest = SplitManifest {
        label: split.label.clone(),
        train_cells: cells(&train_rows),
        test_cells: cells(&test_rows),
        n_train: train_rows.len(),
        n_test: test_rows.len(),
        learner_seed,
        rmse_pct: rmse(&y, &m)?,
    };
    Ok(RepeatOutcome { preds, manifest })
}

#[derive(Default)]
struct Accumulator {
    n: usize,
    mean: f64,
    second: f64,
    var: Option<f64>,
    baseline: f64,
}

/// Runs one experiment: truncate, extract, fit per split, predict, average.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentReport, EvalError> {
    let started = Instant::now();
    let selected;
    let ds = match cfg.dataset {
        Some(id) => {
            selected = ds.select_dataset(id);
            &selected
        }
        None => ds,
    };
    if ds.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let table = feature_table(ds, cfg)?;
    let splits = split_strategy(ds, &cfg.split, cfg.split_seed())?;
    let outcomes: Vec<RepeatOutcome> =
        splits.par_iter().enumerate().map(|(k, s)| run_split(ds, cfg, &table, s, k)).collect::<Result<_, _>>()?;

    let mut acc: BTreeMap<usize, Accumulator> = BTreeMap::new();
    for o in &outcomes {
        for &(i, m, v, b) in &o.preds {
            let a = acc.entry(i).or_default();
            a.n += 1;
            a.mean += m;
            a.second += m * m;
            a.var = v.map(|v| a.var.unwrap_or(0.0) + v);
            a.baseline += b;
        }
    }
    let rows: Vec<PredictionRow> = acc
        .into_iter()
        .map(|(i, a)| {
            let n = a.n as f64;
            let mean = a.mean / n;
            // mixture variance: mean within-repeat variance plus spread of the means
            let std = a.var.map(|v| (v / n + (a.second / n - mean * mean).max(0.0)).sqrt());
            let r = &ds.records()[i];
            PredictionRow {
                cell_id: r.cell_id().to_string(),
                cycle_number: r.cycle_number,
                observed_soh_pct: r.soh_pct,
                predicted_soh_pct: mean,
                predictive_std_pct: std,
                n_repeats: a.n,
                baseline_soh_pct: a.baseline / n,
            }
        })
        .collect();
    let y: Vec<f64> = rows.iter().map(|r| r.observed_soh_pct).collect();
    let p: Vec<f64> = rows.iter().map(|r| r.predicted_soh_pct).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.baseline_soh_pct).collect();
    Ok(ExperimentReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config: cfg.clone(),
        family: cfg.features,
        learner: cfg.learner.kind,
        relaxation_duration_s: cfg.relaxation_duration_s,
        n_records: ds.len(),
        n_filtered: table.keep.iter().filter(|k| !**k).count(),
        rmse_pct: rmse(&y, &p)?,
        baseline_rmse_pct: rmse(&y, &b)?,
        splits: outcomes.into_iter().map(|o| o.manifest).collect(),
        rows,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub duration_s: f64,
    pub result: Result<ExperimentReport, EvalError>,
}

/// One experiment per relaxation duration with shared seeds. An ECM sweep
/// with any duration below the six-sample minimum is rejected before any
/// work is done; other per-duration failures are reported in place.
pub fn relaxation_sweep(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    durations_s: &[f64],
) -> Result<Vec<SweepPoint>, EvalError> {
    if durations_s.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let ds_sel;
    let scope = match cfg.dataset {
        Some(id) => {
            ds_sel = ds.select_dataset(id);
            &ds_sel
        }
        None => ds,
    };
    if cfg.features == FeatureFamily::Ecm {
        for &d in durations_s {
            let got = min_samples_within(scope, Some(d));
            let needed = FeatureFamily::Ecm.min_samples();
            if got < needed {
                return Err(EvalError::TooFewSamples { duration_s: d, family: FeatureFamily::Ecm, needed, got });
            }
        }
    }
    Ok(durations_s
        .par_iter()
        .map(|&d| {
            let point = ExperimentConfig { relaxation_duration_s: Some(d), ..cfg.clone() };
            SweepPoint {
                duration_s: d,
                result: run_experiment(&point, ds).map_err(|e| e.context(format!("duration {d} s"))),
            }
        })
        .collect())
}

/// Per-sample rows as CSV (observed vs predicted).
pub fn write_predictions_csv<W: Write>(report: &ExperimentReport, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// RMSE against relaxation duration as CSV; failed points have an empty RMSE.
pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["duration_s", "duration_min", "rmse_pct", "error"])?;
    for p in points {
        let (rmse, err) = match &p.result {
            Ok(r) => (r.rmse_pct.to_string(), String::new()),
            Err(e) => (String::new(), e.to_string()),
        };
        w.write_record([p.duration_s.to_string(), (p.duration_s / 60.0).to_string(), rmse, err])?;
    }
    w.flush()?;
    Ok(())
}

/// Learner (and duration) rows by feature-family columns, each row's
/// smallest RMSE marked.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmseTable {
    pub columns: Vec<FeatureFamily>,
    pub rows: Vec<RmseTableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RmseTableRow {
    pub label: String,
    pub rmse_pct: Vec<Option<f64>>,
    /// Column index of the row minimum.
    pub min_column: Option<usize>,
}

pub fn rmse_table(reports: &[ExperimentReport]) -> RmseTable {
    let columns: Vec<FeatureFamily> = reports.iter().map(|r| r.family).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rows: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for r in reports {
        let label = match r.relaxation_duration_s {
            Some(d) => format!("{} {d}s", r.learner),
            None => r.learner.to_string(),
        };
        let col = columns.iter().position(|c| *c == r.family).expect("column exists");
        rows.entry(label).or_insert_with(|| vec![None; columns.len()])[col] = Some(r.rmse_pct);
    }
    let rows = rows
        .into_iter()
        .map(|(label, rmse_pct)| {
            let min_column = rmse_pct
                .iter()
                .enumerate()
                .filter_map(|(j, v)| v.map(|v| (j, v)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| j);
            RmseTableRow { label, rmse_pct, min_column }
        })
        .collect();
    RmseTable { columns, rows }
}

/// The table as CSV; the row minimum carries a trailing `*`.
pub fn write_rmse_table_csv<W: Write>(table: &RmseTable, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["row".to_string()];
    header.extend(table.columns.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    for row in &table.rows {
        let mut rec = vec![row.label.clone()];
        for (j, v) in row.rmse_pct.iter().enumerate() {
            let mark = if row.min_column == Some(j) { "*" } else { "" };
            rec.push(v.map(|v| format!("{v:.4}{mark}")).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
