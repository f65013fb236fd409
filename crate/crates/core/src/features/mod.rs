//! Feature extraction from relaxation curves.
//!
//! Three families are supported:
//!
//! * **ORIGI**: the sampled voltages themselves.
//! * **STATS**: `[Max, Mean, Min, Var, Ske, Kur]` of the sampled voltages.
//! * **ECM**: `[OCV, R0, R1, R2, C1, C2]` of a fitted second-order RC circuit.

pub mod ecm;
pub mod stats;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{truncate_relaxation, CycleRecord, Dataset, DatasetError, RelaxationCurve};
pub use ecm::{compute_r0, fit_ecm, relaxation_model_voltage, EcmFitOptions, EcmParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("cutoff current is zero")]
    ZeroCurrent,
    #[error("ECM fit did not converge (rss {rss:e}, gradient {grad:e})")]
    NoConvergence { rss: f64, grad: f64 },
    #[error("negative R0 ({0} ohm): inconsistent fit")]
    NegativeR0(f64),
    #[error("unknown feature family {0:?}")]
    UnknownFamily(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{cell_id} cycle {cycle}: {source}")]
    Record { cell_id: String, cycle: u32, source: Box<FeatureError> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFamily {
    Ecm,
    Stats,
    Origi,
}

impl FeatureFamily {
    pub const ALL: [FeatureFamily; 3] = [FeatureFamily::Ecm, FeatureFamily::Stats, FeatureFamily::Origi];

    /// Smallest number of samples the family can be extracted from.
    pub fn min_samples(self) -> usize {
        match self {
            FeatureFamily::Ecm => ecm::MIN_SAMPLES,
            FeatureFamily::Stats => 2,
            FeatureFamily::Origi => 1,
        }
    }
}

impl fmt::Display for FeatureFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureFamily::Ecm => "ECM",
            FeatureFamily::Stats => "STATS",
            FeatureFamily::Origi => "ORIGI",
        })
    }
}

impl FromStr for FeatureFamily {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ecm" => Ok(FeatureFamily::Ecm),
            "stats" => Ok(FeatureFamily::Stats),
            "origi" => Ok(FeatureFamily::Origi),
            _ => Err(FeatureError::UnknownFamily(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub family: FeatureFamily,
    pub values: Vec<f64>,
    /// Length of relaxation data the features were computed from, seconds.
    pub relaxation_duration_s: f64,
    pub cell_id: String,
    pub cycle_number: u32,
    /// ECM only.
    pub fit_rss: Option<f64>,
    pub degenerate: bool,
}

/// Smallest branch resistance or capacitance passed through the logarithm
/// of [`InputTransform::LogEcm`].
pub const ECM_LOG_FLOOR: f64 = 1e-6;

/// How feature values are presented to a learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputTransform {
    /// Values as extracted.
    Identity,
    /// ECM vectors become `[OCV, R0, ln R1, ln R2, ln C1, ln C2]`; other
    /// families are unchanged. R0 stays linear because degenerate fits clamp
    /// it to exactly zero.
    #[default]
    LogEcm,
}

impl InputTransform {
    pub fn apply(self, family: FeatureFamily, values: &[f64]) -> Vec<f64> {
        match (self, family) {
            (InputTransform::LogEcm, FeatureFamily::Ecm) => {
                values.iter().enumerate().map(|(j, &v)| if j < 2 { v } else { v.max(ECM_LOG_FLOOR).ln() }).collect()
            }
            _ => values.to_vec(),
        }
    }
}

/// The sampled voltages, in order.
pub fn extract_origi(curve: &RelaxationCurve) -> FeatureVector {
    FeatureVector {
        family: FeatureFamily::Origi,
        values: curve.voltages_v.clone(),
        relaxation_duration_s: curve.last_time(),
        cell_id: String::new(),
        cycle_number: 0,
        fit_rss: None,
        degenerate: false,
    }
}

pub fn extract_stats(curve: &RelaxationCurve) -> Result<FeatureVector, FeatureError> {
    let values =
        stats::moments(&curve.voltages_v).ok_or(FeatureError::TooFewSamples { needed: 2, got: curve.len() })?;
    Ok(FeatureVector {
        family: FeatureFamily::Stats,
        values: values.to_vec(),
        relaxation_duration_s: curve.last_time(),
        cell_id: String::new(),
        cycle_number: 0,
        fit_rss: None,
        degenerate: false,
    })
}

pub fn extract_ecm(curve: &RelaxationCurve, opts: &EcmFitOptions) -> Result<FeatureVector, FeatureError> {
    let p = fit_ecm(curve, opts)?;
    Ok(FeatureVector {
        family: FeatureFamily::Ecm,
        values: p.feature_values().to_vec(),
        relaxation_duration_s: curve.last_time(),
        cell_id: String::new(),
        cycle_number: 0,
        fit_rss: Some(p.fit_rss),
        degenerate: p.degenerate,
    })
}

pub fn extract(
    curve: &RelaxationCurve,
    family: FeatureFamily,
    ecm_opts: &EcmFitOptions,
) -> Result<FeatureVector, FeatureError> {
    match family {
        FeatureFamily::Origi => Ok(extract_origi(curve)),
        FeatureFamily::Stats => extract_stats(curve),
        FeatureFamily::Ecm => extract_ecm(curve, ecm_opts),
    }
}

/// Features of one record, after truncating its curve to `duration_s` when given.
pub fn extract_record(
    record: &CycleRecord,
    family: FeatureFamily,
    duration_s: Option<f64>,
    ecm_opts: &EcmFitOptions,
) -> Result<FeatureVector, FeatureError> {
    let annotate = |e: FeatureError| FeatureError::Record {
        cell_id: record.cell_id().to_string(),
        cycle: record.cycle_number,
        source: Box::new(e),
    };
    let curve = match duration_s {
        Some(d) => truncate_relaxation(&record.curve, d).map_err(|e| annotate(e.into()))?,
        None => record.curve.clone(),
    };
    let mut fv = extract(&curve, family, ecm_opts).map_err(annotate)?;
    fv.cell_id = record.cell_id().to_string();
    fv.cycle_number = record.cycle_number;
    if let Some(d) = duration_s {
        fv.relaxation_duration_s = d;
    }
    Ok(fv)
}

/// Features of every record of `ds`, in dataset order. Records are processed
/// in parallel on the current rayon pool; the output order is deterministic.
pub fn extract_dataset(
    ds: &Dataset,
    family: FeatureFamily,
    duration_s: Option<f64>,
    ecm_opts: &EcmFitOptions,
) -> Result<Vec<FeatureVector>, FeatureError> {
    ds.records().par_iter().map(|r| extract_record(r, family, duration_s, ecm_opts)).collect()
}

/// Writes feature rows as
/// `cell_id,cycle_number,family,relaxation_duration_s,fit_rss,degenerate,f1..fK`.
/// Rows shorter than the widest are padded with empty cells.
pub fn write_features<W: Write>(rows: &[FeatureVector], writer: W) -> std::io::Result<()> {
    let k = rows.iter().map(|r| r.values.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> =
        ["cell_id", "cycle_number", "family", "relaxation_duration_s", "fit_rss", "degenerate"]
            .map(String::from)
            .to_vec();
    header.extend((1..=k).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.cell_id.clone(),
            r.cycle_number.to_string(),
            r.family.to_string(),
            r.relaxation_duration_s.to_string(),
            r.fit_rss.map(|v| v.to_string()).unwrap_or_default(),
            r.degenerate.to_string(),
        ];
        rec.extend(r.values.iter().map(f64::to_string));
        rec.resize(header.len(), String::new());
        w.write_record(&rec)?;
    }
    w.flush()
}
