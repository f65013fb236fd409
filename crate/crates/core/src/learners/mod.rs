//! Regressors mapping feature vectors to SOH behind one interface.
//!
//! [`train`] fits the learner selected by a [`LearnerConfig`]; the resulting
//! [`Model`] predicts a mean and, for GPR, a variance.

pub mod gbrt;
pub mod svr;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureFamily;
use crate::gpr::{fit_gpr, predict_gpr, GprConfig, GprError, GprModel};
pub use gbrt::{fit_gbrt, GbrtModel, GbrtParams};
pub use svr::{fit_svr, SvrModel, SvrParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error(transparent)]
    Gpr(#[from] GprError),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in training data")]
    NonFiniteInput,
    #[error("too few training samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("invalid learner parameters: {0}")]
    InvalidParams(String),
    #[error("unknown learner {0:?}")]
    UnknownLearner(String),
    #[error("model file: {0}")]
    Format(String),
}

/// Checks shape and finiteness; returns the feature dimension.
pub(crate) fn validate_training(x: &[Vec<f64>], y: &[f64]) -> Result<usize, LearnerError> {
    if x.len() < 2 {
        return Err(LearnerError::TooFewSamples { needed: 2, got: x.len() });
    }
    if x.len() != y.len() {
        return Err(LearnerError::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    let d = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != d) {
        return Err(LearnerError::DimensionMismatch { expected: d, got: r.len() });
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(LearnerError::NonFiniteInput);
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Gpr,
    Svr,
    Gbrt,
    /// Predicts the training-target mean; a sanity baseline.
    ConstantMean,
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerKind::Gpr => "gpr",
            LearnerKind::Svr => "svr",
            LearnerKind::Gbrt => "gbrt",
            LearnerKind::ConstantMean => "constant_mean",
        })
    }
}

impl FromStr for LearnerKind {
    type Err = LearnerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gpr" => Ok(LearnerKind::Gpr),
            "svr" => Ok(LearnerKind::Svr),
            "gbrt" | "xgboost" => Ok(LearnerKind::Gbrt),
            "constant_mean" | "mean" => Ok(LearnerKind::ConstantMean),
            _ => Err(LearnerError::UnknownLearner(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub kind: LearnerKind,
    pub gpr: GprConfig,
    pub svr: SvrParams,
    pub gbrt: GbrtParams,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            kind: LearnerKind::Gpr,
            gpr: GprConfig::default(),
            svr: SvrParams::default(),
            gbrt: GbrtParams::default(),
        }
    }
}

impl LearnerConfig {
    pub fn of(kind: LearnerKind) -> Self {
        LearnerConfig { kind, ..LearnerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantMeanModel {
    pub mean: f64,
    pub n_features: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "learner", rename_all = "snake_case")]
pub enum Model {
    Gpr(GprModel),
    Svr(SvrModel),
    Gbrt(GbrtModel),
    ConstantMean(ConstantMeanModel),
}

impl Model {
    pub fn kind(&self) -> LearnerKind {
        match self {
            Model::Gpr(_) => LearnerKind::Gpr,
            Model::Svr(_) => LearnerKind::Svr,
            Model::Gbrt(_) => LearnerKind::Gbrt,
            Model::ConstantMean(_) => LearnerKind::ConstantMean,
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            Model::Gpr(m) => m.n_features(),
            Model::Svr(m) => m.n_features(),
            Model::Gbrt(m) => m.n_features,
            Model::ConstantMean(m) => m.n_features,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction, LearnerError> {
        match self {
            Model::Gpr(m) => {
                let (mean, var) = predict_gpr(m, x)?;
                Ok(Prediction { mean, variance: Some(var) })
            }
            Model::Svr(m) => Ok(Prediction { mean: m.predict(x)?, variance: None }),
            Model::Gbrt(m) => Ok(Prediction { mean: m.predict(x)?, variance: None }),
            Model::ConstantMean(m) => {
                if x.len() != m.n_features {
                    return Err(LearnerError::DimensionMismatch { expected: m.n_features, got: x.len() });
                }
                Ok(Prediction { mean: m.mean, variance: None })
            }
        }
    }

    pub fn predict_mean(&self, x: &[f64]) -> Result<f64, LearnerError> {
        match self {
            Model::Gpr(m) => Ok(m.predict_mean(x)?),
            _ => self.predict(x).map(|p| p.mean),
        }
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<Prediction>, LearnerError> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

/// Fits the configured learner. Training rows are put in a canonical order
/// first, so the result does not depend on the order they are supplied in.
pub fn train(cfg: &LearnerConfig, x: &[Vec<f64>], y: &[f64], seed: u64) -> Result<Model, LearnerError> {
    match cfg.kind {
        LearnerKind::Gpr => {
            let gpr = GprConfig { seed, ..cfg.gpr.clone() };
            Ok(Model::Gpr(fit_gpr(x, y, &gpr)?))
        }
        LearnerKind::Svr => Ok(Model::Svr(fit_svr(x, y, &cfg.svr, seed)?)),
        LearnerKind::Gbrt => Ok(Model::Gbrt(fit_gbrt(x, y, &cfg.gbrt, seed)?)),
        LearnerKind::ConstantMean => {
            let d = validate_training(x, y)?;
            let mut sorted = y.to_vec();
            sorted.sort_by(f64::total_cmp);
            Ok(Model::ConstantMean(ConstantMeanModel {
                mean: sorted.iter().sum::<f64>() / y.len() as f64,
                n_features: d,
            }))
        }
    }
}

pub const MODEL_FORMAT: &str = "soh-model";
pub const MODEL_VERSION: u32 = 1;

/// Serialized model container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub family: FeatureFamily,
    pub relaxation_duration_s: Option<f64>,
    pub model: Model,
}

impl ModelFile {
    pub fn new(family: FeatureFamily, relaxation_duration_s: Option<f64>, model: Model) -> Self {
        ModelFile { format: MODEL_FORMAT.to_string(), version: MODEL_VERSION, family, relaxation_duration_s, model }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, LearnerError> {
        let f: ModelFile = serde_json::from_str(text).map_err(|e| LearnerError::Format(e.to_string()))?;
        if f.format != MODEL_FORMAT || f.version != MODEL_VERSION {
            return Err(LearnerError::Format(format!("unsupported container {} v{}", f.format, f.version)));
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> (Vec<Vec<f64>>, Vec<f64>) {
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64, (i as f64 * 0.5).sin()]).collect();
        let y = x.iter().map(|r| 90.0 - r[0] + r[1]).collect();
        (x, y)
    }

    #[test]
    fn every_learner_round_trips_through_the_container() {
        let (x, y) = data();
        for kind in [LearnerKind::Gpr, LearnerKind::Svr, LearnerKind::Gbrt, LearnerKind::ConstantMean] {
            let model = train(&LearnerConfig::of(kind), &x, &y, 1).unwrap();
            let file = ModelFile::new(FeatureFamily::Stats, Some(720.0), model);
            let back = ModelFile::from_json(&file.to_json()).unwrap();
            assert_eq!(back.model.kind(), kind);
            let p = [3.3, 0.1];
            assert_eq!(back.model.predict(&p).unwrap(), file.model.predict(&p).unwrap());
        }
    }

    #[test]
    fn only_gpr_reports_variance() {
        let (x, y) = data();
        for kind in [LearnerKind::Gpr, LearnerKind::Svr] {
            let p = train(&LearnerConfig::of(kind), &x, &y, 0).unwrap().predict(&x[0]).unwrap();
            assert_eq!(p.variance.is_some(), kind == LearnerKind::Gpr);
        }
    }

    #[test]
    fn constant_mean_baseline() {
        let (x, y) = data();
        let m = train(&LearnerConfig::of(LearnerKind::ConstantMean), &x, &y, 0).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((m.predict_mean(&[0.0, 0.0]).unwrap() - mean).abs() < 1e-12);
        assert!(m.predict(&[0.0]).is_err());
    }

    #[test]
    fn rejects_wrong_container() {
        assert!(matches!(ModelFile::from_json("{\"format\":\"x\"}"), Err(LearnerError::Format(_))));
    }

    #[test]
    fn learner_names() {
        assert_eq!("GPR".parse::<LearnerKind>().unwrap(), LearnerKind::Gpr);
        assert_eq!("constant-mean".parse::<LearnerKind>().unwrap(), LearnerKind::ConstantMean);
        assert!("dnn".parse::<LearnerKind>().is_err());
    }
}
