use thiserror::Error;

use crate::dataset::DatasetError;
use crate::evaluation::EvalError;
use crate::features::FeatureError;
use crate::gpr::GprError;
use crate::learners::LearnerError;
use crate::synthgen::SynthError;
use crate::transfer::TransferError;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Invalid configuration or arguments.
    Usage,
    /// Malformed, missing or inconsistent data.
    Data,
    /// A numerical procedure failed.
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Data => "data",
            ErrorKind::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Gpr(#[from] GprError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Usage(_) => ErrorKind::Usage,
            Error::Io(_) | Error::Dataset(_) => ErrorKind::Data,
            Error::Feature(e) => feature_kind(e),
            Error::Gpr(e) => gpr_kind(e),
            Error::Learner(e) => learner_kind(e),
            Error::Eval(e) => e.kind(),
            Error::Transfer(e) => e.kind(),
            Error::Synth(SynthError::InvalidProfile(_)) => ErrorKind::Usage,
            Error::Synth(SynthError::Dataset(_)) => ErrorKind::Data,
        }
    }
}

pub(crate) fn feature_kind(e: &FeatureError) -> ErrorKind {
    match e {
        FeatureError::NoConvergence { .. } | FeatureError::NegativeR0(_) => ErrorKind::Numerical,
        FeatureError::UnknownFamily(_) => ErrorKind::Usage,
        FeatureError::Record { source, .. } => feature_kind(source),
        _ => ErrorKind::Data,
    }
}

pub(crate) fn gpr_kind(e: &GprError) -> ErrorKind {
    match e {
        GprError::NotPositiveDefinite => ErrorKind::Numerical,
        GprError::InvalidHyperparams(_) => ErrorKind::Usage,
        _ => ErrorKind::Data,
    }
}

pub(crate) fn learner_kind(e: &LearnerError) -> ErrorKind {
    match e {
        LearnerError::Gpr(g) => gpr_kind(g),
        LearnerError::InvalidParams(_) | LearnerError::UnknownLearner(_) => ErrorKind::Usage,
        _ => ErrorKind::Data,
    }
}
