//! Battery state-of-health (SOH) estimation from post-charge voltage
//! relaxation curves.
//!
//! The crate is organised as a pipeline:
//!
//! * [`dataset`] loads and validates cycling data (one relaxation curve per
//!   cycle, labelled with the measured capacity).
//! * [`features`] turns a relaxation curve into one of three feature
//!   families: raw sampled voltages, six statistical moments, or the six
//!   parameters of a second-order RC equivalent circuit identified by
//!   nonlinear least squares.
//! * [`gpr`] and [`learners`] map features to SOH.
//! * [`evaluation`] runs split strategies, repeat averaging and relaxation
//!   duration sweeps; [`transfer`] implements the cross-chemistry transfer
//!   learning schemes.
//! * [`synthgen`] forward-simulates relaxation curves and whole aging
//!   datasets with known ground truth.

pub mod dataset;
pub mod evaluation;
pub mod features;
pub mod gpr;
pub mod learners;
pub mod linalg;
pub mod optim;
pub mod seed;
pub mod synthgen;
pub mod transfer;

mod error;

pub use error::{Error, ErrorKind};
