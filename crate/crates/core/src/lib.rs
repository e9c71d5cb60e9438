//! Conformal prediction sets that stay valid when agents strategically
//! alter their covariates.
//!
//! Calibration takes, for each calibration point, the worst conformity score
//! over a finite family of alterations, and thresholds those supremum scores
//! with the usual split-conformal rank rule.

pub mod alterations;
pub mod calibrate;
pub mod cli;
pub mod data;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod family;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod score;

pub use calibrate::{
    calibrate_group_conditional, calibrate_label_conditional, calibrate_standard,
    calibrate_strategic, empirical_quantile, CalibratedPredictor, CalibrationMode, Group,
};
pub use domain::{Covariates, Example, Label, PredictionSet, SplitDataset, SplitFractions, Task};
pub use error::{Error, Result};
pub use family::{strategic_score, Alteration, AlterationFamily, FamilyKind};
pub use score::ConformityScorer;
