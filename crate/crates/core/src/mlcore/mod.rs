//! Pure implementations of the three classroom learning algorithms.
//!
//! Everything in here is deterministic: randomness only enters through an
//! explicit seed (see [`select_action`]), so values can be shared freely
//! between threads and replayed exactly.

mod knn;
mod qlearning;
mod regression;

pub use knn::{
    decision_boundary, knn_classify, BoundaryGrid, Classification, FeaturePoint, FruitLabel,
    Sample, SampleId, DEFAULT_BOUNDARY_RESOLUTION, MAX_COLOR, MAX_LENGTH_MM,
};
pub use qlearning::{
    greedy_policy, policy_average_displacement, q_update, select_action, ActionMode, CrawlerAction,
    CrawlerState, DisplacementTable, Policy, QParams, QTable, DEFAULT_ALPHA,
};
pub use regression::{
    fit_line, invert_line, loss, Inversion, LaunchPoint, LineModel, INVERT_SLOPE_TOLERANCE,
};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlError {
    #[error("no training data")]
    NoTrainingData,
    #[error("k = {k} is outside 1..={max}")]
    InvalidK { k: usize, max: usize },
    #[error("boundary resolution must be at least 2, got {0}")]
    InvalidResolution(usize),
    #[error("need at least {needed} points, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("all speeds are identical, the line is not determined")]
    DegenerateX,
    #[error("line slope {0} is too flat to invert")]
    UninvertibleLine(f64),
    #[error("{field} = {value} is out of range")]
    OutOfRange { field: &'static str, value: f64 },
}
