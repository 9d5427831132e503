use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("field has {got} values but the model has {expected} nodes")]
    FieldLength { expected: usize, got: usize },

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("overlap node {node} is out of sync with its partner chart (mismatch {mismatch:e})")]
    Unsynchronized { node: usize, mismatch: f64 },

    #[error("overlap node {node} has an undefined donor value at node {donor}")]
    MissingDonor { node: usize, donor: usize },

    #[error("conformal factor is not positive at node {node} (value {value:e})")]
    NonPositive { node: usize, value: f64 },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("linear solver stalled after {iterations} iterations (residual {residual:e})")]
    LinearSolver { iterations: usize, residual: f64 },

    #[error("step size fell below its floor {floor:e} at time {time}")]
    StepFloor { time: f64, floor: f64 },

    #[error("wrong flow mode: expected {expected}")]
    WrongMode { expected: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("trajectory unsuitable for this check: {0}")]
    Trajectory(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("snapshot {path}: {message}")]
    Snapshot { path: PathBuf, message: String },

    #[error("checksum mismatch for {path}")]
    Checksum { path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
