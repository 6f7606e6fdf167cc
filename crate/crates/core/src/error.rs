use thiserror::Error;

use crate::dynamics::TrajectoryState;

/// Errors produced anywhere in the sampler.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("exact enumeration refused: n = {n} exceeds the cap of {cap}")]
    OracleCap { n: usize, cap: usize },

    #[error("state space too large: {count} states exceeds the cap of {cap}")]
    TooManyStates { count: usize, cap: usize },

    #[error("magnetization coordinate {index} is outside the open cube: {value}")]
    Domain { index: usize, value: f64 },

    #[error("TAP Hessian not positive definite (smallest eigenvalue {min_eigenvalue:.6e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("symmetric eigen-solver did not converge")]
    EigenSolver,

    #[error("mirror descent iterate escaped the numerical range at coordinate {index} (x = {value})")]
    Overflow { index: usize, value: f64 },

    #[error("trajectory aborted at step {step}: {reason}")]
    TrajectoryAborted {
        step: usize,
        reason: String,
        state: Box<TrajectoryState>,
    },

    #[error("acceptance starvation: {accepts} accepts in {attempts} attempts (rate {rate:.3e})")]
    AcceptanceStarvation {
        attempts: usize,
        accepts: usize,
        rate: f64,
    },

    #[error("histogram is empty")]
    EmptyHistogram,

    #[error("configuration {0} lies outside the wedge")]
    OutsideWedge(String),

    #[error("walk cache drift {drift:.3e} exceeds tolerance")]
    CacheDrift { drift: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
