use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("time t = {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },

    #[error("sigma_t = {sigma} at t = {t} is below the floor {floor}; the conditional score is undefined there")]
    SigmaBelowFloor { t: f64, sigma: f64, floor: f64 },

    #[error("sigma decreases across the reverse step: sigma({t}) = {sigma_t} < sigma({t_prev}) = {sigma_prev}")]
    SigmaDecreasing {
        t: f64,
        sigma_t: f64,
        t_prev: f64,
        sigma_prev: f64,
    },

    #[error("covariance of component {component} is not positive definite")]
    NotPositiveDefinite { component: usize },

    #[error("all mixture responsibilities underflowed: point too far in the tails")]
    TailUnderflow,

    #[error("invalid schedule: {reason}")]
    InvalidSchedule { reason: String },

    #[error("invalid argument: {reason}")]
    InvalidArgument { reason: String },

    #[error("no finite-cost path from node {from} to node {to}; try a larger epsilon")]
    NoPath { from: usize, to: usize },

    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },

    #[error("backward called without a recorded forward pass")]
    NoForwardPass,

    #[error("checkpoint mismatch: {reason}")]
    CheckpointMismatch { reason: String },

    #[error("malformed {what}: {reason}")]
    MalformedFile { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
