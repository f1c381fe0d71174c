use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time {t} outside the valid band [{lo}, {hi}]")]
    OutOfDomain { t: f64, lo: f64, hi: f64 },

    #[error("reweighting precision K_t = {k} is not positive at t = {t}")]
    DegeneratePrecision { t: f64, k: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("non-finite state at step {step} (particle {particle})")]
    NonFinite { step: usize, particle: usize },

    #[error("non-finite objective value at probe point {0}")]
    NonFiniteObjective(usize),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
