use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("routing matrix is not substochastic: {0}")]
    NonSubstochastic(String),

    #[error("covariance matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("routing matrix shows no contraction: {0}")]
    NoContraction(String),

    #[error("drift is unstable: (R^-1 mu)_{index} = {value} >= 0")]
    Unstable { index: usize, value: f64 },

    #[error("matrix is singular")]
    Singular,

    #[error("singular block: {0}")]
    SingularBlock(String),

    #[error("reflection matrix is not an M-matrix")]
    NotMMatrix,

    #[error("initial state has a negative entry at index {index}: {value}")]
    NegativeStart { index: usize, value: f64 },

    #[error("complementarity solve did not converge at step {step}: worst residual {residual:e}")]
    NoConvergence { step: usize, residual: f64 },

    #[error("negative input {0} where a nonnegative value is required")]
    NegativeInput(f64),

    #[error("dimension {0} is too small (need d >= 3)")]
    DimensionTooSmall(usize),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("drift condition violated at {point:?}: margin {margin:e}")]
    ConditionViolated { point: Vec<f64>, margin: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
