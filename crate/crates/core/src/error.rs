use thiserror::Error;

/// Errors raised anywhere in the filtering / tuning / simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is indefinite (pivot {pivot:.3e} at index {index})")]
    IndefiniteMatrix { index: usize, pivot: f64 },
    #[error("singular Delta block in square-root update (diagonal {0:.3e})")]
    SingularDelta(f64),
    #[error("parameter layout does not match the model spec")]
    LayoutMismatch,
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite state at t={0}")]
    NonFiniteState(usize),
    #[error("linearization-error covariance is indefinite at t={0}")]
    IndefiniteLinearizationMatrix(usize),
    #[error("non-finite or divergent likelihood at t={0}")]
    NonFiniteLikelihood(usize),
    #[error("residual covariance is not positive definite at t={0}")]
    IndefiniteResidualCov(usize),
    #[error("state covariance lost positive semi-definiteness at t={0}")]
    CovarianceNotPsd(usize),
    #[error("path too short for classification (len {0})")]
    PathTooShort(usize),
    #[error("series too short for loess (len {0}, need at least 4)")]
    SeriesTooShort(usize),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("relative bias undefined for zero generating value")]
    ZeroTruth,
    #[error("need at least two replications, got {0}")]
    TooFewReplications(usize),
    #[error("missing value in data at row {row}, column {column}; the filter does not handle missing data")]
    MissingData { row: usize, column: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
