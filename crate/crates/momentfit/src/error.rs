//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by summary construction, model evaluation and fitting.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A bin partition violated its invariants (ordering, signs, infinities).
    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    /// A local-moment summary violated its invariants.
    #[error("invalid summary: {0}")]
    InvalidSummary(String),

    /// A summary or mixture file failed schema validation. `path` is the
    /// JSON field path of the offending entry.
    #[error("invalid file at {path}: {message}")]
    InvalidFile { path: String, message: String },

    /// A sample value fell outside the partition during summarization.
    #[error("sample value {value} outside partition [{lower}, {upper})")]
    SampleOutOfRange { value: f64, lower: f64, upper: f64 },

    /// The moment covariance could not be factorized even after jitter.
    #[error("singular covariance matrix (jitter exhausted)")]
    SingularCovariance,

    /// The Hessian could not be factorized even after jitter.
    #[error("singular Hessian matrix (jitter exhausted)")]
    SingularHessian,

    /// The inner optimizer never produced a finite objective value.
    #[error("non-finite objective at every restart")]
    NonFiniteObjective,

    /// Fitting failed; the partial objective trace is attached for diagnosis.
    #[error("fit failed: {message}")]
    FitFailed { message: String, trace: Vec<f64> },

    /// An iterative routine did not converge.
    #[error("convergence failure: {0}")]
    Convergence(String),

    /// Reflection-point calibration residuals exceeded the tolerance.
    #[error("calibration failed: residual RMS {rms:.4} exceeds {tolerance}")]
    CalibrationFailed { rms: f64, tolerance: f64 },

    /// Unknown dataset name in an experiment specification.
    #[error("unknown dataset: {0}")]
    UnknownDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
