use thiserror::Error;

/// Errors raised by the estimation toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("SingularMatrix: estimated condition number {condition:e} exceeds limit")]
    SingularMatrix { condition: f64 },

    #[error("NotSymmetric: max asymmetry {asymmetry:e}")]
    NotSymmetric { asymmetry: f64 },

    #[error("NonFiniteEvaluation: {0}")]
    NonFiniteEvaluation(String),

    #[error("NoConvergence: residual {residual:e} after {iterations} iterations")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("SingularJacobian: stacked Jacobian is not invertible (condition {condition:e})")]
    SingularJacobian { condition: f64 },

    #[error("Separation: coefficient norm {norm:.1} diverged (complete or quasi-complete separation)")]
    Separation { norm: f64 },

    #[error("Positivity: propensity {propensity:e} outside [1e-6, 1-1e-6]")]
    Positivity { propensity: f64 },

    #[error("UnorderedRecords: person {id} has non-increasing time index")]
    UnorderedRecords { id: String },

    #[error("TooManyFailures: {failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("DimensionMismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("InvalidInput: {0}")]
    InvalidInput(String),
}

impl Error {
    /// Short variant name, used by the CLI in error messages.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SingularMatrix { .. } => "SingularMatrix",
            Error::NotSymmetric { .. } => "NotSymmetric",
            Error::NonFiniteEvaluation(_) => "NonFiniteEvaluation",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::SingularJacobian { .. } => "SingularJacobian",
            Error::Separation { .. } => "Separation",
            Error::Positivity { .. } => "Positivity",
            Error::UnorderedRecords { .. } => "UnorderedRecords",
            Error::TooManyFailures { .. } => "TooManyFailures",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InvalidInput(_) => "InvalidInput",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
