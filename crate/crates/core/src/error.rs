use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LevyError {
    /// An argument violated a precondition (negative rate, bad truncation, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed (non-positive-definite innovation, ...).
    #[error("numerical failure at observation {index}: {reason}")]
    Numerical { index: usize, reason: String },

    /// Quadrature did not reach the requested tolerance.
    #[error("quadrature did not converge: estimate {estimate}, error {error_estimate}")]
    Quadrature { estimate: f64, error_estimate: f64 },

    /// Configuration failed validation.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },
}

pub type Result<T> = std::result::Result<T, LevyError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(LevyError::Domain(msg.into()))
}

pub(crate) fn config_err(field: &str, reason: impl Into<String>) -> LevyError {
    LevyError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}
