use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Input { path: String, line: u64, reason: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] levy_core::LevyError),
}
