use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pmdm_core::Error),
    #[error("{0}")]
    NonFinite(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::NonFinite(_) => 2,
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
