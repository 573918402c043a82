use pmdm_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: TensorError,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{gate} gate: {source}")]
    Gate {
        gate: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset: {0}")]
    Data(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True when the failure comes from non-finite numbers rather than from
    /// bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFiniteLoss { .. } => true,
            Error::Stage { source, .. } | Error::Tensor(source) => {
                matches!(source, TensorError::NonFinite { .. })
            }
            Error::Gate { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

/// Attaches the name of the computation stage to a tensor error.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for std::result::Result<T, TensorError> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| Error::Stage { stage, source })
    }
}
