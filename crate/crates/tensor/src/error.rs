use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("non-finite value in slice {slice} along the last axis of a {shape:?} tensor")]
    NonFinite { shape: Vec<usize>, slice: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variable {id} does not belong to this graph (graph has {len} nodes)")]
    ForeignVariable { id: usize, len: usize },

    #[error("parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
