use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward already ran on this graph; reset it before building a new loss")]
    StaleGraph,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),

    #[error("checkpoint format error at byte {offset}: {msg}")]
    Checkpoint { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
