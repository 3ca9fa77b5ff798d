use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        axis: String,
        expected: usize,
        found: usize,
    },
    #[error("{op}: rank mismatch: expected {expected}, found {found}")]
    RankMismatch { op: &'static str, expected: usize, found: usize },
    #[error("tensor shape {shape:?} holds {expected} elements but {found} values were supplied")]
    DataLength { shape: Vec<usize>, expected: usize, found: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },
}

impl TensorError {
    pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::InvalidArgument { op, reason: reason.into() }
    }

    pub(crate) fn mismatch(op: &'static str, axis: impl Into<String>, expected: usize, found: usize) -> Self {
        TensorError::ShapeMismatch {
            op,
            axis: axis.into(),
            expected,
            found,
        }
    }
}
