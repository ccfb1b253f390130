use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: value {value} is outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("index {index} out of range (size {size})")]
    Index { index: usize, size: usize },
    #[error("{0}: every entry of a slice is masked")]
    Degenerate(&'static str),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` is already declared")]
    DuplicateParam(String),
    #[error("{0}")]
    Usage(String),
}
