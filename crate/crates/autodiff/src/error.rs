use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {id} out of range for table of {size} rows")]
    Index { id: usize, size: usize },
    #[error("max pool over an empty set of rows")]
    EmptyPool,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
