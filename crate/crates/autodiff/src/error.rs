use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("leaf tensor contains a non-finite value at flat index {index}")]
    NonFiniteInput { index: usize },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("graph cycle: node {node} consumes node {input} which is not earlier on the tape")]
    GraphCycle { node: usize, input: usize },
    #[error("function value is not finite at probe coordinate {coord}")]
    NonFiniteProbe { coord: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
