use thiserror::Error;

/// Errors raised by tensor construction, tape operations and the optimizer.
#[derive(Debug, Error)]
pub enum NumError {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single-operand shape or rank requirement was violated.
    #[error("{op}: invalid shape {shape:?} ({detail})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    /// An index or slice range falls outside the operand.
    #[error("{op}: index {index} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },

    /// API misuse that is independent of tensor shapes.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid hyperparameter handed to the optimizer.
    #[error("optimizer config: {0}")]
    OptimConfig(String),

    /// Duplicate parameter name in a parameter set.
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, NumError>;
