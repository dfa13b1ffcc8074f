use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite parameter at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("curvature {value:e} below floor at ({row}, {col})")]
    Degenerate { row: usize, col: usize, value: f64 },

    #[error("exponential overflow at ({row}, {col}): a*x = {value}")]
    Overflow { row: usize, col: usize, value: f64 },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dictionary error: {0}")]
    Dictionary(String),

    #[error("weighted lasso did not converge after {iterations} sweeps (KKT residual {residual:e})")]
    LassoNotConverged { iterations: usize, residual: f64 },

    #[error("weighted nuclear solve did not converge after {iterations} iterations (relative change {change:e})")]
    NuclearNotConverged { iterations: usize, change: f64 },

    #[error("singular value decomposition failed: {0}")]
    Svd(String),

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("fit aborted at iteration {iteration}: {source}")]
    FitAborted {
        iteration: usize,
        /// Objective values recorded before the failure.
        trace: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("cross-validation error: {0}")]
    CrossValidation(String),
}
