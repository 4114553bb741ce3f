//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SamError>;

#[derive(Debug, Error)]
pub enum SamError {
    /// A caller violated an operation contract (shape mismatch, bad domain,
    /// cyclic adjacency where a DAG is required, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A recorded operation produced NaN or Inf.
    #[error("non-finite value produced by {op_name} (op index {op_index})")]
    NumericOverflow {
        op_index: usize,
        op_name: &'static str,
    },

    #[error("matrix not positive definite: pivot {pivot:.3e} at column {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("line {line}: {message}")]
    Csv { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("column {column} is degenerate (zero variance) after {attempts} attempts")]
    DegenerateColumn { column: usize, attempts: usize },

    #[error("{failed} of {total} ensemble runs failed; first failure (run {run}): {message}")]
    EnsembleFailed {
        failed: usize,
        total: usize,
        run: usize,
        message: String,
    },
}

impl SamError {
    pub fn contract(msg: impl Into<String>) -> Self {
        SamError::Contract(msg.into())
    }
}
