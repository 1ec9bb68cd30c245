//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or infinity appeared at an op boundary.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// An argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A caller broke an API contract (misaligned lengths, double backward, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Batch statistics require at least two rows.
    #[error("batch of {n} row(s) is too small for batch statistics")]
    DegenerateBatch { n: usize },

    /// Training produced a non-finite loss.
    #[error("training diverged at iteration {iteration}: {source}")]
    Training {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    /// A proposal probability left the open support required for reweighting.
    #[error("proposal support violation: {0}")]
    Support(String),

    /// Dataset loading or validation failed.
    #[error("dataset {dataset}: {message}")]
    Data { dataset: String, message: String },

    /// Wraps an error with the location it surfaced (e.g. which depth).
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    /// Pool bookkeeping was driven into an invalid state.
    #[error("pool state: {0}")]
    State(String),

    /// Configuration file or override problem.
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
