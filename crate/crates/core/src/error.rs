use alloc::string::String;

/// Errors raised by the metamodels and their supporting routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// The constant-quantile model matches the truth exactly, so a normalised
    /// error is undefined.
    #[error("degenerate truth: constant-quantile error is zero")]
    DegenerateTruth,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("solver did not converge after {iterations} iterations: {detail}")]
    NoConvergence { iterations: usize, detail: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
