//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or vector dimensions do not match what an operation requires.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside its valid range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical routine failed (SVD non-convergence, singular solve, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A documented precondition of an operation does not hold.
    #[error("precondition not satisfied: {0}")]
    Precondition(String),

    /// A file could not be parsed into the expected structure.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
