use thiserror::Error;

/// Errors produced by the toolkit.
///
/// The variants map one-to-one onto the CLI exit codes: argument problems,
/// numerical divergence of a weight quantity, and unmet theorem hypotheses
/// are kept distinct so callers can tell a bad request from a bad weight.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A weight mass or characteristic is infinite (or above the overflow cap).
    #[error("diverged: {0}")]
    Diverged(String),

    #[error("hypothesis not satisfied: {0}")]
    Hypothesis(String),

    #[error("parse error (line {line}): {msg}")]
    Parse { line: usize, msg: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}
