use thiserror::Error;

/// Errors raised by the solver and certification routines.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// An iterative method stopped before meeting its tolerance. `last_iterate`
    /// carries the final point so callers can inspect or restart from it.
    #[error("numerical failure after {iterations} iterations: {message}")]
    NumericalFailure {
        message: String,
        iterations: usize,
        last_iterate: Vec<f64>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
