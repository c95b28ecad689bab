//! Error type shared by every module of the simulator.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation: non-finite
    /// values, zero vectors where a direction is required.
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller supplied an invalid argument (shape, index, hyperparameter).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A configuration cannot be realized (empty dataset, missing transform,
    /// invalid world spec).
    #[error("configuration error: {0}")]
    Configuration(String),

    /// An image or text change direction collapsed below the usable norm.
    #[error("degenerate direction: {what} has norm {norm:e}")]
    DegenerateDirection { what: &'static str, norm: f64 },

    /// A sample carries a label or domain index the consumer cannot handle.
    #[error("data error: {0}")]
    Data(String),

    /// Federated protocol violated (mismatched rounds or shapes, missing uploads).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Wire or checkpoint bytes could not be decoded.
    #[error("codec error: {0}")]
    Codec(String),

    /// A training loss became NaN or infinite.
    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Configuration(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn codec(msg: impl Into<String>) -> Self {
        Error::Codec(msg.into())
    }
}
