use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error categories used across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or an unusable combination of settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or parameter-set structure does not match what an operation needs.
    #[error("shape error: {0}")]
    Shape(String),

    /// Value outside the operation's domain (bad label, empty input, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Operation called out of order (e.g. backward without a forward tape).
    #[error("state error: {0}")]
    State(String),

    /// Malformed on-disk data; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A federated run cannot proceed (e.g. every client shard is empty).
    #[error("experiment error: {0}")]
    Experiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
