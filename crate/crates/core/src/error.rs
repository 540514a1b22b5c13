use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An input lies outside the domain of the operation (log of a
    /// non-positive value, division by a zero norm, empty tensor).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration, caught before any compute happens.
    #[error("config error: {0}")]
    Config(String),

    /// A non-finite value appeared during optimization.
    #[error("numerical error at step {step}: {message}")]
    Numerical { step: u64, message: String },

    /// An object was queried in a state that cannot answer.
    #[error("state error: {0}")]
    State(String),

    /// Index or horizon out of range.
    #[error("range error: {0}")]
    Range(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
