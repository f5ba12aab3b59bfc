use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch in a tensor primitive or model layer.
    #[error("shape error: {0}")]
    Shape(String),
    /// A caller violated an operation contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Invalid argument value.
    #[error("argument error: {0}")]
    Argument(String),
    /// Non-finite value or numerically degenerate state.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Malformed on-disk artifact.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }
}
