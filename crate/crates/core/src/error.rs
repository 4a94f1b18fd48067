use thiserror::Error;

/// Errors produced anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("non-finite gradient for parameter `{name}` at flat index {index} (value {value})")]
    NonFiniteGradient { name: String, index: usize, value: f64 },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("hadamard order {0} is not a power of two; use the dft design instead")]
    UnsupportedOrder(usize),

    #[error("training error: {0}")]
    Training(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
