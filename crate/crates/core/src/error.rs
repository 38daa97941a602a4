use hatlm_autodiff::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("empty acoustic sequence")]
    EmptyAcoustics,

    #[error("token {token} outside vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },

    #[error("acoustic symbol {symbol} outside alphabet of size {size}")]
    SymbolOutOfRange { symbol: u32, size: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty hypothesis list")]
    EmptyNBest,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("enumeration of {count} candidates exceeds guard {limit}")]
    EnumerationGuard { count: u128, limit: u128 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
