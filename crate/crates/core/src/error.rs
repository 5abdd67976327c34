use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("tokenize error: {0}")]
    Tokenize(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("checkpoint error at byte offset {offset}: {detail}")]
    Checkpoint { offset: u64, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
