use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid token id {id} (vocab size {vocab_size})")]
    InvalidToken { id: usize, vocab_size: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("sequence length {len} exceeds context length {context_len}")]
    Length { len: usize, context_len: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("all positions masked; batch contributes no loss")]
    DegenerateBatch,

    #[error("checkpoint incompatible with model config; mismatched tensors: {}", .0.join(", "))]
    Incompatible(Vec<String>),

    #[error("non-finite loss at step {step} (batch {batch_id}); batch dumped to {dump}")]
    NonFiniteLoss {
        step: u64,
        batch_id: u64,
        dump: String,
    },

    #[error("io error on {path}: {cause}")]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },

    #[error("json error in {path}: {cause}")]
    Json {
        path: PathBuf,
        cause: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, cause: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            cause,
        }
    }
}
