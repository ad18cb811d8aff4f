use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpnError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpnError>;

impl SpnError {
    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        SpnError::Format {
            offset,
            msg: msg.into(),
        }
    }
}
