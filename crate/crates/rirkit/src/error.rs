use thiserror::Error;

#[derive(Debug, Error)]
pub enum RirError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("unknown name: {0}")]
    Lookup(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RirError>;

impl RirError {
    pub fn shape(msg: impl Into<String>) -> Self {
        RirError::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        RirError::Config(msg.into())
    }
}
