use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum PdmlError {
    /// Malformed cube, label or checkpoint payload.
    #[error("ingestion error at byte {offset}: {message}")]
    Ingest { offset: u64, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("split error: class {class} has {count} labeled pixels, at least 3 required")]
    Split { class: u16, count: usize },

    #[error("zero-variance band {band}")]
    ZeroVariance { band: usize },

    #[error("batch error: {0}")]
    Batch(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("render error: {0}")]
    Render(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PdmlError> = std::result::Result<T, E>;

impl PdmlError {
    pub(crate) fn ingest(offset: u64, message: impl Into<String>) -> Self {
        PdmlError::Ingest {
            offset,
            message: message.into(),
        }
    }
}
