use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum PinError {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a precondition (shape mismatch, bad index, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("row {row}, column {column}: {message}")]
    Ingestion {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    /// The requested computation is refused because it would be too expensive.
    #[error("refused: {0}")]
    Refused(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PinError> = std::result::Result<T, E>;
