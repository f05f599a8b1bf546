use thiserror::Error;

pub type Result<T> = std::result::Result<T, MiraError>;

#[derive(Debug, Error)]
pub enum MiraError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Separation denominator fell below the degeneracy threshold.
    #[error("degenerate retrieval: |denominator| = {denominator:e} below {threshold:e}")]
    DegenerateRetrieval { denominator: f64, threshold: f64 },

    #[error("checkpoint version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("data access violation: {0}")]
    DataAccess(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(MiraError::Shape(msg.into()))
}
