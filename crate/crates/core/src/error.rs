use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("not a checkpoint: bad magic")]
    NotACheckpoint,
    #[error("unexpected EOF")]
    UnexpectedEof,
    #[error("config error: {0}")]
    Config(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(u64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable numeric code, shared with the C interface.
    pub fn code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_) => 1,
            Error::ShapeMismatch(_) => 2,
            Error::EmptyDataset => 3,
            Error::DimensionMismatch(_) => 4,
            Error::MalformedHeader(_) => 5,
            Error::VersionMismatch { .. } => 6,
            Error::NotACheckpoint => 7,
            Error::UnexpectedEof => 8,
            Error::Config(_) => 9,
            Error::Generation(_) => 10,
            Error::NonFiniteLoss(_) => 11,
            Error::Io(_) => 12,
            Error::Json(_) => 13,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
