use thiserror::Error;

/// Errors raised across descriptor handling, training and matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("batch too small: {0}")]
    BatchTooSmall(String),
    #[error("numerics error: {0}")]
    Numerics(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("match error: {0}")]
    Match(String),
    #[error("stats error: {0}")]
    Stats(String),
    /// Malformed XDSC / XMLP / XBNK input. `field` names the offending part.
    #[error("malformed {format} ({field}): {detail}")]
    Format {
        format: &'static str,
        field: String,
        detail: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(format: &'static str, field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            format,
            field: field.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
