use thiserror::Error;

#[derive(Debug, Error)]
pub enum LctrError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("checkpoint manifest error: {0}")]
    Manifest(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LctrError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LctrError::Dimension(msg.into()))
}
