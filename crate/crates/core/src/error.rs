//! Error taxonomy shared by the whole crate.

/// Crate-wide error type. Variants mirror the failure classes of the public
/// contracts (sizing, shape agreement, channel splitting, op preconditions,
/// model configuration, tap selection, and verification suites).
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    #[error("size error: {0}")]
    Size(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("selector error: {0}")]
    Selector(String),
    #[error("check failure: {0}")]
    CheckFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn size(msg: impl Into<String>) -> Self {
        Error::Size(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn split(msg: impl Into<String>) -> Self {
        Error::Split(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn selector(msg: impl Into<String>) -> Self {
        Error::Selector(msg.into())
    }
    pub fn check(msg: impl Into<String>) -> Self {
        Error::CheckFailed(msg.into())
    }
}
