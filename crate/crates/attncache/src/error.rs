use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("cache/input mismatch: {0}")]
    Cache(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("id {0} not found")]
    NotFound(u64),
    #[error("empty index")]
    EmptyIndex,
    #[error("store is closed")]
    Closed,
    #[error("bad file format: {0}")]
    Format(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
