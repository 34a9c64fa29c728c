use thiserror::Error;

/// Crate-wide error type. Variants map to the distinct failure contracts of
/// the library: shape/dimension violations, file format problems, integrity
/// failures, and so on.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("label out of range: {0}")]
    Label(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("truncated data: {0}")]
    Truncated(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("unsupported version: {0}")]
    Version(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("singular transform: {0}")]
    Transform(String),
    #[error("degenerate class: {0}")]
    Degenerate(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, Error>;
