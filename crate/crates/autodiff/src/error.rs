use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
