use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("pixel ({x}, {y}) outside {width}×{height} image")]
    PixelOutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: u64 },
    #[error(transparent)]
    Tensor(#[from] monoview_autodiff::AutodiffError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
