use std::path::{Path, PathBuf};

/// Errors of the IO layer and the command-line pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ivfuse_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    /// A file parsed but its content is unusable.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A required artifact (such as a checkpoint) is missing.
    #[error("invalid state: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Self::Format { path: path.to_path_buf(), message: message.into() }
    }
}
