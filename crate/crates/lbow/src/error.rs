use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] lbow_core::Error),
    #[error("{path}: {source}")]
    Data { path: PathBuf, source: lbow_core::Error },
    #[error("not a checkpoint file (bad magic header)")]
    BadMagic,
    #[error("checkpoint format version {0} is not supported")]
    BadVersion(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Whether the error comes from the training loop diverging.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Core(lbow_core::Error::Diverged { .. }))
    }
}
