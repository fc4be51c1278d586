use std::path::PathBuf;

use voldiff_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{what}: {detail}")]
    Format { what: &'static str, detail: String },
    #[error("invalid {name}: {detail}")]
    InvalidArg { name: &'static str, detail: String },
    #[error("{0}")]
    Empty(&'static str),
    #[error("object `{id}`: {detail}")]
    Provider { id: String, detail: String },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, detail: impl Into<String>) -> CoreError {
    CoreError::InvalidArg { name, detail: detail.into() }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CoreError {
    let path = path.into();
    move |source| CoreError::Io { path, source }
}
