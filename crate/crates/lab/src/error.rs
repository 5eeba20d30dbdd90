use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] kvshift_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint field `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
    #[error("check failed: {0}")]
    CheckFailed(String),
    #[error("output directory {0} is in use by another run")]
    Locked(PathBuf),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
        let path = path.into();
        move |source| LabError::Io { path, source }
    }

    pub fn ckpt(field: impl Into<String>, reason: impl Into<String>) -> Self {
        LabError::Checkpoint {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 failed check, 2 usage or config, 3 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::CheckFailed(_) => 1,
            LabError::Core(kvshift_core::Error::Numeric { .. }) => 3,
            _ => 2,
        }
    }
}
