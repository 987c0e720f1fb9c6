use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Idx { path: PathBuf, source: avae_core::IdxError },
    #[error(transparent)]
    Core(#[from] avae_core::Error),
    #[error("{path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{0}")]
    Missing(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }

    pub fn checkpoint(path: &Path, reason: impl Into<String>) -> Self {
        HarnessError::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Io { .. } => "io",
            HarnessError::Idx { .. } => "idx",
            HarnessError::Core(_) => "core",
            HarnessError::Checkpoint { .. } => "checkpoint",
            HarnessError::Csv { .. } => "csv",
            HarnessError::Argument(_) => "argument",
            HarnessError::Missing(_) => "missing",
        }
    }

    /// Single-line JSON record, e.g. `{"error":"io","message":"..."}`.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
