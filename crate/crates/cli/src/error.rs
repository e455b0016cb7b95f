use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing upstream artifact {artifact}; run `vwsd {stage}` first")]
    MissingUpstream { stage: String, artifact: PathBuf },
    #[error("cache root is in use by another invocation (lock file {0})")]
    Locked(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage}: {message}")]
    Stage { stage: String, message: String },
}

impl PipelineError {
    /// 2 for configuration errors, 3 for a missing upstream artifact,
    /// 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingUpstream { .. } => 3,
            _ => 1,
        }
    }

    pub fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        PipelineError::Stage {
            stage: stage.to_string(),
            message: err.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}
