use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] flexcomp_core::Error),

    #[error(transparent)]
    Teleop(#[from] flexcomp_teleop::TeleopError),

    #[error("invalid harness config: {0}")]
    Config(String),

    #[error("missing artifact {path}: {what}")]
    MissingArtifact { path: String, what: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("unreachable reference: {0}")]
    Unreachable(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            HarnessError::Core(e) => e.code(),
            HarnessError::Teleop(e) => e.code(),
            HarnessError::Config(_) => "config",
            HarnessError::MissingArtifact { .. } => "missing_artifact",
            HarnessError::Io { .. } => "io",
            HarnessError::Unreachable(_) => "unreachable",
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
