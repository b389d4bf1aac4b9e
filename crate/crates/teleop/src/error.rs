use thiserror::Error;

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error(transparent)]
    Core(#[from] flexcomp_core::Error),

    #[error("invalid teleop config: {0}")]
    Config(String),

    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },

    #[error("command log line {line}: {detail}")]
    Log { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TeleopError {
    pub fn code(&self) -> &'static str {
        match self {
            TeleopError::Core(e) => e.code(),
            TeleopError::Config(_) => "config",
            TeleopError::Bind { .. } => "bind",
            TeleopError::Log { .. } => "command_log",
            TeleopError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = TeleopError> = std::result::Result<T, E>;
