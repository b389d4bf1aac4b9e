use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("joint {joint}: value {value} outside limits [{lo}, {hi}]")]
    JointLimit {
        joint: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("plant diverged at step {step}: |q| exceeded {bound} rad (config {config})")]
    Divergence {
        step: usize,
        bound: f64,
        config: String,
    },

    #[error("trajectory {index}: {source}")]
    Trajectory {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("sample rate {got} Hz does not match plant rate {expected} Hz")]
    RateMismatch { got: f64, expected: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence too short: {len} samples, need at least {need}")]
    TooShort { len: usize, need: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("topology mismatch: expected {expected}, found {found}")]
    TopologyMismatch { expected: String, found: String },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI and the teleop wire protocol.
    pub fn code(&self) -> &'static str {
        match self {
            Error::JointLimit { .. } => "joint_limit",
            Error::NonFinite(_) => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::Trajectory { source, .. } => source.code(),
            Error::RateMismatch { .. } => "rate_mismatch",
            Error::Shape(_) => "shape",
            Error::TooShort { .. } => "too_short",
            Error::Config(_) => "config",
            Error::EmptyBatch => "empty_batch",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::TopologyMismatch { .. } => "topology_mismatch",
            Error::Infeasible(_) => "infeasible",
            Error::Io(_) => "io",
        }
    }
}
