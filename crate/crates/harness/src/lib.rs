//! Experiment orchestration for the feedforward compensators: data
//! collection, training, tracking experiments, metrics and reports.

pub mod cartesian;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod pipeline;
pub mod profile;
pub mod report;

pub use error::{HarnessError, Result};
pub use metrics::{compute_metrics, compute_metrics_matrix, improvement_per_channel, mean_improvement, Metrics};
pub use profile::{HarnessConfig, Profile, Settings, SquareSpec};
