//! Feedforward compensation for flexible-joint arm trajectory tracking.
//!
//! Two pipelines share one simulated plant and one data campaign:
//!
//! * a unidirectional GRU forward-dynamics model refined into a feedforward
//!   input by gradient-based iterative learning control ([`ilc`]);
//! * a bidirectional GRU inverse-dynamics model that filters the desired
//!   trajectory directly, offline or streaming ([`control`]).

pub mod arm_sim;
pub mod control;
pub mod dataset;
pub mod error;
pub mod ilc;
pub mod neural;
pub mod trajectory;

pub use error::{Error, Result};
pub use trajectory::{JointVector, Trajectory};
