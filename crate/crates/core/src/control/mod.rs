//! Feedback laws, the streaming non-causal compensator, the resolved-velocity
//! QP and the closed-loop runner.

mod closed_loop;
mod laws;
mod qp;
mod stream;

pub use closed_loop::{run_closed_loop, run_closed_loop_with, ClosedLoopRun, IdentityPlant, SetpointPlant, SimulatedPlant};
pub use laws::{baseline_command, compensated_command, ControlMode, ControllerConfig, Gain};
pub use qp::{resolved_velocity_solve, QpConstraints, QpProblem, QpSolution, QP_REGULARIZATION};
pub use stream::{filter_trajectory, stream_push, StreamOutput, StreamState};
