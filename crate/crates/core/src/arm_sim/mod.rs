//! Simulated flexible-joint arm and its kinematics.
//!
//! Each joint is a motor inertia driven by a PD servo toward the (delayed)
//! setpoint, connected to a link inertia through a spring-damper. Link
//! accelerations are mixed by a symmetric coupling matrix and perturbed by a
//! `sin(q)` gravity-like torque.

mod config;
mod kinematics;
mod plant;

pub use config::{
    chain_coupling, JointFrame, KinematicParams, PlantConfig, BAXTER_LIKE_LIMITS,
    COUPLING_STABILITY_BOUND,
};
pub use kinematics::{manipulability_of, Pose};
pub use plant::{check_rate, simulate, Plant, PlantState, DIVERGENCE_BOUND};
