use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::JointVector;

/// Proportional feedback gain, shared or per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gain {
    Scalar(f64),
    PerJoint(Vec<f64>),
}

impl Gain {
    pub fn vector(&self, n_joints: usize) -> Result<JointVector> {
        let v = match self {
            Gain::Scalar(k) => JointVector::from_element(n_joints, *k),
            Gain::PerJoint(k) if k.len() == n_joints => JointVector::from_column_slice(k),
            Gain::PerJoint(k) => {
                return Err(Error::Config(format!("{} gains for {n_joints} joints", k.len())));
            }
        };
        // |k| < 1 keeps the loop stable even against an identity plant.
        if v.iter().any(|k| !(0.0..1.0).contains(k)) {
            return Err(Error::Config(format!("feedback gains must lie in [0, 1), got {v:?}")));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Baseline,
    Feedforward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub k: Gain,
    pub mode: ControlMode,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            k: Gain::Scalar(0.3),
            mode: ControlMode::Feedforward,
        }
    }
}

impl ControllerConfig {
    pub fn baseline(k: f64) -> Self {
        Self {
            k: Gain::Scalar(k),
            mode: ControlMode::Baseline,
        }
    }
}

/// `q_c(t+1) = q_d(t+1) − k ∘ (q(t) − q_d(t))`
pub fn baseline_command(q_d_next: &JointVector, q_d_now: &JointVector, q_now: &JointVector, k: &JointVector) -> JointVector {
    compensated_command(q_d_next, q_d_now, q_now, k)
}

/// `q_c(t+1) = q_f(t+1) − k ∘ (q(t) − q_d(t))`
pub fn compensated_command(q_f_next: &JointVector, q_d_now: &JointVector, q_now: &JointVector, k: &JointVector) -> JointVector {
    q_f_next - k.component_mul(&(q_now - q_d_now))
}
