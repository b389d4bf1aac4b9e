use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use super::config::PlantConfig;
use crate::error::{Error, Result};
use crate::trajectory::{JointVector, Trajectory};

/// Link positions beyond this magnitude are treated as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub motor_pos: JointVector,
    pub motor_vel: JointVector,
    pub link_pos: JointVector,
    pub link_vel: JointVector,
    /// Oldest command at the front. Length is always `delay_steps`.
    pub delay_buffer: VecDeque<JointVector>,
    /// Samples advanced since init.
    pub step: usize,
}

/// Validated config with the coupling matrix unpacked, ready to integrate.
#[derive(Debug, Clone)]
pub struct Plant {
    config: PlantConfig,
    coupling: DMatrix<f64>,
    fingerprint: String,
}

impl Plant {
    pub fn new(config: PlantConfig) -> Result<Self> {
        config.validate()?;
        let coupling = config.coupling_matrix();
        let fingerprint = config.fingerprint();
        Ok(Self {
            config,
            coupling,
            fingerprint,
        })
    }

    pub fn config(&self) -> &PlantConfig {
        &self.config
    }

    pub fn n_joints(&self) -> usize {
        self.config.n_joints
    }

    /// Rest state at `q0` with the delay line primed with `q0`.
    pub fn init(&self, q0: &JointVector) -> Result<PlantState> {
        self.config.check_within_limits(q0)?;
        let n = self.config.n_joints;
        Ok(PlantState {
            motor_pos: q0.clone(),
            motor_vel: DVector::zeros(n),
            link_pos: q0.clone(),
            link_vel: DVector::zeros(n),
            delay_buffer: std::iter::repeat_n(q0.clone(), self.config.delay_steps).collect(),
            step: 0,
        })
    }

    /// Advance one sample. Returns the measured link position, which is sampled
    /// at the start of the interval; `q_c` enters the delay line and the
    /// command leaving it drives the servo for this interval.
    pub fn step(&self, state: &PlantState, q_c: &JointVector) -> Result<(PlantState, JointVector)> {
        let mut next = state.clone();
        let q = self.advance(&mut next, q_c)?;
        Ok((next, q))
    }

    /// In-place form of [`Plant::step`].
    pub fn advance(&self, state: &mut PlantState, q_c: &JointVector) -> Result<JointVector> {
        let cfg = &self.config;
        let n = cfg.n_joints;
        if q_c.len() != n {
            return Err(Error::Shape(format!("command has {} joints, expected {n}", q_c.len())));
        }
        if q_c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("joint command"));
        }
        let measured = state.link_pos.clone();

        let applied = if cfg.delay_steps == 0 {
            q_c.clone()
        } else {
            state.delay_buffer.push_back(q_c.clone());
            state
                .delay_buffer
                .pop_front()
                .expect("delay buffer holds delay_steps entries")
        };

        let h = cfg.dt / cfg.substeps as f64;
        let mut motor_acc = vec![0.0; n];
        let mut raw_link_acc = vec![0.0; n];
        for _ in 0..cfg.substeps {
            for i in 0..n {
                let spring = cfg.spring_stiffness[i] * (state.motor_pos[i] - state.link_pos[i])
                    + cfg.spring_damping[i] * (state.motor_vel[i] - state.link_vel[i]);
                let servo = cfg.servo_kp[i] * (applied[i] - state.motor_pos[i])
                    - cfg.servo_kd[i] * state.motor_vel[i];
                motor_acc[i] = (servo - spring) / cfg.motor_inertia[i];
                raw_link_acc[i] =
                    (spring - cfg.gravity_gain[i] * state.link_pos[i].sin()) / cfg.link_inertia[i];
            }
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += self.coupling[(i, j)] * raw_link_acc[j];
                }
                state.motor_vel[i] += h * motor_acc[i];
                state.link_vel[i] += h * acc;
                state.motor_pos[i] += h * state.motor_vel[i];
                state.link_pos[i] += h * state.link_vel[i];
            }
        }
        state.step += 1;

        if state
            .link_pos
            .iter()
            .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND)
        {
            return Err(Error::Divergence {
                step: state.step,
                bound: DIVERGENCE_BOUND,
                config: self.fingerprint.clone(),
            });
        }
        Ok(measured)
    }

    /// Open-loop response to a command trajectory, starting at rest at its first sample.
    pub fn simulate(&self, q_c: &Trajectory) -> Result<Trajectory> {
        check_rate(&self.config, q_c)?;
        if q_c.n_joints() != self.config.n_joints {
            return Err(Error::Shape(format!(
                "trajectory has {} joints, plant has {}",
                q_c.n_joints(),
                self.config.n_joints
            )));
        }
        let mut state = self.init(&q_c.sample(0))?;
        let mut out = DMatrix::zeros(q_c.n_joints(), q_c.len());
        for t in 0..q_c.len() {
            let q = self.advance(&mut state, &q_c.sample(t))?;
            out.set_column(t, &q);
        }
        Trajectory::new(out, q_c.sample_rate())
    }
}

pub fn check_rate(config: &PlantConfig, traj: &Trajectory) -> Result<()> {
    let expected = config.sample_rate();
    if (traj.sample_rate() - expected).abs() > 1e-9 * expected {
        return Err(Error::RateMismatch {
            got: traj.sample_rate(),
            expected,
        });
    }
    Ok(())
}

/// Free-function form: `simulate(config, q_c)`.
pub fn simulate(config: &PlantConfig, q_c: &Trajectory) -> Result<Trajectory> {
    Plant::new(config.clone())?.simulate(q_c)
}
