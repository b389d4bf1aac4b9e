use crate::arm_sim::{check_rate, Plant, PlantConfig, PlantState};
use crate::error::{Error, Result};
use crate::trajectory::{JointVector, Trajectory};

use super::laws::{compensated_command, ControlMode, ControllerConfig};

/// A plant driven by joint setpoints. `step` applies `q_c(t)` and returns the
/// measurement `q(t)`; the loop only uses `q(t)` to form `q_c(t+1)`.
pub trait SetpointPlant {
    fn n_joints(&self) -> usize;
    fn reset(&mut self, q0: &JointVector) -> Result<()>;
    fn step(&mut self, q_c: &JointVector) -> Result<JointVector>;
}

pub struct SimulatedPlant {
    plant: Plant,
    state: Option<PlantState>,
}

impl SimulatedPlant {
    pub fn new(config: &PlantConfig) -> Result<Self> {
        Ok(Self {
            plant: Plant::new(config.clone())?,
            state: None,
        })
    }

    pub fn config(&self) -> &PlantConfig {
        self.plant.config()
    }
}

impl SetpointPlant for SimulatedPlant {
    fn n_joints(&self) -> usize {
        self.plant.n_joints()
    }

    fn reset(&mut self, q0: &JointVector) -> Result<()> {
        self.state = Some(self.plant.init(q0)?);
        Ok(())
    }

    fn step(&mut self, q_c: &JointVector) -> Result<JointVector> {
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Config("plant stepped before reset".into()))?;
        self.plant.advance(state, q_c)
    }
}

/// Test double whose output equals its command.
pub struct IdentityPlant {
    pub n_joints: usize,
}

impl SetpointPlant for IdentityPlant {
    fn n_joints(&self) -> usize {
        self.n_joints
    }

    fn reset(&mut self, _q0: &JointVector) -> Result<()> {
        Ok(())
    }

    fn step(&mut self, q_c: &JointVector) -> Result<JointVector> {
        Ok(q_c.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub q: Trajectory,
    pub q_c: Trajectory,
}

/// Runs the feedback law against the simulated plant, started at rest at `q_d(0)`.
pub fn run_closed_loop(
    plant_config: &PlantConfig,
    q_d: &Trajectory,
    q_f: Option<&Trajectory>,
    controller: &ControllerConfig,
) -> Result<ClosedLoopRun> {
    check_rate(plant_config, q_d)?;
    let mut plant = SimulatedPlant::new(plant_config)?;
    plant.reset(&q_d.sample(0))?;
    run_closed_loop_with(&mut plant, q_d, q_f, controller)
}

/// `q_c(0) = q_f(0)`, then `q_c(t+1) = q_f(t+1) − k (q(t) − q_d(t))`. The
/// baseline mode (or a missing `q_f`) uses `q_d` in place of `q_f`. The plant
/// must already be reset.
pub fn run_closed_loop_with(
    plant: &mut dyn SetpointPlant,
    q_d: &Trajectory,
    q_f: Option<&Trajectory>,
    controller: &ControllerConfig,
) -> Result<ClosedLoopRun> {
    let n = q_d.n_joints();
    if plant.n_joints() != n {
        return Err(Error::Shape(format!("plant has {} joints, reference has {n}", plant.n_joints())));
    }
    let k = controller.k.vector(n)?;
    let ff = match (controller.mode, q_f) {
        (ControlMode::Feedforward, Some(q_f)) => {
            q_f.require_same_shape(q_d, "feedforward and reference")?;
            if q_f.sample_rate() != q_d.sample_rate() {
                return Err(Error::RateMismatch {
                    got: q_f.sample_rate(),
                    expected: q_d.sample_rate(),
                });
            }
            q_f
        }
        _ => q_d,
    };
    let len = q_d.len();
    let mut q = q_d.data().clone();
    let mut q_c = q_d.data().clone();
    let mut cmd = ff.sample(0);
    for t in 0..len {
        if t > 0 {
            let prev = q.column(t - 1).into_owned();
            cmd = compensated_command(&ff.sample(t), &q_d.sample(t - 1), &prev, &k);
        }
        let meas = plant.step(&cmd)?;
        q.set_column(t, &meas);
        q_c.set_column(t, &cmd);
    }
    Ok(ClosedLoopRun {
        q: q_d.with_data(q)?,
        q_c: q_d.with_data(q_c)?,
    })
}
