use std::collections::VecDeque;
use std::sync::Arc;

use flexcomp_core::arm_sim::{KinematicParams, Plant, PlantConfig, PlantState};
use flexcomp_core::control::{compensated_command, resolved_velocity_solve, stream_push, QpProblem, StreamState};
use flexcomp_core::neural::RecurrentModel;
use flexcomp_core::JointVector;
use nalgebra::DVector;

use crate::config::{ResolvedConfig, SessionConfig};
use crate::error::Result;
use crate::protocol::{StateMessage, TeleopMessage};

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeldCommand {
    v: [f64; 6],
    applied_tick: u64,
}

/// Output of one tick: the telemetry frame and an optional error report.
#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub state: StateMessage,
    pub error: Option<TeleopMessage>,
}

/// One teleoperated arm. Messages only record intent; everything takes effect
/// in [`Session::tick`].
pub struct Session {
    cfg: SessionConfig,
    plant: Plant,
    plant_state: PlantState,
    kin: KinematicParams,
    limits: Vec<[f64; 2]>,
    dt: f64,
    model: Option<Arc<RecurrentModel>>,
    stream: Option<StreamState>,
    k: JointVector,
    /// Integrated setpoint; newest sample of the reference stream.
    q_d: JointVector,
    /// Last `latency + 1` integrated setpoints.
    history: VecDeque<JointVector>,
    prev: Option<(JointVector, JointVector)>,
    command: Option<HeldCommand>,
    last_seq: Option<u64>,
    comp_on: bool,
    orientation_lock: bool,
    tick: u64,
    errors: VecDeque<f64>,
}

impl Session {
    pub fn new(resolved: &ResolvedConfig) -> Result<Self> {
        Self::with_parts(&resolved.plant, resolved.model.clone(), &resolved.session)
    }

    pub fn with_parts(plant_cfg: &PlantConfig, model: Option<Arc<RecurrentModel>>, cfg: &SessionConfig) -> Result<Self> {
        cfg.validate()?;
        let n = plant_cfg.n_joints;
        let plant = Plant::new(plant_cfg.clone())?;
        let start = JointVector::from_vec(cfg.start_pose_for(n));
        let plant_state = plant.init(&start)?;
        let stream = model.as_deref().map(StreamState::new).transpose()?;
        let k = cfg.controller.k.vector(n)?;
        let comp_on = cfg.comp_on && model.is_some();
        Ok(Self {
            cfg: cfg.clone(),
            kin: plant_cfg.kinematic_params.clone(),
            limits: plant_cfg.joint_limits.clone(),
            dt: plant_cfg.dt,
            plant,
            plant_state,
            model,
            stream,
            k,
            q_d: start,
            history: VecDeque::new(),
            prev: None,
            command: None,
            last_seq: None,
            comp_on,
            orientation_lock: false,
            tick: 0,
            errors: VecDeque::new(),
        })
    }

    pub fn n_joints(&self) -> usize {
        self.q_d.len()
    }

    pub fn rate_hz(&self) -> f64 {
        1.0 / self.dt
    }

    pub fn window_len(&self) -> usize {
        self.model.as_ref().map_or(0, |m| m.window_len())
    }

    /// Samples between a setpoint being integrated and the loop tracking it.
    pub fn latency(&self) -> usize {
        self.stream.as_ref().map_or(0, |s| s.latency())
    }

    pub fn ticks(&self) -> u64 {
        self.tick
    }

    pub fn comp_on(&self) -> bool {
        self.comp_on
    }

    pub fn setpoint(&self) -> &JointVector {
        &self.q_d
    }

    pub fn session_info(&self) -> TeleopMessage {
        TeleopMessage::SessionInfo {
            n_joints: self.n_joints(),
            rate_hz: self.rate_hz(),
            window_t: self.window_len(),
        }
    }

    /// Records a client message. Returns an error frame for rejected messages;
    /// the session is unchanged in that case.
    pub fn handle_message(&mut self, msg: &TeleopMessage) -> Option<TeleopMessage> {
        match msg {
            TeleopMessage::VelCmd { v, seq } => {
                if let Some(last) = self.last_seq {
                    if *seq <= last {
                        return Some(TeleopMessage::error(
                            "out_of_order_seq",
                            format!("seq {seq} is not greater than {last}"),
                        ));
                    }
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Some(TeleopMessage::error("non_finite", "velocity command has non-finite entries"));
                }
                self.last_seq = Some(*seq);
                self.command = Some(HeldCommand {
                    v: *v,
                    applied_tick: self.tick,
                });
                None
            }
            TeleopMessage::ToggleComp { on } => {
                if *on && self.model.is_none() {
                    return Some(TeleopMessage::error("no_model", "no inverse-dynamics checkpoint loaded"));
                }
                self.comp_on = *on;
                None
            }
            TeleopMessage::SetOrientationLock { on } => {
                self.orientation_lock = *on;
                None
            }
            _ => Some(TeleopMessage::error("unexpected_message", "servers do not accept telemetry frames")),
        }
    }

    /// Spatial velocity the next tick will use, after staleness decay.
    pub fn effective_command(&self) -> [f64; 6] {
        let Some(cmd) = self.command else {
            return [0.0; 6];
        };
        let age = (self.tick - cmd.applied_tick) as f64 * self.dt;
        let factor = if age <= self.cfg.stale_after_s {
            1.0
        } else {
            (1.0 - (age - self.cfg.stale_after_s) / self.cfg.decay_s).max(0.0)
        };
        let mut v = cmd.v.map(|x| x * factor);
        if self.orientation_lock {
            v[..3].fill(0.0);
        }
        v
    }

    fn joint_velocity(&self, v: &[f64; 6]) -> flexcomp_core::Result<DVector<f64>> {
        let n = self.n_joints();
        if v.iter().all(|&x| x == 0.0) {
            return Ok(DVector::zeros(n));
        }
        let mut p = QpProblem::new(self.kin.jacobian(&self.q_d)?, DVector::from_column_slice(v));
        p.eps_r = self.cfg.eps_r;
        p.eps_p = self.cfg.eps_p;
        p.orientation_lock = self.orientation_lock;
        p.qdot_lower = Some(DVector::from_element(n, -self.cfg.qdot_limit));
        p.qdot_upper = Some(DVector::from_element(n, self.cfg.qdot_limit));
        p.q = Some(self.q_d.clone());
        p.joint_limits = Some(self.limits.clone());
        p.dt = self.dt;
        Ok(resolved_velocity_solve(&p)?.qdot)
    }

    /// QP → integrate setpoint → stream → feedback law → plant step.
    pub fn tick(&mut self) -> Result<TickOutput> {
        let v = self.effective_command();
        let mut error = None;
        match self.joint_velocity(&v) {
            Ok(qdot) => {
                let next = &self.q_d + qdot * self.dt;
                // Rounding can push a setpoint at its limit a hair outside.
                self.q_d = DVector::from_fn(next.len(), |i, _| next[i].clamp(self.limits[i][0], self.limits[i][1]));
            }
            Err(e) => error = Some(TeleopMessage::error(e.code(), format!("setpoint held: {e}"))),
        }

        let latency = self.latency();
        self.history.push_back(self.q_d.clone());
        if self.history.len() > latency + 1 {
            self.history.pop_front();
        }
        let reference = self.history.front().expect("history is never empty after a push").clone();

        let q_f = match (&mut self.stream, &self.model) {
            (Some(stream), Some(model)) => stream_push(stream, model, &self.q_d)?.map(|out| out.q_f),
            _ => None,
        };
        let ff = match q_f {
            Some(q_f) if self.comp_on => q_f,
            _ => reference.clone(),
        };
        let q_c = match &self.prev {
            Some((q_prev, r_prev)) => compensated_command(&ff, r_prev, q_prev, &self.k),
            None => ff,
        };
        let q = self.plant.advance(&mut self.plant_state, &q_c)?;

        let err_sq = (&q - &reference).norm_squared();
        self.errors.push_back(err_sq);
        if self.errors.len() > self.cfg.metrics_window {
            self.errors.pop_front();
        }
        let state = StateMessage {
            t: self.tick as f64 * self.dt,
            q: q.as_slice().to_vec(),
            q_d: reference.as_slice().to_vec(),
            q_c: q_c.as_slice().to_vec(),
            err_l2_window: self.errors.iter().sum::<f64>().sqrt(),
            comp_on: self.comp_on,
            latency_samples: latency,
        };
        self.prev = Some((q, reference));
        self.tick += 1;
        Ok(TickOutput { state, error })
    }
}
