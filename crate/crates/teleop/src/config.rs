use std::path::{Path, PathBuf};
use std::sync::Arc;

use flexcomp_core::arm_sim::PlantConfig;
use flexcomp_core::control::ControllerConfig;
use flexcomp_core::neural::{load_checkpoint_file, Direction, RecurrentModel};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeleopError};

/// Neutral Baxter-like pose away from the straight-arm singularity.
pub const NEUTRAL_POSE: [f64; 7] = [0.0, -0.4, 0.0, 1.0, 0.0, 0.6, 0.0];

/// Service configuration as read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeleopConfig {
    pub host: String,
    pub port: u16,
    /// Bidirectional inverse-dynamics checkpoint; without one the service runs
    /// feedback-only and rejects `toggle_comp`.
    pub inverse_checkpoint: Option<PathBuf>,
    pub plant_config: Option<PathBuf>,
    pub rate_hz: f64,
    #[serde(rename = "window_T", alias = "window_t")]
    pub window_t: usize,
    pub session: SessionConfig,
    /// Each session's applied command log is written here as JSON lines.
    pub record_dir: Option<PathBuf>,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8765,
            inverse_checkpoint: None,
            plant_config: None,
            rate_hz: 100.0,
            window_t: 50,
            session: SessionConfig::default(),
            record_dir: None,
        }
    }
}

/// Per-session behaviour; shared by the live service and headless replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub controller: ControllerConfig,
    /// Symmetric joint-velocity bound for the QP (rad/s).
    pub qdot_limit: f64,
    pub eps_r: f64,
    pub eps_p: f64,
    /// Defaults to [`NEUTRAL_POSE`] for 7 joints and zeros otherwise.
    pub start_pose: Option<Vec<f64>>,
    /// Ticks covered by `err_l2_window`.
    pub metrics_window: usize,
    /// A command is held for this long, then ramps linearly to zero over `decay_s`.
    pub stale_after_s: f64,
    pub decay_s: f64,
    /// Compensation state at session start (needs a model).
    pub comp_on: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            controller: ControllerConfig::default(),
            qdot_limit: 1.0,
            eps_r: 100.0,
            eps_p: 100.0,
            start_pose: None,
            metrics_window: 100,
            stale_after_s: 0.5,
            decay_s: 0.5,
            comp_on: false,
        }
    }
}

impl SessionConfig {
    pub fn start_pose_for(&self, n_joints: usize) -> Vec<f64> {
        match &self.start_pose {
            Some(p) => p.clone(),
            None if n_joints == NEUTRAL_POSE.len() => NEUTRAL_POSE.to_vec(),
            None => vec![0.0; n_joints],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TeleopError::Config(m.into()));
        if !(self.qdot_limit > 0.0 && self.qdot_limit.is_finite()) {
            return bad("qdot_limit must be positive");
        }
        if !(self.eps_r > 0.0 && self.eps_p > 0.0) {
            return bad("eps_r and eps_p must be positive");
        }
        if self.metrics_window == 0 {
            return bad("metrics_window must be at least 1");
        }
        if !(self.stale_after_s >= 0.0 && self.decay_s > 0.0) {
            return bad("stale_after_s must be >= 0 and decay_s > 0");
        }
        Ok(())
    }
}

/// Everything a session needs once files have been read.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub plant: PlantConfig,
    pub model: Option<Arc<RecurrentModel>>,
    pub session: SessionConfig,
}

impl TeleopConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| TeleopError::Config(e.to_string()))
    }

    /// Loads the plant and checkpoint and checks them against the service settings.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let plant = match &self.plant_config {
            Some(p) => PlantConfig::load(p)?,
            None => PlantConfig::default(),
        };
        let model = match &self.inverse_checkpoint {
            Some(p) => Some(Arc::new(load_checkpoint_file(p)?)),
            None => None,
        };
        let resolved = ResolvedConfig {
            plant,
            model,
            session: self.session.clone(),
        };
        resolved.check(self.rate_hz, self.window_t)?;
        Ok(resolved)
    }
}

impl ResolvedConfig {
    pub fn check(&self, rate_hz: f64, window_t: usize) -> Result<()> {
        self.session.validate()?;
        if (self.plant.sample_rate() - rate_hz).abs() > 1e-9 * rate_hz {
            return Err(TeleopError::Config(format!(
                "rate_hz {rate_hz} does not match the plant rate {}",
                self.plant.sample_rate()
            )));
        }
        if let Some(m) = &self.model {
            if m.direction() != Direction::Bidirectional {
                return Err(TeleopError::Config("inverse checkpoint is not bidirectional".into()));
            }
            if m.window_len() != window_t {
                return Err(TeleopError::Config(format!(
                    "window_T {window_t} does not match the checkpoint window {}",
                    m.window_len()
                )));
            }
            if m.n_joints() != self.plant.n_joints {
                return Err(TeleopError::Config(format!(
                    "checkpoint has {} joints, plant has {}",
                    m.n_joints(),
                    self.plant.n_joints
                )));
            }
        }
        if self.session.start_pose_for(self.plant.n_joints).len() != self.plant.n_joints {
            return Err(TeleopError::Config("start_pose length does not match the plant".into()));
        }
        Ok(())
    }
}
