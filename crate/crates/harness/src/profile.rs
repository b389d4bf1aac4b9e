use std::path::{Path, PathBuf};

use clap::ValueEnum;
use flexcomp_core::arm_sim::PlantConfig;
use flexcomp_core::control::ControllerConfig;
use flexcomp_core::dataset::CampaignSpec;
use flexcomp_core::ilc::IlcConfig;
use flexcomp_core::neural::{Topology, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Minutes on one core.
    Desk,
    /// Full-size campaign and networks.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SquareSpec {
    pub side_m: f64,
    pub z_m: f64,
    pub period_s: f64,
    /// x-y centre in the base frame.
    pub center_m: [f64; 2],
    /// Supplies the fixed tool orientation and the IK seed.
    pub start_pose: Vec<f64>,
    /// Rest at the first corner before tracing.
    pub hold_s: f64,
    /// Joint-velocity bound for the conversion to joint space (rad/s).
    pub qdot_limit: f64,
}

impl Default for SquareSpec {
    fn default() -> Self {
        Self {
            side_m: 0.1,
            z_m: 0.2,
            period_s: 2.0,
            center_m: [0.91, 0.0],
            start_pose: vec![0.0, 0.0, 0.0, 0.0, 0.0, -0.6, 0.0],
            hold_s: 0.5,
            qdot_limit: 2.0,
        }
    }
}

/// Every tunable of the pipeline. A profile fills it in; a config file may
/// override any part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub campaign: CampaignSpec,
    pub forward_hidden: usize,
    pub inverse_hidden: usize,
    pub window: usize,
    pub forward_train: TrainConfig,
    pub inverse_train: TrainConfig,
    /// Samples used to fit the input/target normalisation.
    pub normalization_samples: usize,
    pub ilc: IlcConfig,
    /// Extra iterations against the plant after the offline feedforward.
    pub plant_ilc: IlcConfig,
    pub plant_ilc_enabled: bool,
    pub controller: ControllerConfig,
    /// Held-out test trajectory length in samples.
    pub test_len: usize,
    /// Held-out trajectories per kind for the forward-fidelity check.
    pub fidelity_trajectories: usize,
    pub square: SquareSpec,
}

impl Default for Settings {
    fn default() -> Self {
        Profile::Desk.settings()
    }
}

impl Profile {
    pub fn settings(self) -> Settings {
        match self {
            Profile::Desk => Settings {
                campaign: CampaignSpec::desk(7),
                forward_hidden: 16,
                inverse_hidden: 16,
                window: 50,
                forward_train: TrainConfig {
                    learning_rate: 3e-3,
                    batch_size: 64,
                    dropout_keep: 1.0,
                    max_iters: 10000,
                    log_every: 250,
                    validation_max_samples: 1024,
                    final_lr_fraction: 0.1,
                    ..TrainConfig::default()
                },
                inverse_train: TrainConfig {
                    learning_rate: 3e-3,
                    batch_size: 64,
                    dropout_keep: 1.0,
                    max_iters: 10000,
                    log_every: 250,
                    validation_max_samples: 1024,
                    final_lr_fraction: 0.1,
                    ..TrainConfig::default()
                },
                normalization_samples: 4096,
                ilc: IlcConfig {
                    max_iters: 30,
                    grid_min_exp: -5,
                    grid_max_exp: 1,
                    refine_steps: 6,
                    ..IlcConfig::default()
                },
                plant_ilc: IlcConfig {
                    max_iters: 5,
                    grid_min_exp: -6,
                    grid_max_exp: 1,
                    refine_steps: 6,
                    ..IlcConfig::default()
                },
                plant_ilc_enabled: true,
                controller: ControllerConfig::default(),
                test_len: 1000,
                fidelity_trajectories: 4,
                square: SquareSpec::default(),
            },
            Profile::Paper => Settings {
                campaign: CampaignSpec::paper(7),
                forward_hidden: 64,
                inverse_hidden: 64,
                window: 50,
                forward_train: TrainConfig::default(),
                inverse_train: TrainConfig::default(),
                normalization_samples: 16384,
                ilc: IlcConfig::default(),
                plant_ilc: IlcConfig {
                    max_iters: 10,
                    ..IlcConfig::default()
                },
                plant_ilc_enabled: true,
                controller: ControllerConfig::default(),
                test_len: 2500,
                fidelity_trajectories: 10,
                square: SquareSpec::default(),
            },
        }
    }
}

impl Settings {
    pub fn forward_topology(&self, n_joints: usize) -> Topology {
        Topology::forward_dynamics(n_joints, self.forward_hidden, self.window)
    }

    pub fn inverse_topology(&self, n_joints: usize) -> Topology {
        Topology::inverse_dynamics(n_joints, self.inverse_hidden, self.window)
    }

    /// Applies `seed` to every random stream: campaign, initialisation, batching.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.campaign.rng_seed = seed;
        self.forward_train.rng_seed = seed;
        self.inverse_train.rng_seed = seed.wrapping_add(1);
        self
    }
}

/// `--config` file: a plant reference plus optional overrides of the profile.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    /// TOML plant description; the built-in 7-joint arm when absent.
    pub plant_config: Option<PathBuf>,
    pub settings: Option<toml::Table>,
}

impl HarnessConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn plant(&self) -> Result<PlantConfig> {
        Ok(match &self.plant_config {
            Some(p) => PlantConfig::load(p)?,
            None => PlantConfig::default(),
        })
    }

    /// Profile defaults with the `[settings]` table merged over them.
    pub fn settings(&self, profile: Profile) -> Result<Settings> {
        let base = profile.settings();
        let Some(overrides) = &self.settings else {
            return Ok(base);
        };
        let mut table = toml::Table::try_from(&base).map_err(|e| HarnessError::Config(e.to_string()))?;
        merge(&mut table, overrides);
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("settings: {e}")))
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}
