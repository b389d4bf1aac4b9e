//! Excitation trajectories, the data campaign against the plant, window
//! sampling for both model directions, and dataset files.

mod generate;
mod store;
mod windows;

use serde::{Deserialize, Serialize};

use crate::arm_sim::{KinematicParams, Plant, PlantConfig};
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;

pub use generate::{
    butterworth_lowpass, derive_seed, gen_random, gen_sinusoid, held_out_seed, sinusoid_params, SinusoidParams,
};
pub use store::{export_csv, load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use windows::{
    forward_sample_count, inverse_sample_count, make_forward_samples, make_inverse_samples, WindowKind, WindowSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignSpec {
    pub n_random: usize,
    pub n_sinusoid: usize,
    pub samples_per_traj: usize,
    pub sample_rate: f64,
    /// Per-joint amplitude range (rad), shared by both trajectory families.
    pub amplitude: Vec<[f64; 2]>,
    /// Per-joint sinusoid frequency range (Hz).
    pub frequency_hz: Vec<[f64; 2]>,
    /// Centers are drawn within this fraction of each joint's half range
    /// around its midpoint.
    pub center_fraction: f64,
    /// Low-pass cutoff range for random trajectories (Hz).
    pub random_cutoff_hz: [f64; 2],
    /// Standard deviation of the white noise fed to the low-pass filter.
    pub random_noise_std: f64,
    pub rng_seed: u64,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        Self::paper(7)
    }
}

impl CampaignSpec {
    /// 100 random + 400 sinusoid trajectories of 2500 samples.
    pub fn paper(n_joints: usize) -> Self {
        Self {
            n_random: 100,
            n_sinusoid: 400,
            samples_per_traj: 2500,
            sample_rate: 100.0,
            amplitude: vec![[0.05, 0.5]; n_joints],
            frequency_hz: vec![[0.1, 1.0]; n_joints],
            center_fraction: 0.5,
            random_cutoff_hz: [0.3, 1.5],
            random_noise_std: 1.0,
            rng_seed: 0,
        }
    }

    /// 10 random + 40 sinusoid trajectories of 500 samples.
    pub fn desk(n_joints: usize) -> Self {
        Self {
            n_random: 10,
            n_sinusoid: 40,
            samples_per_traj: 500,
            ..Self::paper(n_joints)
        }
    }

    pub fn n_joints(&self) -> usize {
        self.amplitude.len()
    }

    pub fn n_trajectories(&self) -> usize {
        self.n_random + self.n_sinusoid
    }

    /// Checks ranges and that every trajectory this campaign can produce stays inside `limits`.
    pub fn validate(&self, limits: &[[f64; 2]]) -> Result<()> {
        let n = self.n_joints();
        if n == 0 || self.frequency_hz.len() != n || limits.len() != n {
            return Err(Error::Config(format!(
                "campaign ranges cover {} / {} joints, limits {}",
                self.amplitude.len(),
                self.frequency_hz.len(),
                limits.len()
            )));
        }
        if self.samples_per_traj == 0 || !(self.sample_rate > 0.0) {
            return Err(Error::Config("samples_per_traj and sample_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.center_fraction) || !(self.random_noise_std >= 0.0) {
            return Err(Error::Config("center_fraction must lie in [0, 1), noise std ≥ 0".into()));
        }
        let ordered = |r: &[f64; 2]| r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !self.amplitude.iter().chain(&self.frequency_hz).all(ordered) || !ordered(&self.random_cutoff_hz) {
            return Err(Error::Config("ranges must be finite, non-negative and ordered".into()));
        }
        let nyquist = 0.5 * self.sample_rate;
        if self.random_cutoff_hz[0] <= 0.0 || self.random_cutoff_hz[1] >= nyquist {
            return Err(Error::Config(format!("random cutoff must lie in (0, {nyquist}) Hz")));
        }
        for (j, lim) in limits.iter().enumerate() {
            let half = 0.5 * (lim[1] - lim[0]);
            if !(half > 0.0) {
                return Err(Error::Config(format!("joint {j}: empty limit range")));
            }
            let reach = self.center_fraction * half + self.amplitude[j][1];
            if reach > half {
                return Err(Error::Infeasible(format!(
                    "joint {j}: center spread {:.3} + amplitude {:.3} exceeds half range {half:.3}",
                    self.center_fraction * half,
                    self.amplitude[j][1]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Random,
    Sinusoid,
}

/// Commanded trajectory and the plant's measured response.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub q_d: Trajectory,
    pub q: Trajectory,
}

impl TrajectoryPair {
    pub fn new(q_d: Trajectory, q: Trajectory) -> Result<Self> {
        q_d.require_same_shape(&q, "trajectory pair")?;
        if q_d.sample_rate() != q.sample_rate() {
            return Err(Error::RateMismatch {
                got: q.sample_rate(),
                expected: q_d.sample_rate(),
            });
        }
        Ok(Self { q_d, q })
    }

    pub fn len(&self) -> usize {
        self.q_d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_d.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignEntry {
    pub kind: TrajectoryKind,
    pub seed: u64,
}

/// Collected pairs with the metadata needed to regenerate them.
#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub spec: CampaignSpec,
    pub plant_fingerprint: String,
    pub entries: Vec<CampaignEntry>,
    pub pairs: Vec<TrajectoryPair>,
}

/// Seed streams; campaign and held-out seeds never coincide (see [`held_out_seed`]).
pub const STREAM_RANDOM: u64 = 1;
pub const STREAM_SINUSOID: u64 = 2;

/// Trajectory kinds and seeds for a spec, random trajectories first.
pub fn campaign_entries(spec: &CampaignSpec) -> Vec<CampaignEntry> {
    let random = (0..spec.n_random).map(|i| CampaignEntry {
        kind: TrajectoryKind::Random,
        seed: derive_seed(spec.rng_seed, STREAM_RANDOM, i as u64),
    });
    let sinus = (0..spec.n_sinusoid).map(|i| CampaignEntry {
        kind: TrajectoryKind::Sinusoid,
        seed: derive_seed(spec.rng_seed, STREAM_SINUSOID, i as u64),
    });
    random.chain(sinus).collect()
}

pub fn generate(spec: &CampaignSpec, limits: &[[f64; 2]], entry: CampaignEntry) -> Result<Trajectory> {
    match entry.kind {
        TrajectoryKind::Random => gen_random(spec, limits, entry.seed),
        TrajectoryKind::Sinusoid => gen_sinusoid(spec, limits, entry.seed),
    }
}

/// Generates every trajectory of the campaign and records the plant response.
pub fn collect_campaign(plant_config: &PlantConfig, spec: &CampaignSpec) -> Result<Campaign> {
    let plant = Plant::new(plant_config.clone())?;
    spec.validate(&plant_config.joint_limits)?;
    if spec.n_joints() != plant_config.n_joints {
        return Err(Error::Config(format!(
            "campaign has {} joints, plant has {}",
            spec.n_joints(),
            plant_config.n_joints
        )));
    }
    let entries = campaign_entries(spec);
    let mut pairs = Vec::with_capacity(entries.len());
    for (index, entry) in entries.iter().enumerate() {
        let wrap = |e: Error| Error::Trajectory {
            index,
            source: Box::new(e),
        };
        let q_d = generate(spec, &plant_config.joint_limits, *entry).map_err(wrap)?;
        let q = plant.simulate(&q_d).map_err(wrap)?;
        pairs.push(TrajectoryPair { q_d, q });
    }
    Ok(Campaign {
        spec: spec.clone(),
        plant_fingerprint: plant_config.fingerprint(),
        entries,
        pairs,
    })
}

/// Histogram of position manipulability over every `stride`-th response sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn manipulability_histogram(
    trajectories: &[&Trajectory],
    kinematics: &KinematicParams,
    bins: usize,
    stride: usize,
) -> Result<Histogram> {
    let mut values = Vec::new();
    for traj in trajectories {
        for t in (0..traj.len()).step_by(stride.max(1)) {
            values.push(kinematics.position_manipulability(&traj.sample(t))?);
        }
    }
    let bins = bins.max(1);
    let hi = values.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let width = hi / bins as f64;
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for v in values {
        counts[((v / width) as usize).min(bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}
