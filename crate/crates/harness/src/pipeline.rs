use flexcomp_core::arm_sim::{simulate, PlantConfig};
use flexcomp_core::dataset::{
    collect_campaign, gen_random, gen_sinusoid, held_out_seed, Campaign, TrajectoryPair, WindowKind, WindowSet,
    STREAM_RANDOM, STREAM_SINUSOID,
};
use flexcomp_core::neural::{evaluate_mse, train, RecurrentModel, SampleSource, Topology, TrainConfig, TrainHistory};
use flexcomp_core::Trajectory;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::profile::Settings;

/// Held-out reference families; seeds never overlap the campaign's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeldOutKind {
    Sinusoid,
    Random,
}

pub fn collect(plant: &PlantConfig, settings: &Settings) -> Result<Campaign> {
    Ok(collect_campaign(plant, &settings.campaign)?)
}

fn fit_and_train(
    topology: Topology,
    source: &dyn SampleSource,
    cfg: &TrainConfig,
    normalization_samples: usize,
) -> Result<(RecurrentModel, TrainHistory)> {
    let mut model = RecurrentModel::new(topology, cfg.rng_seed)?;
    model.fit_normalization(source, normalization_samples)?;
    Ok(train(&model, source, cfg)?)
}

/// Unidirectional model: command window `q_d[s..s+T)` → response `q(s+T)`.
pub fn train_forward(campaign: &Campaign, settings: &Settings) -> Result<(RecurrentModel, TrainHistory)> {
    let n = campaign.spec.n_joints();
    let set = WindowSet::new(&campaign.pairs, WindowKind::Forward, settings.window)?;
    fit_and_train(settings.forward_topology(n), &set, &settings.forward_train, settings.normalization_samples)
}

/// Bidirectional model: response window centred on `t` → command `q_d(t)`.
pub fn train_inverse(campaign: &Campaign, settings: &Settings) -> Result<(RecurrentModel, TrainHistory)> {
    let n = campaign.spec.n_joints();
    let set = WindowSet::new(&campaign.pairs, WindowKind::Inverse, settings.window)?;
    fit_and_train(settings.inverse_topology(n), &set, &settings.inverse_train, settings.normalization_samples)
}

/// The `index`-th held-out reference of a family, `settings.test_len` samples long.
pub fn held_out_reference(plant: &PlantConfig, settings: &Settings, kind: HeldOutKind, index: u64) -> Result<Trajectory> {
    let mut spec = settings.campaign.clone();
    spec.samples_per_traj = settings.test_len;
    let base = settings.campaign.rng_seed;
    Ok(match kind {
        HeldOutKind::Sinusoid => gen_sinusoid(&spec, &plant.joint_limits, held_out_seed(base, STREAM_SINUSOID, index))?,
        HeldOutKind::Random => gen_random(&spec, &plant.joint_limits, held_out_seed(base, STREAM_RANDOM, index))?,
    })
}

/// One-step prediction quality on held-out open-loop responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub mse: f64,
    /// Per-joint target variance averaged over joints.
    pub target_variance: f64,
    pub normalized_mse: f64,
    /// Same ratio for predicting the last commanded sample.
    pub hold_normalized_mse: f64,
    pub n_samples: usize,
}

pub fn held_out_pairs(plant: &PlantConfig, settings: &Settings) -> Result<Vec<TrajectoryPair>> {
    let mut pairs = Vec::new();
    for i in 0..settings.fidelity_trajectories as u64 {
        for kind in [HeldOutKind::Sinusoid, HeldOutKind::Random] {
            let q_d = held_out_reference(plant, settings, kind, i)?;
            let q = simulate(plant, &q_d)?;
            pairs.push(TrajectoryPair::new(q_d, q)?);
        }
    }
    Ok(pairs)
}

/// Normalised MSE = MSE / mean per-joint variance of the targets.
pub fn forward_fidelity(model: &RecurrentModel, pairs: &[TrajectoryPair]) -> Result<Fidelity> {
    let set = WindowSet::new(pairs, WindowKind::Forward, model.window_len())?;
    let n = model.n_joints();
    let len = set.len();
    let idx: Vec<usize> = (0..len).collect();
    let mse = evaluate_mse(model, &set, &idx)?;
    let mut mean = vec![0.0; n];
    for i in 0..len {
        for (m, t) in mean.iter_mut().zip(set.target(i)) {
            *m += t / len as f64;
        }
    }
    let mut var = 0.0;
    let mut hold = 0.0;
    let t = model.window_len();
    for i in 0..len {
        let target = set.target(i);
        let last = &set.window(i)[(t - 1) * n..];
        for j in 0..n {
            var += (target[j] - mean[j]).powi(2);
            hold += (target[j] - last[j]).powi(2);
        }
    }
    let denom = (len * n) as f64;
    let variance = var / denom;
    Ok(Fidelity {
        mse,
        target_variance: variance,
        normalized_mse: mse / variance,
        hold_normalized_mse: hold / denom / variance,
        n_samples: len,
    })
}
