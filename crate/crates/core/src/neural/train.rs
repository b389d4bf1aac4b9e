use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::model::RecurrentModel;
use super::samples::SampleSource;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_keep: f64,
    pub max_iters: usize,
    pub rng_seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub validation_fraction: f64,
    /// Iterations between history entries.
    pub log_every: usize,
    /// Validation is evaluated on at most this many held-out samples.
    pub validation_max_samples: usize,
    /// Learning rate decays linearly to this fraction of its initial value.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            dropout_keep: 0.5,
            max_iters: 10_000,
            rng_seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_fraction: 0.2,
            log_every: 100,
            validation_max_samples: 2048,
            final_lr_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!("dropout_keep {} outside (0, 1]", self.dropout_keep)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) || self.log_every == 0 {
            return Err(Error::Config("learning_rate and log_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iter: usize,
    /// Mean training-batch MSE since the previous entry.
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub n_train: usize,
    pub n_val: usize,
    pub entries: Vec<HistoryEntry>,
}

impl TrainHistory {
    pub fn final_val_mse(&self) -> Option<f64> {
        self.entries.last().and_then(|e| e.val_mse)
    }
}

/// Shuffled train/validation partition of `0..len`.
pub fn split_indices(len: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((len as f64) * validation_fraction).round() as usize;
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Mean squared error of `model` over the listed samples.
pub fn evaluate_mse(model: &RecurrentModel, source: &dyn SampleSource, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = model.n_joints();
    let mut sum = 0.0;
    for chunk in indices.chunks(512) {
        let windows: Vec<&[f64]> = chunk.iter().map(|&i| source.window(i)).collect();
        let preds = model.predict_windows(&windows)?;
        for (k, &i) in chunk.iter().enumerate() {
            let t = source.target(i);
            for j in 0..n {
                let e = preds[k * n + j] - t[j];
                sum += e * e;
            }
        }
    }
    Ok(sum / (indices.len() * n) as f64)
}

/// Adam on random mini-batches. Returns the final iterate and the logged history.
pub fn train(
    model: &RecurrentModel,
    source: &dyn SampleSource,
    cfg: &TrainConfig,
) -> Result<(RecurrentModel, TrainHistory)> {
    cfg.validate()?;
    model.validate()?;
    let (train_idx, val_idx) = split_indices(source.len(), cfg.validation_fraction, cfg.rng_seed);
    if train_idx.len() < cfg.batch_size {
        return Err(Error::Dataset(format!(
            "{} training samples is fewer than one batch of {}",
            train_idx.len(),
            cfg.batch_size
        )));
    }
    let val_eval: Vec<usize> = val_idx.iter().take(cfg.validation_max_samples).copied().collect();
    let mut history = TrainHistory {
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        entries: Vec::new(),
    };
    let mut model = model.clone();
    let mut flat = model.params.to_flat();
    let mut adam = AdamState::new(flat.len(), cfg.beta1, cfg.beta2, cfg.epsilon);
    // A separate stream from the split so changing max_iters never reshuffles.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut window_sum = 0.0;
    let mut window_count = 0usize;
    for it in 0..cfg.max_iters {
        let picks = sample(&mut rng, train_idx.len(), cfg.batch_size);
        let windows: Vec<&[f64]> = picks.iter().map(|k| source.window(train_idx[k])).collect();
        let targets: Vec<&[f64]> = picks.iter().map(|k| source.target(train_idx[k])).collect();
        let (mse, grads) = model.loss_and_grads_slices(&windows, &targets, cfg.dropout_keep, &mut rng)?;
        let progress = it as f64 / cfg.max_iters as f64;
        let lr = cfg.learning_rate * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
        adam.step(&mut flat, &grads.to_flat(), lr)?;
        model.params.assign_flat(&flat)?;
        window_sum += mse;
        window_count += 1;
        if (it + 1) % cfg.log_every == 0 || it + 1 == cfg.max_iters {
            let val_mse = if val_eval.is_empty() {
                None
            } else {
                Some(evaluate_mse(&model, source, &val_eval)?)
            };
            history.entries.push(HistoryEntry {
                iter: it + 1,
                train_mse: window_sum / window_count as f64,
                val_mse,
            });
            window_sum = 0.0;
            window_count = 0;
        }
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("trained parameters"));
    }
    Ok((model, history))
}
