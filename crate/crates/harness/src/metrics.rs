use serde::{Deserialize, Serialize};

use flexcomp_core::{Error, Result, Trajectory};

/// Per-channel tracking error norms over every sampling instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub l2: Vec<f64>,
    pub linf: Vec<f64>,
}

impl Metrics {
    pub fn n_channels(&self) -> usize {
        self.l2.len()
    }

    pub fn mean_l2(&self) -> f64 {
        self.l2.iter().sum::<f64>() / self.l2.len().max(1) as f64
    }
}

/// `l2_i = sqrt(Σ_t e_i(t)²)`, `linf_i = max_t |e_i(t)|` with `e = q − q_d`.
pub fn compute_metrics(q: &Trajectory, q_d: &Trajectory) -> Result<Metrics> {
    q.require_same_shape(q_d, "response and reference")?;
    Ok(metrics_from_rows(q.data(), q_d.data()))
}

pub(crate) fn metrics_from_rows(q: &nalgebra::DMatrix<f64>, q_d: &nalgebra::DMatrix<f64>) -> Metrics {
    let e = q - q_d;
    Metrics {
        l2: e.row_iter().map(|r| r.norm()).collect(),
        linf: e.row_iter().map(|r| r.amax()).collect(),
    }
}

/// Same norms on raw per-channel series (rows are channels).
pub fn compute_metrics_matrix(q: &nalgebra::DMatrix<f64>, q_d: &nalgebra::DMatrix<f64>) -> Result<Metrics> {
    if q.shape() != q_d.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", q.shape(), q_d.shape())));
    }
    Ok(metrics_from_rows(q, q_d))
}

/// Per-channel `100 (1 − l2_approach / l2_baseline)`; a zero baseline counts as 0 %.
pub fn improvement_per_channel(baseline: &Metrics, approach: &Metrics) -> Vec<f64> {
    baseline
        .l2
        .iter()
        .zip(&approach.l2)
        .map(|(&b, &a)| if b > 0.0 { 100.0 * (1.0 - a / b) } else { 0.0 })
        .collect()
}

/// Unweighted mean of [`improvement_per_channel`].
pub fn mean_improvement(baseline: &Metrics, approach: &Metrics) -> f64 {
    let per = improvement_per_channel(baseline, approach);
    per.iter().sum::<f64>() / per.len().max(1) as f64
}
