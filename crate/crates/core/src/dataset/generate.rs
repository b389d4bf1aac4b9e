use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::CampaignSpec;
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;
use nalgebra::DMatrix;

const HELD_OUT_BIT: u64 = 1 << 63;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix(base: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ stream) ^ index)
}

/// Campaign trajectory seed; the top bit is always clear.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix(base, stream, index) & !HELD_OUT_BIT
}

/// Held-out evaluation seed; the top bit is always set, so it can never equal
/// a campaign seed.
pub fn held_out_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix(base, stream, index) | HELD_OUT_BIT
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidParams {
    pub center: f64,
    pub amplitude: f64,
    pub frequency_hz: f64,
    pub phase: f64,
}

impl SinusoidParams {
    pub fn eval(&self, t_seconds: f64) -> f64 {
        self.center + self.amplitude * (2.0 * std::f64::consts::PI * self.frequency_hz * t_seconds + self.phase).sin()
    }
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn draw_center(rng: &mut ChaCha8Rng, spec: &CampaignSpec, lim: [f64; 2]) -> f64 {
    let mid = 0.5 * (lim[0] + lim[1]);
    let spread = spec.center_fraction * 0.5 * (lim[1] - lim[0]);
    if spread > 0.0 {
        mid + rng.random_range(-spread..spread)
    } else {
        mid
    }
}

/// Per-joint parameters drawn for `seed`.
pub fn sinusoid_params(spec: &CampaignSpec, limits: &[[f64; 2]], seed: u64) -> Result<Vec<SinusoidParams>> {
    spec.validate(limits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..spec.n_joints())
        .map(|j| {
            let center = draw_center(&mut rng, spec, limits[j]);
            let amplitude = draw(&mut rng, spec.amplitude[j]);
            let frequency_hz = draw(&mut rng, spec.frequency_hz[j]);
            let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            SinusoidParams {
                center,
                amplitude,
                frequency_hz,
                phase,
            }
        })
        .collect())
}

/// `q_i(t) = c_i + A_i sin(2π f_i t + φ_i)` sampled at the campaign rate.
pub fn gen_sinusoid(spec: &CampaignSpec, limits: &[[f64; 2]], seed: u64) -> Result<Trajectory> {
    let params = sinusoid_params(spec, limits, seed)?;
    let dt = 1.0 / spec.sample_rate;
    let data = DMatrix::from_fn(spec.n_joints(), spec.samples_per_traj, |j, t| params[j].eval(t as f64 * dt));
    Trajectory::new(clamp_into(data, limits), spec.sample_rate)
}

/// Second-order Butterworth low-pass (bilinear transform) run forward and
/// backward twice, so the result has zero phase and a steep roll-off.
pub fn butterworth_lowpass(x: &[f64], cutoff_hz: f64, sample_rate: f64) -> Vec<f64> {
    let k = (std::f64::consts::PI * cutoff_hz / sample_rate).tan();
    let s2 = std::f64::consts::SQRT_2;
    let norm = 1.0 / (1.0 + s2 * k + k * k);
    let b0 = k * k * norm;
    let (b1, b2) = (2.0 * b0, b0);
    let a1 = 2.0 * (k * k - 1.0) * norm;
    let a2 = (1.0 - s2 * k + k * k) * norm;
    let pass = |v: &mut Vec<f64>| {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for s in v.iter_mut() {
            let x0 = *s;
            let y0 = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *s = y0;
        }
    };
    let mut v = x.to_vec();
    for _ in 0..2 {
        pass(&mut v);
        v.reverse();
        pass(&mut v);
        v.reverse();
    }
    v
}

/// Low-pass filtered white noise per joint, rescaled to `c ± A`.
pub fn gen_random(spec: &CampaignSpec, limits: &[[f64; 2]], seed: u64) -> Result<Trajectory> {
    spec.validate(limits)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.n_joints();
    let len = spec.samples_per_traj;
    let mut data = DMatrix::zeros(n, len);
    let noise = Normal::new(0.0, spec.random_noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    for j in 0..n {
        let center = draw_center(&mut rng, spec, limits[j]);
        let amplitude = draw(&mut rng, spec.amplitude[j]);
        let cutoff = draw(&mut rng, spec.random_cutoff_hz);
        // Pad both ends so the filter transients fall outside the kept span.
        let pad = (3.0 * spec.sample_rate / cutoff).ceil() as usize;
        let raw: Vec<f64> = (0..len + 2 * pad).map(|_| noise.sample(&mut rng)).collect();
        let filtered = butterworth_lowpass(&raw, cutoff, spec.sample_rate);
        let kept = &filtered[pad..pad + len];
        let mean = kept.iter().sum::<f64>() / len as f64;
        let peak = kept.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        for (t, v) in kept.iter().enumerate() {
            data[(j, t)] = if peak > 0.0 {
                center + amplitude * (v - mean) / peak
            } else {
                center
            };
        }
    }
    Trajectory::new(clamp_into(data, limits), spec.sample_rate)
}

fn clamp_into(mut data: DMatrix<f64>, limits: &[[f64; 2]]) -> DMatrix<f64> {
    for (j, lim) in limits.iter().enumerate() {
        for v in data.row_mut(j).iter_mut() {
            *v = v.clamp(lim[0], lim[1]);
        }
    }
    data
}
