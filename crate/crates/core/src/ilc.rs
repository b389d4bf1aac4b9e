//! Gradient iterative learning control: refine a feedforward input so the
//! learned forward model (or the plant) tracks a known reference, descending
//! along the model's input adjoint with a one-dimensional line search.
//!
//! The objective only covers samples `T..N`: the first `T` outputs have no
//! model prediction, and the input is frozen to the reference there.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::arm_sim::{Plant, PlantConfig};
use crate::error::{Error, Result};
use crate::neural::{Direction, RecurrentModel};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IlcConfig {
    pub max_iters: usize,
    /// Stop when the error improved by less than this fraction over the last
    /// `convergence_window` iterations.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// Line-search grid `α_ref · 2^k` for `k` in this inclusive range.
    pub grid_min_exp: i32,
    pub grid_max_exp: i32,
    /// Golden-section steps around the best grid point.
    pub refine_steps: usize,
    pub clamp_to_limits: bool,
    /// Limits used when clamping; `ilc_on_plant` uses the plant's own.
    pub joint_limits: Option<Vec<[f64; 2]>>,
}

impl Default for IlcConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            convergence_tol: 1e-4,
            convergence_window: 3,
            grid_min_exp: -8,
            grid_max_exp: 2,
            refine_steps: 12,
            clamp_to_limits: true,
            joint_limits: None,
        }
    }
}

impl IlcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.convergence_tol > 0.0) || self.convergence_window == 0 {
            return Err(Error::Config("ILC needs max_iters ≥ 1, tol > 0 and a window ≥ 1".into()));
        }
        if self.grid_min_exp > self.grid_max_exp {
            return Err(Error::Config("empty line-search grid".into()));
        }
        Ok(())
    }
}

/// Loop state after an iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IlcState {
    pub u_k: Trajectory,
    /// Tracking error over samples `T..N`, length `N − T`.
    pub e_q: Trajectory,
    pub alpha_k: f64,
    pub iter: usize,
    /// ℓ2 error before the first step, then after every iteration.
    pub error_history: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearch {
    /// Accepted step; 0 when no trial point improved.
    pub alpha: f64,
    pub error: f64,
    pub evaluations: usize,
}

fn check_model(model: &RecurrentModel, n_joints: usize) -> Result<()> {
    if model.direction() != Direction::Unidirectional {
        return Err(Error::Config("ILC needs a unidirectional forward model".into()));
    }
    if model.n_joints() != n_joints {
        return Err(Error::Shape(format!(
            "model has {} joints, trajectory has {n_joints}",
            model.n_joints()
        )));
    }
    Ok(())
}

/// Slides the model window over `u`; output sample `j` predicts `q(j + T)`.
pub fn predict_rollout(model: &RecurrentModel, u: &Trajectory) -> Result<Trajectory> {
    check_model(model, u.n_joints())?;
    let t = model.window_len();
    let count = u.len().checked_sub(t).filter(|&c| c > 0).ok_or(Error::TooShort {
        len: u.len(),
        need: t + 1,
    })?;
    let windows: Vec<&[f64]> = (0..count).map(|j| u.window_slice(j, t)).collect();
    let preds = model.predict_windows(&windows)?;
    // `preds` is count × n row-major, which is n × count column-major.
    Trajectory::new(DMatrix::from_vec(u.n_joints(), count, preds), u.sample_rate())
}

fn tail(q_d: &Trajectory, t: usize) -> &[f64] {
    &q_d.as_slice()[t * q_d.n_joints()..]
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Predicted error trajectory `rollout(u) − q_d[T..]` and its ℓ2 norm.
pub fn predicted_error(model: &RecurrentModel, u: &Trajectory, q_d: &Trajectory) -> Result<(Trajectory, f64)> {
    u.require_same_shape(q_d, "ILC input and reference")?;
    let mut e = predict_rollout(model, u)?.into_data();
    for (x, d) in e.as_mut_slice().iter_mut().zip(tail(q_d, model.window_len())) {
        *x -= d;
    }
    let norm = l2(e.as_slice());
    Ok((Trajectory::new(e, u.sample_rate())?, norm))
}

/// Sums the window adjoints `∂⟨e(j), model(u[j..j+T])⟩/∂u` over all window
/// positions. `e` has length `N − T`.
pub fn accumulate_vjp(model: &RecurrentModel, u: &Trajectory, e: &Trajectory) -> Result<Trajectory> {
    check_model(model, u.n_joints())?;
    let t = model.window_len();
    let n = u.n_joints();
    if e.n_joints() != n || e.len() + t != u.len() {
        return Err(Error::Shape(format!(
            "error trajectory {}×{} does not match input {}×{} with window {t}",
            e.n_joints(),
            e.len(),
            n,
            u.len()
        )));
    }
    let count = e.len();
    let windows: Vec<&[f64]> = (0..count).map(|j| u.window_slice(j, t)).collect();
    let per_window = model.input_vjp_windows(&windows, e.as_slice())?;
    let mut grad = DMatrix::zeros(n, u.len());
    let g = grad.as_mut_slice();
    for (j, block) in per_window.chunks_exact(n * t).enumerate() {
        for (dst, src) in g[j * n..(j + t) * n].iter_mut().zip(block) {
            *dst += src;
        }
    }
    Trajectory::new(grad, u.sample_rate())
}

/// `∂(½‖rollout(u) − q_d[T..]‖²)/∂u`, full length.
pub fn ilc_gradient(model: &RecurrentModel, u: &Trajectory, q_d: &Trajectory) -> Result<Trajectory> {
    let (e, _) = predicted_error(model, u, q_d)?;
    accumulate_vjp(model, u, &e)
}

fn candidate(u: &Trajectory, grad: &Trajectory, alpha: f64, window: usize, limits: Option<&[[f64; 2]]>) -> Result<Trajectory> {
    let n = u.n_joints();
    let mut data = u.data().clone();
    for (k, (x, g)) in data.as_mut_slice().iter_mut().zip(grad.as_slice()).enumerate() {
        if k / n >= window {
            *x -= alpha * g;
        }
    }
    if let Some(limits) = limits {
        for (j, lim) in limits.iter().enumerate() {
            for t in window..data.ncols() {
                data[(j, t)] = data[(j, t)].clamp(lim[0], lim[1]);
            }
        }
    }
    u.with_data(data)
}

/// Grid search over `α_ref · 2^k` then golden-section refinement around the
/// best grid point. Only returns a nonzero step if it lowers `error_of`.
fn search(
    current: f64,
    alpha_ref: f64,
    cfg: &IlcConfig,
    mut error_of: impl FnMut(f64) -> Result<f64>,
) -> Result<LineSearch> {
    let mut best = LineSearch {
        alpha: 0.0,
        error: current,
        evaluations: 0,
    };
    if !(alpha_ref > 0.0 && alpha_ref.is_finite()) || current == 0.0 {
        return Ok(best);
    }
    let mut eval = |a: f64, best: &mut LineSearch| -> Result<f64> {
        let e = error_of(a)?;
        best.evaluations += 1;
        if e < best.error {
            best.alpha = a;
            best.error = e;
        }
        Ok(e)
    };
    let grid: Vec<f64> = (cfg.grid_min_exp..=cfg.grid_max_exp)
        .map(|k| alpha_ref * 2f64.powi(k))
        .collect();
    let mut grid_err = Vec::with_capacity(grid.len());
    for &a in &grid {
        grid_err.push(eval(a, &mut best)?);
    }
    let k = (0..grid.len())
        .min_by(|&a, &b| grid_err[a].total_cmp(&grid_err[b]))
        .expect("grid is non-empty");
    let lo = if k == 0 { 0.5 * grid[0] } else { grid[k - 1] };
    let hi = if k + 1 == grid.len() { 2.0 * grid[k] } else { grid[k + 1] };
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = eval(c, &mut best)?;
    let mut fd = eval(d, &mut best)?;
    for _ in 0..cfg.refine_steps {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = eval(c, &mut best)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = eval(d, &mut best)?;
        }
    }
    Ok(best)
}

fn reference_step(e_norm: f64, grad: &Trajectory, window: usize) -> f64 {
    let n = grad.n_joints();
    let g = l2(&grad.as_slice()[window * n..]);
    if g > 0.0 {
        e_norm / g
    } else {
        0.0
    }
}

/// Step size along `−grad` minimising the model-predicted ℓ2 error.
pub fn line_search(
    model: &RecurrentModel,
    u: &Trajectory,
    grad: &Trajectory,
    q_d: &Trajectory,
    cfg: &IlcConfig,
) -> Result<LineSearch> {
    let t = model.window_len();
    let (_, current) = predicted_error(model, u, q_d)?;
    let limits = clamp_limits(cfg, None);
    search(current, reference_step(current, grad, t), cfg, |a| {
        let cand = candidate(u, grad, a, t, limits)?;
        Ok(predicted_error(model, &cand, q_d)?.1)
    })
}

fn clamp_limits<'a>(cfg: &'a IlcConfig, plant: Option<&'a [[f64; 2]]>) -> Option<&'a [[f64; 2]]> {
    if !cfg.clamp_to_limits {
        return None;
    }
    plant.or(cfg.joint_limits.as_deref())
}

fn converged(history: &[f64], cfg: &IlcConfig) -> bool {
    let k = history.len();
    if k <= cfg.convergence_window {
        return false;
    }
    let past = history[k - 1 - cfg.convergence_window];
    past == 0.0 || (past - history[k - 1]) / past < cfg.convergence_tol
}

impl IlcState {
    /// `u⁰ = q_d` with its predicted error.
    pub fn init(model: &RecurrentModel, q_d: &Trajectory) -> Result<Self> {
        let (e_q, err) = predicted_error(model, q_d, q_d)?;
        Ok(Self {
            u_k: q_d.clone(),
            e_q,
            alpha_k: 0.0,
            iter: 0,
            error_history: vec![err],
            converged: err == 0.0,
        })
    }

    pub fn error(&self) -> f64 {
        *self.error_history.last().expect("history starts with the initial error")
    }
}

/// One gradient step with line search against the model.
pub fn ilc_step(model: &RecurrentModel, state: &mut IlcState, q_d: &Trajectory, cfg: &IlcConfig) -> Result<()> {
    let t = model.window_len();
    let grad = accumulate_vjp(model, &state.u_k, &state.e_q)?;
    let limits = clamp_limits(cfg, None);
    let current = state.error();
    let ls = search(current, reference_step(current, &grad, t), cfg, |a| {
        let cand = candidate(&state.u_k, &grad, a, t, limits)?;
        Ok(predicted_error(model, &cand, q_d)?.1)
    })?;
    state.iter += 1;
    state.alpha_k = ls.alpha;
    if ls.alpha > 0.0 {
        state.u_k = candidate(&state.u_k, &grad, ls.alpha, t, limits)?;
        let (e_q, err) = predicted_error(model, &state.u_k, q_d)?;
        state.e_q = e_q;
        state.error_history.push(err);
    } else {
        state.error_history.push(current);
        state.converged = true;
    }
    state.converged |= state.error() == 0.0 || converged(&state.error_history, cfg);
    Ok(())
}

/// Refines the input against the learned forward model starting from `u⁰ = q_d`.
pub fn ilc_refine(model: &RecurrentModel, q_d: &Trajectory, cfg: &IlcConfig) -> Result<(Trajectory, IlcState)> {
    cfg.validate()?;
    check_model(model, q_d.n_joints())?;
    let mut state = IlcState::init(model, q_d)?;
    if state.converged {
        state.iter = 1;
        state.error_history.push(state.error());
    }
    while !state.converged && state.iter < cfg.max_iters {
        ilc_step(model, &mut state, q_d, cfg)?;
    }
    Ok((state.u_k.clone(), state))
}

/// Measured error `simulate(u) − q_d` over samples `T..N`.
fn plant_error(plant: &Plant, u: &Trajectory, q_d: &Trajectory, t: usize) -> Result<(Trajectory, f64)> {
    let q = plant.simulate(u)?;
    let n = q.n_joints();
    let mut e = DMatrix::zeros(n, q.len() - t);
    for (x, (a, b)) in e.as_mut_slice().iter_mut().zip(tail(&q, t).iter().zip(tail(q_d, t))) {
        *x = a - b;
    }
    let norm = l2(e.as_slice());
    Ok((Trajectory::new(e, q.sample_rate())?, norm))
}

/// Continues refinement against the plant: the measured error drives the
/// model adjoint, and a step is kept only if it lowers the measured error.
pub fn ilc_on_plant(
    plant_config: &PlantConfig,
    model: &RecurrentModel,
    q_d: &Trajectory,
    u0: &Trajectory,
    cfg: &IlcConfig,
) -> Result<(Trajectory, IlcState)> {
    cfg.validate()?;
    check_model(model, q_d.n_joints())?;
    u0.require_same_shape(q_d, "initial input and reference")?;
    let plant = Plant::new(plant_config.clone())?;
    let t = model.window_len();
    if q_d.len() <= t {
        return Err(Error::TooShort {
            len: q_d.len(),
            need: t + 1,
        });
    }
    let limits = clamp_limits(cfg, Some(&plant_config.joint_limits));
    let (e_q, err) = plant_error(&plant, u0, q_d, t)?;
    let mut state = IlcState {
        u_k: u0.clone(),
        e_q,
        alpha_k: 0.0,
        iter: 0,
        error_history: vec![err],
        converged: err == 0.0,
    };
    while !state.converged && state.iter < cfg.max_iters {
        let grad = accumulate_vjp(model, &state.u_k, &state.e_q)?;
        let current = state.error();
        let ls = search(current, reference_step(current, &grad, t), cfg, |a| {
            let cand = candidate(&state.u_k, &grad, a, t, limits)?;
            Ok(plant_error(&plant, &cand, q_d, t)?.1)
        })?;
        state.iter += 1;
        state.alpha_k = ls.alpha;
        if ls.alpha > 0.0 {
            state.u_k = candidate(&state.u_k, &grad, ls.alpha, t, limits)?;
            let (e_q, err) = plant_error(&plant, &state.u_k, q_d, t)?;
            state.e_q = e_q;
            state.error_history.push(err);
        } else {
            state.error_history.push(current);
            state.converged = true;
        }
        state.converged |= state.error() == 0.0 || converged(&state.error_history, cfg);
    }
    Ok((state.u_k.clone(), state))
}
