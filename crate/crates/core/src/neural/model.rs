use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{gemm, gemm_tn, sigmoid};
use super::params::{GruLayerParams, Params};
use super::samples::{SampleSource, WindowSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Unidirectional,
    Bidirectional,
}

/// Recurrent cell used by every layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Gru,
    /// Gates fixed open and the candidate nonlinearity replaced by identity:
    /// `h' = W_h x + U_h h + b_h`. Makes the whole model affine in its input.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub direction: Direction,
    pub cell: CellKind,
    pub n_joints: usize,
    pub hidden_size: usize,
    /// Layers per direction.
    pub depth: usize,
    pub window_len: usize,
    /// Predict an offset from the window anchor sample instead of the absolute value.
    pub residual: bool,
}

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_WINDOW: usize = 50;

impl Topology {
    /// Four-layer unidirectional forward-dynamics model.
    pub fn forward_dynamics(n_joints: usize, hidden_size: usize, window_len: usize) -> Self {
        Self {
            direction: Direction::Unidirectional,
            cell: CellKind::Gru,
            n_joints,
            hidden_size,
            depth: 4,
            window_len,
            residual: true,
        }
    }

    /// Two-layer bidirectional inverse-dynamics model.
    pub fn inverse_dynamics(n_joints: usize, hidden_size: usize, window_len: usize) -> Self {
        Self {
            direction: Direction::Bidirectional,
            depth: 2,
            ..Self::forward_dynamics(n_joints, hidden_size, window_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_joints == 0 || self.hidden_size == 0 || self.depth == 0 || self.window_len == 0 {
            return Err(Error::Config(format!("degenerate topology {self:?}")));
        }
        if self.direction == Direction::Bidirectional && (self.window_len < 2 || self.window_len % 2 != 0) {
            return Err(Error::Config(format!(
                "bidirectional window length must be even and at least 2, got {}",
                self.window_len
            )));
        }
        Ok(())
    }

    pub fn n_directions(&self) -> usize {
        match self.direction {
            Direction::Unidirectional => 1,
            Direction::Bidirectional => 2,
        }
    }

    pub fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.n_joints
        } else {
            self.n_directions() * self.hidden_size
        }
    }

    pub fn readout_input(&self) -> usize {
        self.n_directions() * self.hidden_size
    }

    /// Time index whose top hidden state the readout sees, per direction.
    fn readout_time(&self, dir: usize) -> usize {
        let t = self.window_len;
        match (self.direction, dir) {
            (Direction::Unidirectional, _) => t - 1,
            (Direction::Bidirectional, 0) => t / 2,
            _ => t / 2 - 1,
        }
    }

    /// Window columns averaged into the residual anchor.
    fn anchor_columns(&self) -> Vec<usize> {
        let t = self.window_len;
        match self.direction {
            Direction::Unidirectional => vec![t - 1],
            Direction::Bidirectional => vec![t / 2 - 1, t / 2],
        }
    }
}

/// Fixed affine maps around the network, fitted from data before training.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub input_offset: DVector<f64>,
    pub input_scale: DVector<f64>,
    pub output_offset: DVector<f64>,
    pub output_scale: DVector<f64>,
}

impl Normalization {
    pub fn identity(n: usize) -> Self {
        Self {
            input_offset: DVector::zeros(n),
            input_scale: DVector::from_element(n, 1.0),
            output_offset: DVector::zeros(n),
            output_scale: DVector::from_element(n, 1.0),
        }
    }
}

/// Stacked GRU network mapping an `n × T` window to an `n` vector.
///
/// The prediction is `anchor + output_offset + output_scale ∘ (W f + b)` where
/// `f` is the top-layer hidden state at the readout position (the concatenated
/// forward/backward states for bidirectional models) and `anchor` is zero
/// unless the topology is residual.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentModel {
    pub topology: Topology,
    pub params: Params,
    pub norm: Normalization,
}

const CHUNK: usize = 256;

impl RecurrentModel {
    pub fn new(topology: Topology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = |rng: &mut ChaCha8Rng| -> Vec<GruLayerParams> {
            (0..topology.depth)
                .map(|l| GruLayerParams::random(topology.layer_input(l), topology.hidden_size, rng))
                .collect()
        };
        let forward = stack(&mut rng);
        let backward = if topology.direction == Direction::Bidirectional {
            stack(&mut rng)
        } else {
            Vec::new()
        };
        let r = topology.readout_input();
        let s = 1.0 / (r as f64).sqrt();
        let readout_w = DMatrix::from_fn(topology.n_joints, r, |_, _| rng.random_range(-s..s));
        let readout_b = DVector::from_fn(topology.n_joints, |_, _| rng.random_range(-s..s));
        let norm = Normalization::identity(topology.n_joints);
        Ok(Self {
            topology,
            params: Params {
                forward,
                backward,
                readout_w,
                readout_b,
            },
            norm,
        })
    }

    pub fn zeros(topology: Topology) -> Result<Self> {
        let mut m = Self::new(topology, 0)?;
        m.params = m.params.zeros_like();
        Ok(m)
    }

    pub fn window_len(&self) -> usize {
        self.topology.window_len
    }

    pub fn n_joints(&self) -> usize {
        self.topology.n_joints
    }

    pub fn direction(&self) -> Direction {
        self.topology.direction
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.topology;
        t.validate()?;
        let dirs = [&self.params.forward, &self.params.backward];
        for (d, stack) in dirs.iter().enumerate() {
            let expected = if d < t.n_directions() { t.depth } else { 0 };
            if stack.len() != expected {
                return Err(Error::Shape(format!(
                    "direction {d} has {} layers, topology says {expected}",
                    stack.len()
                )));
            }
            for (l, layer) in stack.iter().enumerate() {
                layer.validate()?;
                if layer.input_size() != t.layer_input(l) || layer.hidden_size() != t.hidden_size {
                    return Err(Error::Shape(format!("layer {l} shape disagrees with topology")));
                }
            }
        }
        if self.params.readout_w.shape() != (t.n_joints, t.readout_input())
            || self.params.readout_b.len() != t.n_joints
        {
            return Err(Error::Shape("readout shape disagrees with topology".into()));
        }
        let n = t.n_joints;
        let nm = &self.norm;
        if [&nm.input_offset, &nm.input_scale, &nm.output_offset, &nm.output_scale]
            .iter()
            .any(|v| v.len() != n)
        {
            return Err(Error::Shape("normalization length disagrees with n_joints".into()));
        }
        if nm.input_scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("input scales must be positive".into()));
        }
        Ok(())
    }

    fn check_window(&self, window: &[f64]) -> Result<()> {
        let need = self.n_joints() * self.window_len();
        if window.len() != need {
            return Err(Error::Shape(format!(
                "window has {} entries, model expects {} × {}",
                window.len(),
                self.n_joints(),
                self.window_len()
            )));
        }
        Ok(())
    }

    fn check_matrix(&self, window: &DMatrix<f64>) -> Result<()> {
        if window.shape() != (self.n_joints(), self.window_len()) {
            return Err(Error::Shape(format!(
                "window is {:?}, model expects ({}, {})",
                window.shape(),
                self.n_joints(),
                self.window_len()
            )));
        }
        Ok(())
    }

    /// Inference on one window (dropout off).
    pub fn forward(&self, window: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_matrix(window)?;
        let out = self.predict_windows(&[window.as_slice()])?;
        Ok(DVector::from_vec(out))
    }

    /// Inference on many column-major windows; returns `B × n` row-major.
    pub fn predict_windows(&self, windows: &[&[f64]]) -> Result<Vec<f64>> {
        for w in windows {
            self.check_window(w)?;
        }
        let engine = Engine::new(self);
        let mut out = Vec::with_capacity(windows.len() * self.n_joints());
        for chunk in windows.chunks(CHUNK) {
            let tape = engine.forward(chunk, 1.0, None::<&mut ChaCha8Rng>, false);
            out.extend_from_slice(&tape.preds);
        }
        Ok(out)
    }

    /// Training-mode prediction with a freshly drawn dropout mask.
    pub fn predict_with_dropout(
        &self,
        window: &DMatrix<f64>,
        dropout_keep: f64,
        rng: &mut impl Rng,
    ) -> Result<DVector<f64>> {
        self.check_matrix(window)?;
        if !(dropout_keep > 0.0 && dropout_keep <= 1.0) {
            return Err(Error::Config(format!("dropout_keep {dropout_keep} outside (0, 1]")));
        }
        let tape = Engine::new(self).forward(&[window.as_slice()], dropout_keep, Some(rng), false);
        Ok(DVector::from_vec(tape.preds))
    }

    /// Mean squared error over batch and joints, and its exact gradient for
    /// the realised dropout mask.
    pub fn loss_and_grads(
        &self,
        batch: &[WindowSample],
        dropout_keep: f64,
        rng: &mut impl Rng,
    ) -> Result<(f64, Params)> {
        let windows: Vec<&[f64]> = batch.iter().map(|s| s.input.as_slice()).collect();
        let targets: Vec<&[f64]> = batch.iter().map(|s| s.target.as_slice()).collect();
        self.loss_and_grads_slices(&windows, &targets, dropout_keep, rng)
    }

    pub fn loss_and_grads_slices(
        &self,
        windows: &[&[f64]],
        targets: &[&[f64]],
        dropout_keep: f64,
        rng: &mut impl Rng,
    ) -> Result<(f64, Params)> {
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if windows.len() != targets.len() {
            return Err(Error::Shape("windows and targets differ in count".into()));
        }
        if !(dropout_keep > 0.0 && dropout_keep <= 1.0) {
            return Err(Error::Config(format!("dropout_keep {dropout_keep} outside (0, 1]")));
        }
        let n = self.n_joints();
        for (w, t) in windows.iter().zip(targets) {
            self.check_window(w)?;
            if t.len() != n {
                return Err(Error::Shape(format!("target has {} entries, expected {n}", t.len())));
            }
        }
        let engine = Engine::new(self);
        let tape = engine.forward(windows, dropout_keep, Some(rng), false);
        let count = (windows.len() * n) as f64;
        let mut d_pred = vec![0.0; windows.len() * n];
        let mut mse = 0.0;
        for (b, t) in targets.iter().enumerate() {
            for j in 0..n {
                let e = tape.preds[b * n + j] - t[j];
                mse += e * e;
                d_pred[b * n + j] = 2.0 * e / count;
            }
        }
        let (grads, _) = engine.backward(&tape, &d_pred, true, false);
        Ok((mse / count, grads.expect("parameter gradients requested")))
    }

    /// Gradient of `⟨cotangent, forward(window)⟩` with respect to the window.
    pub fn input_vjp(&self, window: &DMatrix<f64>, cotangent: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_matrix(window)?;
        let g = self.input_vjp_windows(&[window.as_slice()], cotangent.as_slice())?;
        Ok(DMatrix::from_vec(self.n_joints(), self.window_len(), g))
    }

    /// Batched [`RecurrentModel::input_vjp`]. `cotangents` is `B × n` row-major;
    /// the result holds one column-major `n × T` gradient per window.
    pub fn input_vjp_windows(&self, windows: &[&[f64]], cotangents: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_joints();
        if cotangents.len() != windows.len() * n {
            return Err(Error::Shape(format!(
                "{} cotangent entries for {} windows of {n} joints",
                cotangents.len(),
                windows.len()
            )));
        }
        for w in windows {
            self.check_window(w)?;
        }
        let engine = Engine::new(self);
        let mut out = Vec::with_capacity(windows.len() * n * self.window_len());
        for (c, chunk) in windows.chunks(CHUNK).enumerate() {
            let tape = engine.forward(chunk, 1.0, None::<&mut ChaCha8Rng>, false);
            let cot = &cotangents[c * CHUNK * n..(c * CHUNK + chunk.len()) * n];
            let (_, g) = engine.backward(&tape, cot, false, true);
            out.extend_from_slice(&g.expect("input gradients requested"));
        }
        Ok(out)
    }

    /// Per-layer hidden states over the whole window, `hidden × T` each, in
    /// time order. Index `[direction][layer]`.
    pub fn hidden_states(&self, window: &DMatrix<f64>) -> Result<Vec<Vec<DMatrix<f64>>>> {
        self.check_matrix(window)?;
        let engine = Engine::new(self);
        let tape = engine.forward(&[window.as_slice()], 1.0, None::<&mut ChaCha8Rng>, true);
        let h = self.topology.hidden_size;
        let t_len = self.window_len();
        let mut out = vec![Vec::new(); self.topology.n_directions()];
        for layer in &tape.dirs {
            for (d, dt) in layer.iter().enumerate() {
                let mut m = DMatrix::zeros(h, t_len);
                for (s, &t) in dt.order.iter().enumerate() {
                    for i in 0..h {
                        m[(i, t)] = dt.hs[(s + 1) * h + i];
                    }
                }
                out[d].push(m);
            }
        }
        Ok(out)
    }

    /// Bidirectional model with the two stacks exchanged, so that feeding it the
    /// time-reversed window reproduces this model's prediction.
    pub fn mirrored(&self) -> Result<Self> {
        if self.direction() != Direction::Bidirectional {
            return Err(Error::Config("only bidirectional models can be mirrored".into()));
        }
        let h = self.topology.hidden_size;
        let swap_halves = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            out.columns_mut(0, h).copy_from(&m.columns(h, h));
            out.columns_mut(h, h).copy_from(&m.columns(0, h));
            out
        };
        let mut out = self.clone();
        std::mem::swap(&mut out.params.forward, &mut out.params.backward);
        for layer in out
            .params
            .forward
            .iter_mut()
            .skip(1)
            .chain(out.params.backward.iter_mut().skip(1))
        {
            layer.w_z = swap_halves(&layer.w_z);
            layer.w_r = swap_halves(&layer.w_r);
            layer.w_h = swap_halves(&layer.w_h);
        }
        out.params.readout_w = swap_halves(&self.params.readout_w);
        Ok(out)
    }

    fn anchor_into(&self, window: &[f64], out: &mut [f64]) {
        let n = self.n_joints();
        out.fill(0.0);
        if !self.topology.residual {
            return;
        }
        let cols = self.topology.anchor_columns();
        let w = 1.0 / cols.len() as f64;
        for &c in &cols {
            for i in 0..n {
                out[i] += w * window[c * n + i];
            }
        }
    }

    /// Anchor sample for a window (zeros for non-residual models).
    pub fn anchor(&self, window: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_joints()];
        self.anchor_into(window, &mut out);
        out
    }

    /// Sets input normalization to per-joint mean/std of every window entry and
    /// output normalization to mean/std of the (anchor-relative) targets.
    pub fn fit_normalization(&mut self, source: &dyn SampleSource, max_samples: usize) -> Result<()> {
        if source.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let n = self.n_joints();
        let stride = source.len().div_ceil(max_samples.max(1)).max(1);
        let mut in_sum = vec![0.0; n];
        let mut in_sq = vec![0.0; n];
        let mut out_sum = vec![0.0; n];
        let mut out_sq = vec![0.0; n];
        let mut in_count = 0usize;
        let mut out_count = 0usize;
        let mut anchor = vec![0.0; n];
        for idx in (0..source.len()).step_by(stride) {
            let w = source.window(idx);
            self.check_window(w)?;
            for col in w.chunks_exact(n) {
                for i in 0..n {
                    in_sum[i] += col[i];
                    in_sq[i] += col[i] * col[i];
                }
                in_count += 1;
            }
            self.anchor_into(w, &mut anchor);
            let t = source.target(idx);
            for i in 0..n {
                let r = t[i] - anchor[i];
                out_sum[i] += r;
                out_sq[i] += r * r;
            }
            out_count += 1;
        }
        let stats = |sum: &[f64], sq: &[f64], count: usize| -> (DVector<f64>, DVector<f64>) {
            let c = count as f64;
            let mean = DVector::from_fn(n, |i, _| sum[i] / c);
            let std = DVector::from_fn(n, |i, _| ((sq[i] / c - mean[i] * mean[i]).max(0.0)).sqrt().max(1e-3));
            (mean, std)
        };
        let (im, is) = stats(&in_sum, &in_sq, in_count);
        let (om, os) = stats(&out_sum, &out_sq, out_count);
        self.norm = Normalization {
            input_offset: im,
            input_scale: is,
            output_offset: om,
            output_scale: os,
        };
        Ok(())
    }
}

/// Weights of one layer rearranged for the batched kernels. Gate blocks are
/// stacked `[z; r; h]`.
struct PackedLayer {
    input: usize,
    /// `3H × I`
    w: Vec<f64>,
    /// `I × 3H`
    wt: Vec<f64>,
    /// `2H × H`
    uzr: Vec<f64>,
    /// `H × 2H`
    uzr_t: Vec<f64>,
    /// `H × H`
    uh: Vec<f64>,
    uh_t: Vec<f64>,
    /// `3H`
    b: Vec<f64>,
}

impl PackedLayer {
    fn new(p: &GruLayerParams) -> Self {
        let h = p.hidden_size();
        let i_dim = p.input_size();
        let g = 3 * h;
        let mut w = vec![0.0; g * i_dim];
        let mut wt = vec![0.0; i_dim * g];
        for (gi, m) in [&p.w_z, &p.w_r, &p.w_h].iter().enumerate() {
            for r in 0..h {
                for c in 0..i_dim {
                    w[(gi * h + r) * i_dim + c] = m[(r, c)];
                    wt[c * g + gi * h + r] = m[(r, c)];
                }
            }
        }
        let mut uzr = vec![0.0; 2 * h * h];
        let mut uzr_t = vec![0.0; h * 2 * h];
        for (gi, m) in [&p.u_z, &p.u_r].iter().enumerate() {
            for r in 0..h {
                for c in 0..h {
                    uzr[(gi * h + r) * h + c] = m[(r, c)];
                    uzr_t[c * 2 * h + gi * h + r] = m[(r, c)];
                }
            }
        }
        let mut uh = vec![0.0; h * h];
        let mut uh_t = vec![0.0; h * h];
        for r in 0..h {
            for c in 0..h {
                uh[r * h + c] = p.u_h[(r, c)];
                uh_t[c * h + r] = p.u_h[(r, c)];
            }
        }
        let b = p.b_z.iter().chain(p.b_r.iter()).chain(p.b_h.iter()).copied().collect();
        Self {
            input: i_dim,
            w,
            wt,
            uzr,
            uzr_t,
            uh,
            uh_t,
            b,
        }
    }
}

struct DirTape {
    /// Time indices in processing order.
    order: Vec<usize>,
    /// `(steps + 1) × B × H`, entry 0 the zero initial state.
    hs: Vec<f64>,
    /// `steps × B × 3H` activations `[z, r, h̃]`.
    gates: Vec<f64>,
    /// `steps × B × H`, `r ∘ h_prev`.
    rh: Vec<f64>,
}

struct Tape {
    batch: usize,
    /// Per layer input, `T × B × I_l` (layer 0 normalized windows, later layers
    /// the dropped-out outputs below).
    inputs: Vec<Vec<f64>>,
    /// Per layer output mask `T × B × DH` (entries 0 or 1/keep).
    masks: Vec<Option<Vec<f64>>>,
    dirs: Vec<Vec<DirTape>>,
    /// `B × R` readout features after dropout.
    features: Vec<f64>,
    /// `B × n`
    preds: Vec<f64>,
}

struct Engine<'a> {
    model: &'a RecurrentModel,
    packed: Vec<Vec<PackedLayer>>,
}

impl<'a> Engine<'a> {
    fn new(model: &'a RecurrentModel) -> Self {
        let packed = [&model.params.forward, &model.params.backward]
            .iter()
            .take(model.topology.n_directions())
            .map(|stack| stack.iter().map(PackedLayer::new).collect())
            .collect();
        Self { model, packed }
    }

    fn forward<R: Rng>(&self, windows: &[&[f64]], keep: f64, mut rng: Option<&mut R>, full: bool) -> Tape {
        let topo = &self.model.topology;
        let norm = &self.model.norm;
        let (n, t_len, h) = (topo.n_joints, topo.window_len, topo.hidden_size);
        let n_dir = topo.n_directions();
        let dh = n_dir * h;
        let b = windows.len();

        let mut x0 = vec![0.0; t_len * b * n];
        for (bi, w) in windows.iter().enumerate() {
            for t in 0..t_len {
                for i in 0..n {
                    x0[(t * b + bi) * n + i] = (w[t * n + i] - norm.input_offset[i]) / norm.input_scale[i];
                }
            }
        }
        let mut inputs = vec![x0];
        let mut masks = Vec::with_capacity(topo.depth);
        let mut dirs = Vec::with_capacity(topo.depth);
        let mut top = Vec::new();
        for l in 0..topo.depth {
            let i_dim = topo.layer_input(l);
            let mut out = vec![0.0; t_len * b * dh];
            let mut layer_tapes = Vec::with_capacity(n_dir);
            for d in 0..n_dir {
                let steps = if l + 1 == topo.depth && !full {
                    match d {
                        0 => topo.readout_time(0) + 1,
                        _ => t_len - topo.readout_time(1),
                    }
                } else {
                    t_len
                };
                let order: Vec<usize> = if d == 0 {
                    (0..steps).collect()
                } else {
                    (t_len - steps..t_len).rev().collect()
                };
                let tape = run_direction(&self.packed[d][l], &inputs[l], b, i_dim, h, order, topo.cell);
                for (s, &t) in tape.order.iter().enumerate() {
                    for bi in 0..b {
                        let src = &tape.hs[((s + 1) * b + bi) * h..((s + 1) * b + bi + 1) * h];
                        let dst = (t * b + bi) * dh + d * h;
                        out[dst..dst + h].copy_from_slice(src);
                    }
                }
                layer_tapes.push(tape);
            }
            let mask = match rng.as_deref_mut() {
                Some(rng) if keep < 1.0 => {
                    let scale = 1.0 / keep;
                    let m: Vec<f64> = (0..out.len())
                        .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                        .collect();
                    for (o, mv) in out.iter_mut().zip(&m) {
                        *o *= mv;
                    }
                    Some(m)
                }
                _ => None,
            };
            masks.push(mask);
            dirs.push(layer_tapes);
            if l + 1 < topo.depth {
                inputs.push(out);
            } else {
                top = out;
            }
        }

        let r = topo.readout_input();
        let mut features = vec![0.0; b * r];
        for bi in 0..b {
            for d in 0..n_dir {
                let t = topo.readout_time(d);
                let src = (t * b + bi) * dh + d * h;
                features[bi * r + d * h..bi * r + (d + 1) * h].copy_from_slice(&top[src..src + h]);
            }
        }
        let w = &self.model.params.readout_w;
        let mut preds = vec![0.0; b * n];
        let mut anchors = vec![0.0; b * n];
        for (bi, win) in windows.iter().enumerate() {
            self.model.anchor_into(win, &mut anchors[bi * n..(bi + 1) * n]);
            let f = &features[bi * r..(bi + 1) * r];
            for j in 0..n {
                let mut y = self.model.params.readout_b[j];
                for (k, fv) in f.iter().enumerate() {
                    y += w[(j, k)] * fv;
                }
                preds[bi * n + j] = anchors[bi * n + j] + norm.output_offset[j] + norm.output_scale[j] * y;
            }
        }
        Tape {
            batch: b,
            inputs,
            masks,
            dirs,
            features,
            preds,
        }
    }

    fn backward(
        &self,
        tape: &Tape,
        d_pred: &[f64],
        want_params: bool,
        want_input: bool,
    ) -> (Option<Params>, Option<Vec<f64>>) {
        let model = self.model;
        let topo = &model.topology;
        let (n, t_len, h) = (topo.n_joints, topo.window_len, topo.hidden_size);
        let n_dir = topo.n_directions();
        let dh = n_dir * h;
        let r = topo.readout_input();
        let b = tape.batch;
        let g = 3 * h;

        let mut grads = want_params.then(|| model.params.zeros_like());
        let w = &model.params.readout_w;
        let mut d_top = vec![0.0; t_len * b * dh];
        for bi in 0..b {
            let f = &tape.features[bi * r..(bi + 1) * r];
            let mut df = vec![0.0; r];
            for j in 0..n {
                let dy = model.norm.output_scale[j] * d_pred[bi * n + j];
                if dy == 0.0 {
                    continue;
                }
                if let Some(gr) = grads.as_mut() {
                    gr.readout_b[j] += dy;
                    for (k, fv) in f.iter().enumerate() {
                        gr.readout_w[(j, k)] += dy * fv;
                    }
                }
                for (k, dfk) in df.iter_mut().enumerate() {
                    *dfk += w[(j, k)] * dy;
                }
            }
            for d in 0..n_dir {
                let t = topo.readout_time(d);
                let dst = (t * b + bi) * dh + d * h;
                d_top[dst..dst + h].copy_from_slice(&df[d * h..(d + 1) * h]);
            }
        }
        if let Some(m) = &tape.masks[topo.depth - 1] {
            for (v, mv) in d_top.iter_mut().zip(m) {
                *v *= mv;
            }
        }

        let mut d_x0 = None;
        for l in (0..topo.depth).rev() {
            let i_dim = topo.layer_input(l);
            let need_input_grad = l > 0 || want_input;
            let mut d_in = if need_input_grad {
                vec![0.0; t_len * b * i_dim]
            } else {
                Vec::new()
            };
            let x = &tape.inputs[l];
            for d in 0..n_dir {
                let dt = &tape.dirs[l][d];
                let packed = &self.packed[d][l];
                let steps = dt.order.len();
                let mut d_out = vec![0.0; steps * b * h];
                for (s, &t) in dt.order.iter().enumerate() {
                    for bi in 0..b {
                        let src = (t * b + bi) * dh + d * h;
                        d_out[(s * b + bi) * h..(s * b + bi + 1) * h].copy_from_slice(&d_top[src..src + h]);
                    }
                }
                let d_gates = bptt_direction(packed, dt, &d_out, b, h, topo.cell);
                if need_input_grad {
                    for (s, &t) in dt.order.iter().enumerate() {
                        gemm(
                            &mut d_in[t * b * i_dim..],
                            i_dim,
                            &d_gates[s * b * g..],
                            g,
                            &packed.w,
                            i_dim,
                            b,
                            g,
                            i_dim,
                        );
                    }
                }
                if let Some(gr) = grads.as_mut() {
                    let mut dw = vec![0.0; g * i_dim];
                    let mut duzr = vec![0.0; 2 * h * h];
                    let mut duh = vec![0.0; h * h];
                    let mut db = vec![0.0; g];
                    for (s, &t) in dt.order.iter().enumerate() {
                        let dg = &d_gates[s * b * g..(s + 1) * b * g];
                        gemm_tn(&mut dw, i_dim, dg, g, &x[t * b * i_dim..], i_dim, b, g, i_dim);
                        let hprev = &dt.hs[s * b * h..(s + 1) * b * h];
                        gemm_tn(&mut duzr, h, dg, g, hprev, h, b, 2 * h, h);
                        let rh = &dt.rh[s * b * h..(s + 1) * b * h];
                        gemm_tn(&mut duh, h, &dg[2 * h..], g, rh, h, b, h, h);
                        for row in dg.chunks_exact(g) {
                            for (dbv, v) in db.iter_mut().zip(row) {
                                *dbv += v;
                            }
                        }
                    }
                    let lp = if d == 0 { &mut gr.forward[l] } else { &mut gr.backward[l] };
                    for (gi, m) in [&mut lp.w_z, &mut lp.w_r, &mut lp.w_h].into_iter().enumerate() {
                        for rr in 0..h {
                            for c in 0..i_dim {
                                m[(rr, c)] += dw[(gi * h + rr) * i_dim + c];
                            }
                        }
                    }
                    for (gi, m) in [&mut lp.u_z, &mut lp.u_r].into_iter().enumerate() {
                        for rr in 0..h {
                            for c in 0..h {
                                m[(rr, c)] += duzr[(gi * h + rr) * h + c];
                            }
                        }
                    }
                    for rr in 0..h {
                        for c in 0..h {
                            lp.u_h[(rr, c)] += duh[rr * h + c];
                        }
                    }
                    for (gi, v) in [&mut lp.b_z, &mut lp.b_r, &mut lp.b_h].into_iter().enumerate() {
                        for rr in 0..h {
                            v[rr] += db[gi * h + rr];
                        }
                    }
                }
            }
            if l > 0 {
                if let Some(m) = &tape.masks[l - 1] {
                    for (v, mv) in d_in.iter_mut().zip(m) {
                        *v *= mv;
                    }
                }
                d_top = d_in;
            } else if want_input {
                d_x0 = Some(d_in);
            }
        }

        let input_grad = d_x0.map(|dx| {
            let norm = &model.norm;
            let mut out = vec![0.0; b * n * t_len];
            for bi in 0..b {
                let o = &mut out[bi * n * t_len..(bi + 1) * n * t_len];
                for t in 0..t_len {
                    for i in 0..n {
                        o[t * n + i] = dx[(t * b + bi) * n + i] / norm.input_scale[i];
                    }
                }
                if topo.residual {
                    let cols = topo.anchor_columns();
                    let wgt = 1.0 / cols.len() as f64;
                    for &c in &cols {
                        for i in 0..n {
                            o[c * n + i] += wgt * d_pred[bi * n + i];
                        }
                    }
                }
            }
            out
        });
        (grads, input_grad)
    }
}

fn run_direction(
    p: &PackedLayer,
    x: &[f64],
    b: usize,
    i_dim: usize,
    h: usize,
    order: Vec<usize>,
    cell: CellKind,
) -> DirTape {
    debug_assert_eq!(p.input, i_dim);
    let steps = order.len();
    let g = 3 * h;
    let mut gates = vec![0.0; steps * b * g];
    for (s, &t) in order.iter().enumerate() {
        let gs = &mut gates[s * b * g..(s + 1) * b * g];
        for row in gs.chunks_exact_mut(g) {
            row.copy_from_slice(&p.b);
        }
        gemm(gs, g, &x[t * b * i_dim..], i_dim, &p.wt, g, b, i_dim, g);
    }
    let mut hs = vec![0.0; (steps + 1) * b * h];
    let mut rh = vec![0.0; steps * b * h];
    let mut hu = vec![0.0; b * 2 * h];
    let mut cu = vec![0.0; b * h];
    for s in 0..steps {
        let (done, rest) = hs.split_at_mut((s + 1) * b * h);
        let hprev = &done[s * b * h..];
        let hnext = &mut rest[..b * h];
        let gs = &mut gates[s * b * g..(s + 1) * b * g];
        let rhs = &mut rh[s * b * h..(s + 1) * b * h];
        match cell {
            CellKind::Gru => {
                hu.fill(0.0);
                gemm(&mut hu, 2 * h, hprev, h, &p.uzr_t, 2 * h, b, h, 2 * h);
                for bi in 0..b {
                    for i in 0..h {
                        let z = sigmoid(gs[bi * g + i] + hu[bi * 2 * h + i]);
                        let r = sigmoid(gs[bi * g + h + i] + hu[bi * 2 * h + h + i]);
                        gs[bi * g + i] = z;
                        gs[bi * g + h + i] = r;
                        rhs[bi * h + i] = r * hprev[bi * h + i];
                    }
                }
                cu.fill(0.0);
                gemm(&mut cu, h, rhs, h, &p.uh_t, h, b, h, h);
                for bi in 0..b {
                    for i in 0..h {
                        let c = (gs[bi * g + 2 * h + i] + cu[bi * h + i]).tanh();
                        gs[bi * g + 2 * h + i] = c;
                        let z = gs[bi * g + i];
                        hnext[bi * h + i] = (1.0 - z) * hprev[bi * h + i] + z * c;
                    }
                }
            }
            CellKind::Linear => {
                rhs.copy_from_slice(hprev);
                cu.fill(0.0);
                gemm(&mut cu, h, hprev, h, &p.uh_t, h, b, h, h);
                for bi in 0..b {
                    for i in 0..h {
                        let c = gs[bi * g + 2 * h + i] + cu[bi * h + i];
                        gs[bi * g + i] = 1.0;
                        gs[bi * g + h + i] = 1.0;
                        gs[bi * g + 2 * h + i] = c;
                        hnext[bi * h + i] = c;
                    }
                }
            }
        }
    }
    DirTape { order, hs, gates, rh }
}

/// Backpropagation through time for one direction of one layer. `d_out` is
/// the gradient arriving at each step's output (processing order); returns
/// gradients of the gate pre-activations, `steps × B × 3H`.
fn bptt_direction(p: &PackedLayer, tape: &DirTape, d_out: &[f64], b: usize, h: usize, cell: CellKind) -> Vec<f64> {
    let steps = tape.order.len();
    let g = 3 * h;
    let mut d_gates = vec![0.0; steps * b * g];
    let mut dh = vec![0.0; b * h];
    let mut dh_prev = vec![0.0; b * h];
    let mut d_rh = vec![0.0; b * h];
    for s in (0..steps).rev() {
        for (v, o) in dh.iter_mut().zip(&d_out[s * b * h..(s + 1) * b * h]) {
            *v += o;
        }
        let hprev = &tape.hs[s * b * h..(s + 1) * b * h];
        let gs = &tape.gates[s * b * g..(s + 1) * b * g];
        let da = &mut d_gates[s * b * g..(s + 1) * b * g];
        dh_prev.fill(0.0);
        match cell {
            CellKind::Gru => {
                for bi in 0..b {
                    for i in 0..h {
                        let d = dh[bi * h + i];
                        let z = gs[bi * g + i];
                        let c = gs[bi * g + 2 * h + i];
                        let hp = hprev[bi * h + i];
                        da[bi * g + i] = d * (c - hp) * z * (1.0 - z);
                        da[bi * g + 2 * h + i] = d * z * (1.0 - c * c);
                        dh_prev[bi * h + i] = d * (1.0 - z);
                    }
                }
                d_rh.fill(0.0);
                gemm(&mut d_rh, h, &da[2 * h..], g, &p.uh, h, b, h, h);
                for bi in 0..b {
                    for i in 0..h {
                        let r = gs[bi * g + h + i];
                        let hp = hprev[bi * h + i];
                        let drh = d_rh[bi * h + i];
                        da[bi * g + h + i] = drh * hp * r * (1.0 - r);
                        dh_prev[bi * h + i] += drh * r;
                    }
                }
                gemm(&mut dh_prev, h, da, g, &p.uzr, h, b, 2 * h, h);
            }
            CellKind::Linear => {
                for bi in 0..b {
                    for i in 0..h {
                        da[bi * g + 2 * h + i] = dh[bi * h + i];
                    }
                }
                gemm(&mut dh_prev, h, &da[2 * h..], g, &p.uh, h, b, h, h);
            }
        }
        std::mem::swap(&mut dh, &mut dh_prev);
    }
    d_gates
}
