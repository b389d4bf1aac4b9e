use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of one GRU layer in one direction.
///
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r∘h) + b_h)`, `h' = (1 − z)∘h + z∘h̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruLayerParams {
    pub w_z: DMatrix<f64>,
    pub w_r: DMatrix<f64>,
    pub w_h: DMatrix<f64>,
    pub u_z: DMatrix<f64>,
    pub u_r: DMatrix<f64>,
    pub u_h: DMatrix<f64>,
    pub b_z: DVector<f64>,
    pub b_r: DVector<f64>,
    pub b_h: DVector<f64>,
}

pub(crate) const LAYER_ARRAY_NAMES: [&str; 9] =
    ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

impl GruLayerParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_z: DMatrix::zeros(hidden, input),
            w_r: DMatrix::zeros(hidden, input),
            w_h: DMatrix::zeros(hidden, input),
            u_z: DMatrix::zeros(hidden, hidden),
            u_r: DMatrix::zeros(hidden, hidden),
            u_h: DMatrix::zeros(hidden, hidden),
            b_z: DVector::zeros(hidden),
            b_r: DVector::zeros(hidden),
            b_h: DVector::zeros(hidden),
        }
    }

    /// Uniform(±1/√fan_in) with fan_in the column count; biases use the
    /// recurrent bound.
    pub fn random(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let sw = 1.0 / (input as f64).sqrt();
        let su = 1.0 / (hidden as f64).sqrt();
        let mut m = |r: usize, c: usize, s: f64| DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s));
        Self {
            w_z: m(hidden, input, sw),
            w_r: m(hidden, input, sw),
            w_h: m(hidden, input, sw),
            u_z: m(hidden, hidden, su),
            u_r: m(hidden, hidden, su),
            u_h: m(hidden, hidden, su),
            b_z: m(hidden, 1, su).column(0).into_owned(),
            b_r: m(hidden, 1, su).column(0).into_owned(),
            b_h: m(hidden, 1, su).column(0).into_owned(),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_z.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.u_z.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.hidden_size(), self.input_size());
        let ok = [&self.w_z, &self.w_r, &self.w_h].iter().all(|m| m.shape() == (h, i))
            && [&self.u_z, &self.u_r, &self.u_h].iter().all(|m| m.shape() == (h, h))
            && [&self.b_z, &self.b_r, &self.b_h].iter().all(|b| b.len() == h);
        if !ok {
            return Err(Error::Shape("inconsistent GRU layer shapes".into()));
        }
        if self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("GRU parameters"));
        }
        Ok(())
    }

    pub(crate) fn shapes(&self) -> [(usize, usize); 9] {
        let (h, i) = (self.hidden_size(), self.input_size());
        [(h, i), (h, i), (h, i), (h, h), (h, h), (h, h), (h, 1), (h, 1), (h, 1)]
    }

    pub(crate) fn slices(&self) -> [&[f64]; 9] {
        [
            self.w_z.as_slice(),
            self.w_r.as_slice(),
            self.w_h.as_slice(),
            self.u_z.as_slice(),
            self.u_r.as_slice(),
            self.u_h.as_slice(),
            self.b_z.as_slice(),
            self.b_r.as_slice(),
            self.b_h.as_slice(),
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w_z.as_mut_slice(),
            self.w_r.as_mut_slice(),
            self.w_h.as_mut_slice(),
            self.u_z.as_mut_slice(),
            self.u_r.as_mut_slice(),
            self.u_h.as_mut_slice(),
            self.b_z.as_mut_slice(),
            self.b_r.as_mut_slice(),
            self.b_h.as_mut_slice(),
        ]
    }
}

/// Single GRU step for one sample.
pub fn gru_cell_forward(p: &GruLayerParams, x: &DVector<f64>, h: &DVector<f64>) -> Result<DVector<f64>> {
    p.validate()?;
    if x.len() != p.input_size() || h.len() != p.hidden_size() {
        return Err(Error::Shape(format!(
            "GRU cell expects x[{}], h[{}]; got x[{}], h[{}]",
            p.input_size(),
            p.hidden_size(),
            x.len(),
            h.len()
        )));
    }
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let z = (&p.w_z * x + &p.u_z * h + &p.b_z).map(sig);
    let r = (&p.w_r * x + &p.u_r * h + &p.b_r).map(sig);
    let cand = (&p.w_h * x + &p.u_h * r.component_mul(h) + &p.b_h).map(f64::tanh);
    Ok(h + z.component_mul(&(cand - h)))
}

/// Every trainable array of a model. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub forward: Vec<GruLayerParams>,
    /// Empty for unidirectional models.
    pub backward: Vec<GruLayerParams>,
    pub readout_w: DMatrix<f64>,
    pub readout_b: DVector<f64>,
}

impl Params {
    pub fn zeros_like(&self) -> Self {
        let z = |l: &GruLayerParams| GruLayerParams::zeros(l.input_size(), l.hidden_size());
        Self {
            forward: self.forward.iter().map(z).collect(),
            backward: self.backward.iter().map(z).collect(),
            readout_w: DMatrix::zeros(self.readout_w.nrows(), self.readout_w.ncols()),
            readout_b: DVector::zeros(self.readout_b.len()),
        }
    }

    /// `(name, rows, cols)` for every array, in flattening order.
    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (dir, layers) in [("fwd", &self.forward), ("bwd", &self.backward)] {
            for (l, layer) in layers.iter().enumerate() {
                for (name, (r, c)) in LAYER_ARRAY_NAMES.iter().zip(layer.shapes()) {
                    out.push((format!("{dir}.{l}.{name}"), r, c));
                }
            }
        }
        out.push(("readout.w".into(), self.readout_w.nrows(), self.readout_w.ncols()));
        out.push(("readout.b".into(), self.readout_b.len(), 1));
        out
    }

    /// Column-major slices in [`Params::layout`] order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in self.forward.iter().chain(&self.backward) {
            out.extend(layer.slices());
        }
        out.push(self.readout_w.as_slice());
        out.push(self.readout_b.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in self.forward.iter_mut().chain(self.backward.iter_mut()) {
            out.extend(layer.slices_mut());
        }
        out.push(self.readout_w.as_mut_slice());
        out.push(self.readout_b.as_mut_slice());
        out
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut off = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Serializable shape summary used in errors and checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: [usize; 2],
}
