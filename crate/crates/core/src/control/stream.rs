use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::neural::{Direction, RecurrentModel};
use crate::trajectory::{JointVector, Trajectory};

fn check_bidirectional(model: &RecurrentModel) -> Result<()> {
    if model.direction() != Direction::Bidirectional {
        return Err(Error::Config("streaming compensation needs a bidirectional model".into()));
    }
    Ok(())
}

/// Lookahead buffer for the centred-window compensator.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    window_len: usize,
    n_joints: usize,
    buffer: VecDeque<JointVector>,
    arrivals: usize,
    emitted: usize,
}

/// Compensated sample for reference index `index`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub index: usize,
    pub q_f: JointVector,
}

impl StreamState {
    pub fn new(model: &RecurrentModel) -> Result<Self> {
        check_bidirectional(model)?;
        Ok(Self {
            window_len: model.window_len(),
            n_joints: model.n_joints(),
            buffer: VecDeque::with_capacity(model.window_len()),
            arrivals: 0,
            emitted: 0,
        })
    }

    pub fn arrivals(&self) -> usize {
        self.arrivals
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn is_primed(&self) -> bool {
        self.buffer.len() == self.window_len
    }

    /// Samples between a reference sample arriving and its compensated value
    /// being emitted.
    pub fn latency(&self) -> usize {
        self.window_len / 2 - 1
    }

    pub fn reset(&mut self) {
        self.buffer.clear();
        self.arrivals = 0;
        self.emitted = 0;
    }
}

/// Buffers one reference sample; once `T` are held, emits the compensated
/// value for index `arrivals − T/2`.
pub fn stream_push(state: &mut StreamState, model: &RecurrentModel, q_d: &JointVector) -> Result<Option<StreamOutput>> {
    check_bidirectional(model)?;
    if model.window_len() != state.window_len || model.n_joints() != state.n_joints {
        return Err(Error::Shape("model does not match the stream it was created for".into()));
    }
    if q_d.len() != state.n_joints {
        return Err(Error::Shape(format!("sample has {} joints, expected {}", q_d.len(), state.n_joints)));
    }
    if q_d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("stream sample"));
    }
    if state.buffer.len() == state.window_len {
        state.buffer.pop_front();
    }
    state.buffer.push_back(q_d.clone());
    state.arrivals += 1;
    if !state.is_primed() {
        return Ok(None);
    }
    let mut window = Vec::with_capacity(state.window_len * state.n_joints);
    for s in &state.buffer {
        window.extend_from_slice(s.as_slice());
    }
    let pred = model.predict_windows(&[&window])?;
    state.emitted += 1;
    Ok(Some(StreamOutput {
        index: state.arrivals - state.window_len / 2,
        q_f: JointVector::from_vec(pred),
    }))
}

/// Offline compensation: indices `T/2 ..= N − T/2` come from the model, the
/// rest are copied from `q_d`.
pub fn filter_trajectory(model: &RecurrentModel, q_d: &Trajectory) -> Result<Trajectory> {
    check_bidirectional(model)?;
    if model.n_joints() != q_d.n_joints() {
        return Err(Error::Shape(format!(
            "model has {} joints, trajectory has {}",
            model.n_joints(),
            q_d.n_joints()
        )));
    }
    let t = model.window_len();
    if q_d.len() < t {
        return Err(Error::TooShort {
            len: q_d.len(),
            need: t,
        });
    }
    let count = q_d.len() - t + 1;
    let windows: Vec<&[f64]> = (0..count).map(|s| q_d.window_slice(s, t)).collect();
    let preds = model.predict_windows(&windows)?;
    let mut data = q_d.data().clone();
    data.columns_mut(t / 2, count)
        .copy_from(&DMatrix::from_vec(q_d.n_joints(), count, preds));
    q_d.with_data(data)
}
