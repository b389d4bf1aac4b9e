use nalgebra::{DMatrix, DVector};

use super::TrajectoryPair;
use crate::error::{Error, Result};
use crate::neural::{SampleSource, WindowSample};

/// `N − T` windows `(q_d[t..t+T], q[t+T])`.
pub fn forward_sample_count(n_samples: usize, window: usize) -> Result<usize> {
    if window == 0 || n_samples <= window {
        return Err(Error::TooShort {
            len: n_samples,
            need: window + 1,
        });
    }
    Ok(n_samples - window)
}

/// `N − T + 1` windows `(q[t−T/2..t+T/2], q_d[t])`.
pub fn inverse_sample_count(n_samples: usize, window: usize) -> Result<usize> {
    if window == 0 || window % 2 != 0 {
        return Err(Error::Config(format!("inverse window length {window} must be even and positive")));
    }
    if n_samples < window {
        return Err(Error::TooShort {
            len: n_samples,
            need: window,
        });
    }
    Ok(n_samples - window + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Input `q_d(t..t+T−1)`, target `q(t+T)`.
    Forward,
    /// Input `q(t−T/2..t+T/2−1)`, target `q_d(t)`.
    Inverse,
}

/// Every window of a set of pairs, addressed without copying.
pub struct WindowSet<'a> {
    pairs: &'a [TrajectoryPair],
    kind: WindowKind,
    window: usize,
    /// `(pair index, window start)`
    index: Vec<(usize, usize)>,
}

impl<'a> WindowSet<'a> {
    pub fn new(pairs: &'a [TrajectoryPair], kind: WindowKind, window: usize) -> Result<Self> {
        let mut index = Vec::new();
        for (p, pair) in pairs.iter().enumerate() {
            let count = match kind {
                WindowKind::Forward => forward_sample_count(pair.len(), window)?,
                WindowKind::Inverse => inverse_sample_count(pair.len(), window)?,
            };
            index.extend((0..count).map(|s| (p, s)));
        }
        Ok(Self {
            pairs,
            kind,
            window,
            index,
        })
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    /// `(pair index, window start)` of sample `i`.
    pub fn locate(&self, i: usize) -> (usize, usize) {
        self.index[i]
    }

    /// Source-trajectory time index of the target of sample `i`.
    pub fn target_time(&self, i: usize) -> usize {
        let (_, s) = self.index[i];
        match self.kind {
            WindowKind::Forward => s + self.window,
            WindowKind::Inverse => s + self.window / 2,
        }
    }

    pub fn sample(&self, i: usize) -> WindowSample {
        let pair = &self.pairs[self.index[i].0];
        let n = pair.q_d.n_joints();
        WindowSample {
            input: DMatrix::from_column_slice(n, self.window, self.window(i)),
            target: DVector::from_column_slice(self.target(i)),
        }
    }
}

impl SampleSource for WindowSet<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn window(&self, i: usize) -> &[f64] {
        let (p, s) = self.index[i];
        let pair = &self.pairs[p];
        match self.kind {
            WindowKind::Forward => pair.q_d.window_slice(s, self.window),
            WindowKind::Inverse => pair.q.window_slice(s, self.window),
        }
    }

    fn target(&self, i: usize) -> &[f64] {
        let (p, _) = self.index[i];
        let pair = &self.pairs[p];
        let t = self.target_time(i);
        match self.kind {
            WindowKind::Forward => pair.q.window_slice(t, 1),
            WindowKind::Inverse => pair.q_d.window_slice(t, 1),
        }
    }
}

pub fn make_forward_samples(pair: &TrajectoryPair, window: usize) -> Result<Vec<WindowSample>> {
    let set = WindowSet::new(std::slice::from_ref(pair), WindowKind::Forward, window)?;
    Ok((0..set.len()).map(|i| set.sample(i)).collect())
}

pub fn make_inverse_samples(pair: &TrajectoryPair, window: usize) -> Result<Vec<WindowSample>> {
    let set = WindowSet::new(std::slice::from_ref(pair), WindowKind::Inverse, window)?;
    Ok((0..set.len()).map(|i| set.sample(i)).collect())
}
