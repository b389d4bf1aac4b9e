use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type JointVector = DVector<f64>;

/// Joint-space samples at a fixed rate, stored joints × samples.
///
/// Storage is column-major so every sample (column) is contiguous, which is
/// what the windowing code relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    data: DMatrix<f64>,
    sample_rate: f64,
}

impl Trajectory {
    pub const DEFAULT_RATE: f64 = 100.0;

    pub fn new(data: DMatrix<f64>, sample_rate: f64) -> Result<Self> {
        if data.ncols() == 0 || data.nrows() == 0 {
            return Err(Error::TooShort {
                len: data.ncols(),
                need: 1,
            });
        }
        if !(sample_rate.is_finite() && sample_rate > 0.0) {
            return Err(Error::Config(format!("sample rate {sample_rate} must be positive")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory"));
        }
        Ok(Self { data, sample_rate })
    }

    pub fn from_columns(columns: &[JointVector], sample_rate: f64) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::TooShort { len: 0, need: 1 });
        }
        let n = columns[0].len();
        if columns.iter().any(|c| c.len() != n) {
            return Err(Error::Shape("ragged trajectory columns".into()));
        }
        Self::new(DMatrix::from_columns(columns), sample_rate)
    }

    pub fn constant(q: &JointVector, len: usize, sample_rate: f64) -> Result<Self> {
        let data = DMatrix::from_fn(q.len(), len, |i, _| q[i]);
        Self::new(data, sample_rate)
    }

    pub fn n_joints(&self) -> usize {
        self.data.nrows()
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn column(&self, t: usize) -> DVectorView<'_, f64> {
        self.data.column(t)
    }

    pub fn sample(&self, t: usize) -> JointVector {
        self.data.column(t).into_owned()
    }

    /// Samples `start..start + len` as a contiguous column-major slice.
    pub fn window_slice(&self, start: usize, len: usize) -> &[f64] {
        let n = self.n_joints();
        &self.data.as_slice()[start * n..(start + len) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice()
    }

    /// Same shape and rate with new values; values are checked for finiteness.
    pub fn with_data(&self, data: DMatrix<f64>) -> Result<Self> {
        if data.shape() != self.data.shape() {
            return Err(Error::Shape(format!(
                "expected {:?}, got {:?}",
                self.data.shape(),
                data.shape()
            )));
        }
        Self::new(data, self.sample_rate)
    }

    pub fn same_shape(&self, other: &Trajectory) -> bool {
        self.data.shape() == other.data.shape()
    }

    pub fn require_same_shape(&self, other: &Trajectory, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.data.shape(),
                other.data.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRepr {
    sample_rate: f64,
    n_joints: usize,
    /// Column-major samples, one inner vector per time step.
    samples: Vec<Vec<f64>>,
}

impl Serialize for Trajectory {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let samples = self
            .data
            .column_iter()
            .map(|c| c.iter().copied().collect())
            .collect();
        TrajectoryRepr {
            sample_rate: self.sample_rate,
            n_joints: self.n_joints(),
            samples,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = TrajectoryRepr::deserialize(deserializer)?;
        let cols: Vec<JointVector> = repr
            .samples
            .into_iter()
            .map(DVector::from_vec)
            .collect();
        if cols.iter().any(|c| c.len() != repr.n_joints) {
            return Err(D::Error::custom("sample length does not match n_joints"));
        }
        Trajectory::from_columns(&cols, repr.sample_rate).map_err(D::Error::custom)
    }
}
