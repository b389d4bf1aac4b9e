use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Spectral-radius bound on `coupling - I` above which a config is rejected.
pub const COUPLING_STABILITY_BOUND: f64 = 0.5;

/// One revolute joint of the serial chain: a fixed offset from the parent
/// frame followed by a rotation about `axis` (expressed in the offset frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFrame {
    pub axis: [f64; 3],
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicParams {
    pub joints: Vec<JointFrame>,
    /// Tool-point offset in the last joint frame.
    pub tool: [f64; 3],
}

impl KinematicParams {
    /// Approximation of a Baxter left arm (shoulder yaw, pitch/roll alternation).
    pub fn baxter_like() -> Self {
        let j = |axis: [f64; 3], offset: [f64; 3]| JointFrame { axis, offset };
        Self {
            joints: vec![
                j([0.0, 0.0, 1.0], [0.0, 0.0, 0.0]),
                j([0.0, 1.0, 0.0], [0.069, 0.0, 0.27035]),
                j([1.0, 0.0, 0.0], [0.102, 0.0, 0.0]),
                j([0.0, 1.0, 0.0], [0.26242, 0.0, -0.069]),
                j([1.0, 0.0, 0.0], [0.10359, 0.0, 0.0]),
                j([0.0, 1.0, 0.0], [0.27086, 0.0, -0.01]),
                j([1.0, 0.0, 0.0], [0.115975, 0.0, 0.0]),
            ],
            tool: [0.13, 0.0, 0.0],
        }
    }

    /// Planar chain in the x-y plane with all axes along z.
    pub fn planar(link_lengths: &[f64]) -> Self {
        let mut joints = Vec::with_capacity(link_lengths.len());
        let mut prev = 0.0;
        for &l in link_lengths {
            joints.push(JointFrame {
                axis: [0.0, 0.0, 1.0],
                offset: [prev, 0.0, 0.0],
            });
            prev = l;
        }
        Self {
            joints,
            tool: [prev, 0.0, 0.0],
        }
    }
}

/// Parameters of the simulated flexible-joint arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub n_joints: usize,
    pub dt: f64,
    pub motor_inertia: Vec<f64>,
    pub link_inertia: Vec<f64>,
    pub spring_stiffness: Vec<f64>,
    pub spring_damping: Vec<f64>,
    pub servo_kp: Vec<f64>,
    pub servo_kd: Vec<f64>,
    /// Symmetric, unit diagonal. Row-major rows.
    pub coupling: Vec<Vec<f64>>,
    pub gravity_gain: Vec<f64>,
    pub delay_steps: usize,
    pub joint_limits: Vec<[f64; 2]>,
    pub kinematic_params: KinematicParams,
    /// Integration substeps per sample (the motor loop is stiff at dt = 10 ms).
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    20
}

pub const BAXTER_LIKE_LIMITS: [f64; 7] = [1.7, 2.1, 3.0, 2.6, 3.0, 2.0, 3.0];

impl Default for PlantConfig {
    fn default() -> Self {
        let n = 7;
        Self {
            n_joints: n,
            dt: 0.01,
            motor_inertia: vec![0.01; n],
            link_inertia: vec![0.1; n],
            spring_stiffness: vec![50.0; n],
            spring_damping: vec![1.0; n],
            servo_kp: vec![100.0; n],
            servo_kd: vec![10.0; n],
            coupling: chain_coupling(n, 0.05),
            gravity_gain: vec![0.5; n],
            delay_steps: 2,
            joint_limits: BAXTER_LIKE_LIMITS.iter().map(|&l| [-l, l]).collect(),
            kinematic_params: KinematicParams::baxter_like(),
            substeps: default_substeps(),
        }
    }
}

/// Unit diagonal with `off` between adjacent joints.
pub fn chain_coupling(n: usize, off: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        1.0
                    } else if i.abs_diff(j) == 1 {
                        off
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

impl PlantConfig {
    /// Default physical parameters for an arbitrary joint count; limits are ±π and
    /// kinematics a planar chain of 0.3 m links.
    pub fn uniform(n: usize) -> Self {
        let base = Self::default();
        Self {
            n_joints: n,
            motor_inertia: vec![base.motor_inertia[0]; n],
            link_inertia: vec![base.link_inertia[0]; n],
            spring_stiffness: vec![base.spring_stiffness[0]; n],
            spring_damping: vec![base.spring_damping[0]; n],
            servo_kp: vec![base.servo_kp[0]; n],
            servo_kd: vec![base.servo_kd[0]; n],
            coupling: chain_coupling(n, 0.05),
            gravity_gain: vec![base.gravity_gain[0]; n],
            joint_limits: vec![[-std::f64::consts::PI, std::f64::consts::PI]; n],
            kinematic_params: KinematicParams::planar(&vec![0.3; n]),
            ..base
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plant config is always representable as TOML")
    }

    pub fn sample_rate(&self) -> f64 {
        1.0 / self.dt
    }

    pub fn coupling_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_joints, self.n_joints, |i, j| self.coupling[i][j])
    }

    pub fn lower_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_joints, self.joint_limits.iter().map(|l| l[0]))
    }

    pub fn upper_limits(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_joints, self.joint_limits.iter().map(|l| l[1]))
    }

    /// Short content hash, used to name configs in errors and dataset headers.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("plant config serializes");
        let digest = Sha256::digest(&canonical);
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_joints;
        if n == 0 {
            return Err(Error::Config("n_joints must be positive".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        let per_joint: [(&str, &Vec<f64>); 7] = [
            ("motor_inertia", &self.motor_inertia),
            ("link_inertia", &self.link_inertia),
            ("spring_stiffness", &self.spring_stiffness),
            ("spring_damping", &self.spring_damping),
            ("servo_kp", &self.servo_kp),
            ("servo_kd", &self.servo_kd),
            ("gravity_gain", &self.gravity_gain),
        ];
        for (name, v) in per_joint {
            if v.len() != n {
                return Err(Error::Config(format!("{name} has {} entries, expected {n}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("{name} contains non-finite values")));
            }
        }
        for (name, v) in [
            ("motor_inertia", &self.motor_inertia),
            ("link_inertia", &self.link_inertia),
            ("spring_stiffness", &self.spring_stiffness),
        ] {
            if v.iter().any(|&x| x <= 0.0) {
                return Err(Error::Config(format!("{name} must be positive elementwise")));
            }
        }
        if self.coupling.len() != n || self.coupling.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("coupling must be {n}x{n}")));
        }
        for i in 0..n {
            if self.coupling[i][i] != 1.0 {
                return Err(Error::Config(format!("coupling[{i}][{i}] must be 1")));
            }
            for j in 0..i {
                if self.coupling[i][j] != self.coupling[j][i] {
                    return Err(Error::Config(format!("coupling not symmetric at ({i}, {j})")));
                }
            }
        }
        let off = self.coupling_matrix() - DMatrix::identity(n, n);
        let radius = off
            .symmetric_eigenvalues()
            .iter()
            .fold(0.0f64, |m, e| m.max(e.abs()));
        if radius >= COUPLING_STABILITY_BOUND {
            return Err(Error::Config(format!(
                "coupling spectral radius {radius:.3} exceeds bound {COUPLING_STABILITY_BOUND}"
            )));
        }
        if self.joint_limits.len() != n || self.joint_limits.iter().any(|l| !(l[0] < l[1])) {
            return Err(Error::Config("joint_limits must hold one [lo, hi] pair per joint with lo < hi".into()));
        }
        if self.kinematic_params.joints.len() != n {
            return Err(Error::Config(format!(
                "kinematic_params describes {} joints, expected {n}",
                self.kinematic_params.joints.len()
            )));
        }
        for (i, j) in self.kinematic_params.joints.iter().enumerate() {
            let norm = j.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("joint {i} axis is not a unit vector")));
            }
        }
        Ok(())
    }

    pub fn check_within_limits(&self, q: &DVector<f64>) -> Result<()> {
        if q.len() != self.n_joints {
            return Err(Error::Shape(format!("expected {} joints, got {}", self.n_joints, q.len())));
        }
        for (i, (&v, l)) in q.iter().zip(&self.joint_limits).enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite("joint vector"));
            }
            if v < l[0] || v > l[1] {
                return Err(Error::JointLimit {
                    joint: i,
                    value: v,
                    lo: l[0],
                    hi: l[1],
                });
            }
        }
        Ok(())
    }
}
