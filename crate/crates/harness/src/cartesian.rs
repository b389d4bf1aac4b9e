use flexcomp_core::arm_sim::{KinematicParams, PlantConfig, Pose};
use flexcomp_core::control::{resolved_velocity_solve, QpProblem};
use flexcomp_core::{JointVector, Trajectory};
use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{HarnessError, Result};
use crate::profile::SquareSpec;

/// Maximum tolerated distance between `FK(q_d)` and the ideal square.
pub const SQUARE_POSITION_TOL: f64 = 1e-3;
/// Maximum tolerated end-effector orientation drift along the square.
pub const SQUARE_ORIENTATION_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SquareReference {
    pub q_d: Trajectory,
    /// Ideal end-effector positions, 3 × N.
    pub xyz_ref: DMatrix<f64>,
    pub max_position_error: f64,
    pub max_orientation_error: f64,
}

/// Piecewise-linear square in the x-y plane: a hold at the first corner, then
/// four sides at constant speed. Returns 3 × `len` positions.
pub fn square_path(center: [f64; 2], side: f64, z: f64, hold: usize, sides: usize) -> DMatrix<f64> {
    let h = side / 2.0;
    let corners = [
        [center[0] - h, center[1] - h],
        [center[0] + h, center[1] - h],
        [center[0] + h, center[1] + h],
        [center[0] - h, center[1] + h],
        [center[0] - h, center[1] - h],
    ];
    let per_side = sides / 4;
    let len = hold + 4 * per_side + 1;
    DMatrix::from_fn(3, len, |axis, t| {
        if axis == 2 {
            return z;
        }
        if t < hold {
            return corners[0][axis];
        }
        let s = t - hold;
        let seg = (s / per_side.max(1)).min(3);
        let frac = if per_side == 0 {
            1.0
        } else {
            (s - seg * per_side) as f64 / per_side as f64
        };
        let (a, b) = (corners[seg][axis], corners[seg + 1][axis]);
        a + (b - a) * frac
    })
}

fn rotation_error(target: &Pose, current: &Pose) -> Vector3<f64> {
    (target.orientation * current.orientation.inverse()).scaled_axis()
}

struct Tracker<'a> {
    kin: &'a KinematicParams,
    limits: &'a [[f64; 2]],
    dt: f64,
    qdot_limit: f64,
}

impl Tracker<'_> {
    /// One resolved-velocity step with orientation locked to `goal` and a
    /// dead-beat correction towards `target`.
    fn step(&self, q: &JointVector, target: &Vector3<f64>, goal: &Pose) -> Result<JointVector> {
        let pose = self.kin.forward_kinematics(q)?;
        let w = rotation_error(goal, &pose) / self.dt;
        let v = (target - pose.position) / self.dt;
        let mut vd = DVector::zeros(6);
        vd.rows_mut(0, 3).copy_from(&w);
        vd.rows_mut(3, 3).copy_from(&v);
        let n = q.len();
        let mut p = QpProblem::new(self.kin.jacobian(q)?, vd);
        p.orientation_lock = true;
        p.qdot_lower = Some(DVector::from_element(n, -self.qdot_limit));
        p.qdot_upper = Some(DVector::from_element(n, self.qdot_limit));
        p.q = Some(q.clone());
        p.joint_limits = Some(self.limits.to_vec());
        p.dt = self.dt;
        let sol = resolved_velocity_solve(&p)?;
        Ok(q + sol.qdot * self.dt)
    }
}

/// Joint-space reference whose forward kinematics trace a square in the x-y
/// plane at height `z_m`, keeping the start pose's tool orientation. The arm
/// is first moved (off the record) from the start pose to the first corner.
pub fn cartesian_square_reference(plant: &PlantConfig, square: &SquareSpec) -> Result<SquareReference> {
    let &SquareSpec {
        side_m,
        z_m,
        period_s,
        center_m: center,
        hold_s,
        qdot_limit,
        ..
    } = square;
    if square.start_pose.len() != plant.n_joints {
        return Err(HarnessError::Config(format!(
            "square start pose has {} joints, plant has {}",
            square.start_pose.len(),
            plant.n_joints
        )));
    }
    let start = JointVector::from_column_slice(&square.start_pose);
    if !(side_m >= 0.0 && period_s > 0.0 && hold_s >= 0.0 && qdot_limit > 0.0) {
        return Err(HarnessError::Config(
            "square needs side ≥ 0, period > 0, hold ≥ 0 and a positive velocity bound".into(),
        ));
    }
    let kin = &plant.kinematic_params;
    let rate = plant.sample_rate();
    let tracker = Tracker {
        kin,
        limits: &plant.joint_limits,
        dt: plant.dt,
        qdot_limit,
    };
    let goal = kin.forward_kinematics(&start)?;
    let hold = (hold_s * rate).round() as usize;
    let sides = ((period_s * rate).round() as usize / 4) * 4;
    let xyz_ref = square_path(center, side_m, z_m, hold, sides);

    // Approach the first corner.
    let first = Vector3::new(xyz_ref[(0, 0)], xyz_ref[(1, 0)], z_m);
    let mut q = start;
    let mut converged = false;
    for _ in 0..5000 {
        let pose = kin.forward_kinematics(&q)?;
        if (pose.position - first).norm() < 1e-10 && rotation_error(&goal, &pose).norm() < 1e-10 {
            converged = true;
            break;
        }
        // Limit the approach to 5 mm per step so the linearisation holds.
        let delta = first - pose.position;
        let target = pose.position + delta * (5e-3 / delta.norm()).min(1.0);
        q = tracker.step(&q, &target, &goal)?;
    }
    if !converged {
        return Err(HarnessError::Unreachable(format!(
            "cannot place the tool at ({:.3}, {:.3}, {z_m:.3}) m",
            first.x, first.y
        )));
    }

    let len = xyz_ref.ncols();
    let n = q.len();
    let mut data = DMatrix::zeros(n, len);
    data.set_column(0, &q);
    if side_m > 0.0 {
        for t in 1..len {
            let target = Vector3::new(xyz_ref[(0, t)], xyz_ref[(1, t)], xyz_ref[(2, t)]);
            q = tracker.step(&q, &target, &goal)?;
            data.set_column(t, &q);
        }
    } else {
        for t in 1..len {
            data.set_column(t, &q);
        }
    }
    let q_d = Trajectory::new(data, rate)?;

    let mut max_pos: f64 = 0.0;
    let mut max_rot: f64 = 0.0;
    for t in 0..len {
        let pose = kin.forward_kinematics(&q_d.sample(t))?;
        let target = Vector3::new(xyz_ref[(0, t)], xyz_ref[(1, t)], xyz_ref[(2, t)]);
        max_pos = max_pos.max((pose.position - target).norm());
        max_rot = max_rot.max(pose.orientation_distance(&goal));
    }
    if max_pos > SQUARE_POSITION_TOL || max_rot > SQUARE_ORIENTATION_TOL {
        return Err(HarnessError::Unreachable(format!(
            "square deviates by {max_pos:.2e} m / {max_rot:.2e} rad"
        )));
    }
    Ok(SquareReference {
        q_d,
        xyz_ref,
        max_position_error: max_pos,
        max_orientation_error: max_rot,
    })
}

/// Tool positions `FK(q(t))`, 3 × N.
pub fn tool_positions(kin: &KinematicParams, q: &Trajectory) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(3, q.len());
    for t in 0..q.len() {
        out.set_column(t, &kin.forward_kinematics(&q.sample(t))?.position);
    }
    Ok(out)
}
