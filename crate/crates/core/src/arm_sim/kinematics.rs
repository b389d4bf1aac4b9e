use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};

use super::config::KinematicParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    /// Angle (rad) of the relative rotation between two orientations.
    pub fn orientation_distance(&self, other: &Pose) -> f64 {
        self.orientation.angle_to(&other.orientation)
    }
}

struct Frames {
    origins: Vec<Vector3<f64>>,
    axes: Vec<Vector3<f64>>,
    tip: Vector3<f64>,
    rotation: Matrix3<f64>,
}

impl KinematicParams {
    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    fn frames(&self, q: &DVector<f64>) -> Result<Frames> {
        let n = self.joints.len();
        if q.len() != n {
            return Err(Error::Shape(format!("expected {n} joint angles, got {}", q.len())));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("joint angles"));
        }
        let mut rot = Matrix3::identity();
        let mut pos = Vector3::zeros();
        let mut origins = Vec::with_capacity(n);
        let mut axes = Vec::with_capacity(n);
        for (frame, &angle) in self.joints.iter().zip(q.iter()) {
            pos += rot * Vector3::from(frame.offset);
            let axis = Vector3::from(frame.axis);
            let joint_rot = Rotation3::from_axis_angle(&Unit::new_unchecked(axis), angle);
            rot *= joint_rot.matrix();
            origins.push(pos);
            axes.push(rot * axis);
        }
        let tip = pos + rot * Vector3::from(self.tool);
        Ok(Frames {
            origins,
            axes,
            tip,
            rotation: rot,
        })
    }

    pub fn forward_kinematics(&self, q: &DVector<f64>) -> Result<Pose> {
        let f = self.frames(q)?;
        let rot = Rotation3::from_matrix_unchecked(f.rotation);
        Ok(Pose {
            position: f.tip,
            orientation: UnitQuaternion::from_rotation_matrix(&rot),
        })
    }

    /// Geometric Jacobian (6 × n) at the tool point: angular rows first, then linear.
    pub fn jacobian(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        let f = self.frames(q)?;
        let n = self.joints.len();
        let mut jac = DMatrix::zeros(6, n);
        for i in 0..n {
            let z = f.axes[i];
            let lin = z.cross(&(f.tip - f.origins[i]));
            for r in 0..3 {
                jac[(r, i)] = z[r];
                jac[(r + 3, i)] = lin[r];
            }
        }
        Ok(jac)
    }

    /// Yoshikawa measure of the full 6 × n Jacobian.
    pub fn manipulability(&self, q: &DVector<f64>) -> Result<f64> {
        Ok(manipulability_of(&self.jacobian(q)?))
    }

    /// Yoshikawa measure of the linear-velocity rows only.
    pub fn position_manipulability(&self, q: &DVector<f64>) -> Result<f64> {
        let jac = self.jacobian(q)?;
        Ok(manipulability_of(&jac.rows(3, 3).into_owned()))
    }
}

/// `sqrt(det(J Jᵀ))` for wide or square `J`, `sqrt(det(Jᵀ J))` for tall `J`.
pub fn manipulability_of(jac: &DMatrix<f64>) -> f64 {
    let gram = if jac.nrows() <= jac.ncols() {
        jac * jac.transpose()
    } else {
        jac.transpose() * jac
    };
    gram.determinant().max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn planar2() -> KinematicParams {
        KinematicParams::planar(&[1.0, 1.0])
    }

    #[test]
    fn planar_straight_arm() {
        let p = planar2().forward_kinematics(&DVector::from_vec(vec![0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(p.position, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn planar_elbow_up() {
        // Hand trigonometry: (cos0 + cos(π/2), sin0 + sin(π/2)) = (1, 1).
        let p = planar2()
            .forward_kinematics(&DVector::from_vec(vec![0.0, FRAC_PI_2]))
            .unwrap();
        assert_abs_diff_eq!(p.position, Vector3::new(1.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn revolute_periodicity() {
        let kin = KinematicParams::baxter_like();
        let q = DVector::from_vec(vec![0.3, -0.4, 0.5, 1.1, -0.2, 0.7, 0.1]);
        let mut q2 = q.clone();
        q2[4] += 2.0 * PI;
        let a = kin.forward_kinematics(&q).unwrap();
        let b = kin.forward_kinematics(&q2).unwrap();
        assert_abs_diff_eq!(a.position, b.position, epsilon = 1e-12);
        assert!(a.orientation_distance(&b) < 1e-7);
    }

    #[test]
    fn planar_jacobian_determinant() {
        let jac = planar2().jacobian(&DVector::from_vec(vec![0.0, FRAC_PI_2])).unwrap();
        let block = jac.view((3, 0), (2, 2)).into_owned();
        assert_abs_diff_eq!(block.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn straight_arm_is_singular() {
        let jac = planar2().jacobian(&DVector::from_vec(vec![0.0, 0.0])).unwrap();
        let block = jac.view((3, 0), (2, 2)).into_owned();
        assert!(block.rank(1e-12) < 2);
    }

    #[test]
    fn planar_manipulability() {
        let kin = planar2();
        let w = kin
            .position_manipulability(&DVector::from_vec(vec![0.3, FRAC_PI_2]))
            .unwrap();
        assert_abs_diff_eq!(w, 1.0, epsilon = 1e-12);
        let w0 = kin.position_manipulability(&DVector::from_vec(vec![0.3, 0.0])).unwrap();
        assert_abs_diff_eq!(w0, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn manipulability_squared_is_gram_determinant() {
        let kin = KinematicParams::baxter_like();
        let q = DVector::from_vec(vec![0.4, -0.9, 0.2, 1.3, -0.2, 1.0, 0.1]);
        let jac = kin.jacobian(&q).unwrap();
        let w = kin.manipulability(&q).unwrap();
        assert!(w > 0.0);
        assert_abs_diff_eq!(w * w, (&jac * jac.transpose()).determinant(), epsilon = 1e-9);
    }

    #[test]
    fn orientation_is_unit() {
        let kin = KinematicParams::baxter_like();
        let q = DVector::from_vec(vec![1.0, -0.4, 2.0, 1.1, -2.2, 0.7, 0.1]);
        let p = kin.forward_kinematics(&q).unwrap();
        assert!((p.orientation.norm() - 1.0).abs() < 1e-9);
    }
}
