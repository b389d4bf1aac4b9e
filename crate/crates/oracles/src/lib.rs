//! Reference computations used by the test suites.
//!
//! Everything here is written independently of the production code paths it
//! checks: dense matrices instead of loops, loops instead of batched kernels,
//! and a barrier method instead of an active set.

use nalgebra::{DMatrix, DVector};

/// Single-joint two-mass servo as a discrete LTI system.
///
/// State is `[motor_pos, motor_vel, link_pos, link_vel]`; the per-sample map is
/// the `substeps`-fold composition of one semi-implicit Euler substep.
pub struct TwoMassLti {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn two_mass_lti(
    motor_inertia: f64,
    link_inertia: f64,
    stiffness: f64,
    damping: f64,
    kp: f64,
    kd: f64,
    dt: f64,
    substeps: usize,
) -> TwoMassLti {
    let (jm, jl, k, d) = (motor_inertia, link_inertia, stiffness, damping);
    // Continuous acceleration rows.
    let acc = DMatrix::from_row_slice(
        2,
        4,
        &[
            -(kp + k) / jm,
            -(kd + d) / jm,
            k / jm,
            d / jm,
            k / jl,
            d / jl,
            -k / jl,
            -d / jl,
        ],
    );
    let acc_u = DVector::from_vec(vec![kp / jm, 0.0]);
    let h = dt / substeps as f64;
    // velocity update: v' = v + h (acc x + acc_u u)
    let mut vel_update = DMatrix::identity(4, 4);
    let mut vel_b = DVector::zeros(4);
    for (row, state_idx) in [(0usize, 1usize), (1, 3)] {
        for c in 0..4 {
            vel_update[(state_idx, c)] += h * acc[(row, c)];
        }
        vel_b[state_idx] = h * acc_u[row];
    }
    // position update with the new velocities: p' = p + h v'
    let mut pos_update = DMatrix::identity(4, 4);
    pos_update[(0, 1)] = h;
    pos_update[(2, 3)] = h;
    let sub_a = &pos_update * &vel_update;
    let sub_b = &pos_update * &vel_b;

    let mut a = DMatrix::identity(4, 4);
    let mut b = DVector::zeros(4);
    for _ in 0..substeps {
        b = &sub_a * b + &sub_b;
        a = &sub_a * a;
    }
    TwoMassLti { a, b }
}

/// Scalar-loop GRU cell. Weight matrices are row-major `hidden × input` and
/// `hidden × hidden`.
#[allow(clippy::too_many_arguments)]
pub fn gru_cell_naive(
    w_z: &[f64],
    w_r: &[f64],
    w_h: &[f64],
    u_z: &[f64],
    u_r: &[f64],
    u_h: &[f64],
    b_z: &[f64],
    b_r: &[f64],
    b_h: &[f64],
    x: &[f64],
    h: &[f64],
) -> Vec<f64> {
    let hid = h.len();
    let inp = x.len();
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let mut z = vec![0.0; hid];
    let mut r = vec![0.0; hid];
    for i in 0..hid {
        let mut sz = b_z[i];
        let mut sr = b_r[i];
        for j in 0..inp {
            sz += w_z[i * inp + j] * x[j];
            sr += w_r[i * inp + j] * x[j];
        }
        for j in 0..hid {
            sz += u_z[i * hid + j] * h[j];
            sr += u_r[i * hid + j] * h[j];
        }
        z[i] = sigmoid(sz);
        r[i] = sigmoid(sr);
    }
    let mut out = vec![0.0; hid];
    for i in 0..hid {
        let mut s = b_h[i];
        for j in 0..inp {
            s += w_h[i * inp + j] * x[j];
        }
        for j in 0..hid {
            s += u_h[i * hid + j] * (r[j] * h[j]);
        }
        let cand = s.tanh();
        out[i] = (1.0 - z[i]) * h[i] + z[i] * cand;
    }
    out
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, delta: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += delta;
    xm[i] -= delta;
    (f(&xp) - f(&xm)) / (2.0 * delta)
}

/// Relative error with an absolute floor so that exact zeros compare sanely.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative error between `analytic` and central differences of `f`
/// over every coordinate of `x`.
pub fn max_gradient_error(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    delta: f64,
    floor: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    (0..x.len())
        .map(|i| relative_error(central_difference(f, x, i, delta), analytic[i], floor))
        .fold(0.0, f64::max)
}

/// One-sided power spectrum |X_k|² for k = 0..=N/2 by the direct DFT sum.
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let table: Vec<(f64, f64)> = (0..n)
        .map(|m| {
            let ang = -2.0 * std::f64::consts::PI * m as f64 / n as f64;
            (ang.cos(), ang.sin())
        })
        .collect();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, &v) in x.iter().enumerate() {
                let (c, s) = table[(k * t) % n];
                re += v * c;
                im += v * s;
            }
            re * re + im * im
        })
        .collect()
}

/// Minimum-norm least-squares solution of `g u = d`.
pub fn least_squares(g: &DMatrix<f64>, d: &DVector<f64>) -> DVector<f64> {
    let svd = g.clone().svd(true, true);
    svd.solve(d, 1e-12).expect("SVD computed with U and V")
}

/// Convex QP `min ½xᵀHx + gᵀx  s.t.  A x = b,  C x ≤ d` by a primal log-barrier
/// method with equality-constrained Newton steps.
///
/// `x0` must satisfy the equalities and strictly satisfy the inequalities.
pub struct BarrierQp<'a> {
    pub h: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
    pub c_in: &'a DMatrix<f64>,
    pub d_in: &'a DVector<f64>,
}

impl BarrierQp<'_> {
    pub fn solve(&self, x0: &DVector<f64>) -> DVector<f64> {
        let n = x0.len();
        let m_eq = self.a_eq.nrows();
        let m_in = self.c_in.nrows();
        let slack = |x: &DVector<f64>| self.d_in - self.c_in * x;
        assert!(slack(x0).iter().all(|&s| s > 0.0), "barrier start must be strictly feasible");

        let mut x = x0.clone();
        let mut t = 1.0;
        let objective = |x: &DVector<f64>, t: f64| -> f64 {
            let s = slack(x);
            if s.iter().any(|&v| v <= 0.0) {
                return f64::INFINITY;
            }
            t * (0.5 * x.dot(&(self.h * x)) + self.g.dot(x)) - s.iter().map(|v| v.ln()).sum::<f64>()
        };
        let gradient = |x: &DVector<f64>, t: f64| -> DVector<f64> {
            let inv: DVector<f64> = slack(x).map(|v| 1.0 / v);
            (self.h * x + self.g) * t + self.c_in.transpose() * &inv
        };
        // Gradient with its range(Aᵀ) component removed; zero at the centring point.
        let reduced = |grad: &DVector<f64>| -> f64 {
            if m_eq == 0 {
                return grad.norm();
            }
            let at = self.a_eq.transpose();
            let coef = (self.a_eq * &at).lu().solve(&(self.a_eq * grad)).unwrap_or_else(|| DVector::zeros(m_eq));
            (grad - at * coef).norm()
        };
        loop {
            for _ in 0..200 {
                let s = slack(&x);
                let inv: DVector<f64> = s.map(|v| 1.0 / v);
                let grad = gradient(&x, t);
                let mut hess = self.h * t;
                for i in 0..m_in {
                    let row = self.c_in.row(i);
                    hess += row.transpose() * row * (inv[i] * inv[i]);
                }
                // KKT system for the Newton step keeping A x = b.
                let dim = n + m_eq;
                let mut kkt = DMatrix::zeros(dim, dim);
                kkt.view_mut((0, 0), (n, n)).copy_from(&hess);
                kkt.view_mut((0, n), (n, m_eq)).copy_from(&self.a_eq.transpose());
                kkt.view_mut((n, 0), (m_eq, n)).copy_from(self.a_eq);
                let mut rhs = DVector::zeros(dim);
                rhs.rows_mut(0, n).copy_from(&(-&grad));
                let sol = kkt.lu().solve(&rhs).expect("barrier KKT system is nonsingular");
                let dx = sol.rows(0, n).into_owned();
                let decrement = -grad.dot(&dx);
                if decrement <= 1e-28 || reduced(&grad) <= 1e-13 * (1.0 + t) {
                    break;
                }
                let f0 = objective(&x, t);
                let r0 = reduced(&grad);
                let mut step = 1.0;
                loop {
                    let cand = &x + &dx * step;
                    // Objective decrease stops being resolvable near the optimum in
                    // flat directions; a drop in the reduced gradient also counts.
                    let fc = objective(&cand, t);
                    if fc <= f0 - 0.25 * step * decrement
                        || (fc.is_finite() && reduced(&gradient(&cand, t)) <= (1.0 - 0.25 * step) * r0)
                    {
                        x = cand;
                        break;
                    }
                    step *= 0.5;
                    if step < 1e-16 {
                        break;
                    }
                }
                if step < 1e-16 {
                    break;
                }
            }
            if m_in == 0 || (m_in as f64) / t < 1e-18 {
                return x;
            }
            t *= 8.0;
        }
    }
}
