use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tikhonov weight on `q̇`; makes the Hessian positive definite when the
/// Jacobian has a null space (any redundant arm).
pub const QP_REGULARIZATION: f64 = 1e-8;

/// Resolved-velocity problem over `x = [q̇; α_r; α_p]`:
///
/// `min ‖J q̇ − [α_r ω_d; α_p v_d]‖² + ε_r (α_r − 1)² + ε_p (α_p − 1)² + λ‖q̇‖²`
///
/// `v_d` is stacked angular-first, matching the Jacobian rows.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub jacobian: DMatrix<f64>,
    pub v_d: DVector<f64>,
    pub eps_r: f64,
    pub eps_p: f64,
    /// Adds the angular rows `J_ω q̇ = α_r ω_d` as equalities.
    pub orientation_lock: bool,
    pub qdot_lower: Option<DVector<f64>>,
    pub qdot_upper: Option<DVector<f64>>,
    /// Current joint positions and limits, linearised over `dt` into
    /// `(lo − q)/dt ≤ q̇ ≤ (hi − q)/dt`.
    pub q: Option<DVector<f64>>,
    pub joint_limits: Option<Vec<[f64; 2]>>,
    pub dt: f64,
}

impl QpProblem {
    pub fn new(jacobian: DMatrix<f64>, v_d: DVector<f64>) -> Self {
        Self {
            jacobian,
            v_d,
            eps_r: 100.0,
            eps_p: 100.0,
            orientation_lock: false,
            qdot_lower: None,
            qdot_upper: None,
            q: None,
            joint_limits: None,
            dt: 0.01,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.jacobian.ncols()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_joints();
        if self.jacobian.nrows() != 6 || self.v_d.len() != 6 || n == 0 {
            return Err(Error::Shape(format!(
                "expected a 6×n Jacobian and 6-vector command, got {}×{} and {}",
                self.jacobian.nrows(),
                n,
                self.v_d.len()
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(self.jacobian.as_slice()) || !finite(self.v_d.as_slice()) {
            return Err(Error::NonFinite("QP Jacobian or command"));
        }
        if !(self.eps_r > 0.0 && self.eps_p > 0.0 && self.eps_r.is_finite() && self.eps_p.is_finite()) {
            return Err(Error::Config("QP scaling penalties must be positive".into()));
        }
        for b in [&self.qdot_lower, &self.qdot_upper, &self.q].into_iter().flatten() {
            if b.len() != n {
                return Err(Error::Shape(format!("bound vector has {} entries, expected {n}", b.len())));
            }
            if b.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite("QP bounds"));
            }
        }
        if self.q.is_some() != self.joint_limits.is_some() {
            return Err(Error::Config("position limits need both q and joint_limits".into()));
        }
        if let Some(l) = &self.joint_limits {
            if l.len() != n || !(self.dt > 0.0) {
                return Err(Error::Config("joint_limits length or dt invalid".into()));
            }
        }
        Ok(())
    }

    /// Box on `q̇` combining velocity and linearised position limits.
    fn qdot_box(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.n_joints();
        let mut lo = self.qdot_lower.clone().unwrap_or_else(|| DVector::from_element(n, f64::NEG_INFINITY));
        let mut hi = self.qdot_upper.clone().unwrap_or_else(|| DVector::from_element(n, f64::INFINITY));
        if let (Some(q), Some(lim)) = (&self.q, &self.joint_limits) {
            for i in 0..n {
                lo[i] = lo[i].max((lim[i][0] - q[i]) / self.dt);
                hi[i] = hi[i].min((lim[i][1] - q[i]) / self.dt);
            }
        }
        (lo, hi)
    }

    fn residual_matrix(&self) -> DMatrix<f64> {
        let n = self.n_joints();
        let mut a = DMatrix::zeros(6, n + 2);
        a.view_mut((0, 0), (6, n)).copy_from(&self.jacobian);
        for i in 0..3 {
            a[(i, n)] = -self.v_d[i];
            a[(i + 3, n + 1)] = -self.v_d[i + 3];
        }
        a
    }

    /// Dense form `min ½xᵀHx + gᵀx  s.t.  A x = b,  C x ≤ d`.
    pub fn constraints(&self) -> Result<QpConstraints> {
        self.validate()?;
        let n = self.n_joints();
        let a = self.residual_matrix();
        let mut d = DMatrix::zeros(n + 2, n + 2);
        for i in 0..n {
            d[(i, i)] = QP_REGULARIZATION;
        }
        d[(n, n)] = self.eps_r;
        d[(n + 1, n + 1)] = self.eps_p;
        let h = (a.transpose() * &a + d) * 2.0;
        let mut g = DVector::zeros(n + 2);
        g[n] = -2.0 * self.eps_r;
        g[n + 1] = -2.0 * self.eps_p;

        let (a_eq, b_eq) = if self.orientation_lock {
            (a.rows(0, 3).into_owned(), DVector::zeros(3))
        } else {
            (DMatrix::zeros(0, n + 2), DVector::zeros(0))
        };
        let (lo, hi) = self.qdot_box();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for i in 0..n {
            if hi[i].is_finite() {
                let mut r = DVector::zeros(n + 2);
                r[i] = 1.0;
                rows.push(r);
                rhs.push(hi[i]);
            }
            if lo[i].is_finite() {
                let mut r = DVector::zeros(n + 2);
                r[i] = -1.0;
                rows.push(r);
                rhs.push(-lo[i]);
            }
        }
        let c_in = if rows.is_empty() {
            DMatrix::zeros(0, n + 2)
        } else {
            DMatrix::from_rows(&rows.iter().map(|r| r.transpose()).collect::<Vec<_>>())
        };
        Ok(QpConstraints {
            h,
            g,
            a_eq,
            b_eq,
            c_in,
            d_in: DVector::from_vec(rhs),
        })
    }

    /// Objective at `x = [q̇; α_r; α_p]`, regulariser included.
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        let n = self.n_joints();
        let r = self.residual_matrix() * x;
        r.norm_squared()
            + self.eps_r * (x[n] - 1.0).powi(2)
            + self.eps_p * (x[n + 1] - 1.0).powi(2)
            + QP_REGULARIZATION * x.rows(0, n).norm_squared()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpConstraints {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub c_in: DMatrix<f64>,
    pub d_in: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub qdot: DVector<f64>,
    pub alpha_r: f64,
    pub alpha_p: f64,
    pub objective: f64,
    /// Max-norm of the Lagrangian gradient at the returned multipliers.
    pub kkt_residual: f64,
    pub max_violation: f64,
    pub active_set: Vec<usize>,
    pub iterations: usize,
}

impl QpSolution {
    pub fn x(&self) -> DVector<f64> {
        let n = self.qdot.len();
        let mut x = DVector::zeros(n + 2);
        x.rows_mut(0, n).copy_from(&self.qdot);
        x[n] = self.alpha_r;
        x[n + 1] = self.alpha_p;
        x
    }
}

/// Solves the resolved-velocity QP with a dual active-set method
/// (Goldfarb–Idnani), which needs no feasible starting point.
pub fn resolved_velocity_solve(problem: &QpProblem) -> Result<QpSolution> {
    let qc = problem.constraints()?;
    let (x, active, mult, iterations) = dual_active_set(&qc)?;
    let n = problem.n_joints();

    let mut stat = &qc.h * &x + &qc.g;
    let m_eq = qc.a_eq.nrows();
    for (&c, &u) in active.iter().zip(&mult) {
        let normal = normal(&qc, c);
        stat -= normal * u;
    }
    let eq_viol = (&qc.a_eq * &x - &qc.b_eq).amax();
    let in_viol = (&qc.c_in * &x - &qc.d_in).iter().fold(0.0f64, |m, &v| m.max(v));
    Ok(QpSolution {
        qdot: x.rows(0, n).into_owned(),
        alpha_r: x[n],
        alpha_p: x[n + 1],
        objective: problem.objective(&x),
        kkt_residual: stat.amax(),
        max_violation: eq_viol.max(in_viol),
        active_set: active.into_iter().filter(|&c| c >= m_eq).map(|c| c - m_eq).collect(),
        iterations,
    })
}

/// Constraint `i` written as `nᵀx + b ≥ 0` (inequalities) or `= 0` (equalities).
fn normal(qc: &QpConstraints, i: usize) -> DVector<f64> {
    let m_eq = qc.a_eq.nrows();
    if i < m_eq {
        -qc.a_eq.row(i).transpose()
    } else {
        -qc.c_in.row(i - m_eq).transpose()
    }
}

fn offset(qc: &QpConstraints, i: usize) -> f64 {
    let m_eq = qc.a_eq.nrows();
    if i < m_eq {
        qc.b_eq[i]
    } else {
        qc.d_in[i - m_eq]
    }
}

type ActiveSetResult = (DVector<f64>, Vec<usize>, Vec<f64>, usize);

fn dual_active_set(qc: &QpConstraints) -> Result<ActiveSetResult> {
    let dim = qc.h.nrows();
    let m_eq = qc.a_eq.nrows();
    let m = m_eq + qc.c_in.nrows();
    let chol = qc
        .h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("QP Hessian is not positive definite".into()))?;
    let mut x = -chol.solve(&qc.g);
    let scale = 1.0 + qc.d_in.amax().max(qc.b_eq.amax());
    let tol = 1e-12 * scale;

    // Equalities are stored with the sign that makes them violated from below
    // when they are added; `sign[i]` records the flip.
    let mut sign = vec![1.0; m];
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let mut eq_done = vec![false; m_eq];
    let slack = |x: &DVector<f64>, i: usize, s: f64| s * (normal(qc, i).dot(x) + offset(qc, i));
    let max_iters = 50 * (m + dim) + 100;
    let mut iterations = 0;

    loop {
        let p = if let Some(e) = (0..m_eq).find(|&e| !eq_done[e]) {
            eq_done[e] = true;
            sign[e] = if slack(&x, e, 1.0) > 0.0 { -1.0 } else { 1.0 };
            e
        } else {
            let worst = (m_eq..m)
                .map(|i| (i, slack(&x, i, 1.0)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            match worst {
                Some((i, s)) if s < -tol => i,
                _ => break,
            }
        };
        let np = normal(qc, p) * sign[p];
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iters {
                return Err(Error::Infeasible("QP active-set iteration limit reached".into()));
            }
            let (z, r) = directions(&chol, qc, &active, &sign, &np)?;
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (k, (&c, &rk)) in active.iter().zip(r.iter()).enumerate() {
                if c >= m_eq && rk > 0.0 {
                    let t = mult[k] / rk;
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            let s_p = slack(&x, p, sign[p]);
            let t2 = if z.amax() > 1e-14 && zn > 0.0 { -s_p / zn } else { f64::INFINITY };
            if t2.is_infinite() && p < m_eq && s_p.abs() <= tol {
                // Redundant equality already satisfied.
                break;
            }
            let t = t1.min(t2);
            if t.is_infinite() {
                return Err(Error::Infeasible(if p < m_eq {
                    "equality constraints are inconsistent".into()
                } else {
                    "inequality constraints cannot be satisfied together".into()
                }));
            }
            if t2.is_finite() {
                x += &z * t;
            }
            for (u, rk) in mult.iter_mut().zip(r.iter()) {
                *u -= t * rk;
            }
            u_p += t;
            if t == t2 {
                active.push(p);
                mult.push(u_p);
                break;
            }
            let k = drop.expect("partial step has a blocking constraint");
            active.remove(k);
            mult.remove(k);
        }
    }
    if let Some((xp, up)) = polish(qc, &active, &sign, &x, &mult, tol) {
        x = xp;
        mult = up;
    }
    // Report multipliers against the unflipped constraint normals.
    for (c, u) in active.iter().zip(mult.iter_mut()) {
        *u *= sign[*c];
    }
    Ok((x, active, mult, iterations))
}

fn active_normals(qc: &QpConstraints, active: &[usize], sign: &[f64]) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = active.iter().map(|&c| normal(qc, c) * sign[c]).collect();
    DMatrix::from_columns(&cols)
}

fn kkt_matrix(h: &DMatrix<f64>, na: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = h.nrows();
    let q = na.ncols();
    let mut k = DMatrix::zeros(dim + q, dim + q);
    k.view_mut((0, 0), (dim, dim)).copy_from(h);
    k.view_mut((0, dim), (dim, q)).copy_from(na);
    k.view_mut((dim, 0), (q, dim)).copy_from(&na.transpose());
    k
}

/// Primal step `z` and dual step `r` for adding normal `n`: `G z = n − N r`, `Nᵀ z = 0`.
fn directions(
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    qc: &QpConstraints,
    active: &[usize],
    sign: &[f64],
    np: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if active.is_empty() {
        return Ok((chol.solve(np), DVector::zeros(0)));
    }
    let dim = qc.h.nrows();
    let na = active_normals(qc, active, sign);
    let mut rhs = DVector::zeros(dim + active.len());
    rhs.rows_mut(0, dim).copy_from(np);
    let sol = kkt_matrix(&qc.h, &na)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Infeasible("active constraint normals became dependent".into()))?;
    Ok((sol.rows(0, dim).into_owned(), sol.rows(dim, active.len()).into_owned()))
}

/// Re-solves the equality-constrained problem on the final active set, which
/// removes drift accumulated over the active-set steps. Kept only if it stays
/// primal and dual feasible.
fn polish(
    qc: &QpConstraints,
    active: &[usize],
    sign: &[f64],
    x: &DVector<f64>,
    mult: &[f64],
    tol: f64,
) -> Option<(DVector<f64>, Vec<f64>)> {
    if active.is_empty() {
        return None;
    }
    let dim = qc.h.nrows();
    let m_eq = qc.a_eq.nrows();
    let na = active_normals(qc, active, sign);
    let mut rhs = DVector::zeros(dim + active.len());
    rhs.rows_mut(0, dim).copy_from(&(-&qc.g));
    for (k, &c) in active.iter().enumerate() {
        rhs[dim + k] = -sign[c] * offset(qc, c);
    }
    let sol = kkt_matrix(&qc.h, &na).lu().solve(&rhs)?;
    let xp = sol.rows(0, dim).into_owned();
    let up: Vec<f64> = sol.rows(dim, active.len()).iter().map(|v| -v).collect();
    let dual_ok = active.iter().zip(&up).all(|(&c, &u)| c < m_eq || u >= -tol);
    let primal_ok = (m_eq..m_eq + qc.c_in.nrows()).all(|i| normal(qc, i).dot(&xp) + offset(qc, i) >= -tol);
    let moved = (&xp - x).amax() <= 1e-6 * (1.0 + x.amax());
    let consistent = up.iter().zip(mult).all(|(a, b)| (a - b).abs() <= 1e-6 * (1.0 + b.abs()));
    (dual_ok && primal_ok && moved && consistent).then_some((xp, up))
}
