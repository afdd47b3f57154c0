//! Dense convex quadratic programs:
//!
//! ```text
//! minimize ½ xᵀPx + cᵀx   subject to   Ax = b,  Gx ≤ h,  lower ≤ x ≤ upper
//! ```
//!
//! solved with a Mehrotra predictor–corrector interior-point method. Bounds are
//! handled as diagonal blocks; variables with equal bounds are eliminated first.
//! When no solution exists, a phase-1 program produces a Farkas certificate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct QuadraticProgram {
    pub p: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QuadraticProgram {
    /// Unconstrained problem in `n` variables; fill in the blocks afterwards.
    pub fn new(p: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        Self {
            p,
            c,
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            g: DMatrix::zeros(0, n),
            h: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a = a;
        self.b = b;
        self
    }

    pub fn with_inequalities(mut self, g: DMatrix<f64>, h: DVector<f64>) -> Self {
        self.g = g;
        self.h = h;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.c.dot(x)
    }

    fn check(&self) -> Result<()> {
        let n = self.dim();
        let ok = self.p.shape() == (n, n)
            && self.a.ncols() == n
            && self.a.nrows() == self.b.len()
            && self.g.ncols() == n
            && self.g.nrows() == self.h.len()
            && self.lower.len() == n
            && self.upper.len() == n;
        if !ok {
            return Err(Error::Qp("inconsistent block dimensions".into()));
        }
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !finite(self.p.as_slice())
            || !finite(self.c.as_slice())
            || !finite(self.a.as_slice())
            || !finite(self.b.as_slice())
            || !finite(self.g.as_slice())
            || !finite(self.h.as_slice())
            || self.lower.iter().chain(self.upper.iter()).any(|v| v.is_nan())
        {
            return Err(Error::Qp("non-finite problem data".into()));
        }
        Ok(())
    }

    /// Largest violation of the constraints at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let eq = (&self.a * x - &self.b).amax();
        let ineq = (&self.g * x - &self.h).iter().fold(0.0f64, |m, v| m.max(*v));
        let bnd = (0..x.len()).fold(0.0f64, |m, i| {
            m.max(self.lower[i] - x[i]).max(x[i] - self.upper[i])
        });
        eq.max(ineq).max(bnd)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QpSettings {
    /// Target on every KKT residual block and on the mean complementarity.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// When the iteration cap is reached, the best iterate is still returned if its
    /// KKT residual is within this bound, relative to the problem data scale.
    pub acceptable_tolerance: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 150,
            acceptable_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of `Ax = b`.
    pub y: DVector<f64>,
    /// Multipliers of `Gx ≤ h` (nonnegative).
    pub z: DVector<f64>,
    pub z_lower: DVector<f64>,
    pub z_upper: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// ∞-norm of the KKT residual (stationarity, feasibility, complementarity).
    pub kkt_residual: f64,
}

/// Farkas certificate: multipliers with `Aᵀy + Gᵀz − z_lower + z_upper = 0`,
/// `z, z_lower, z_upper ≥ 0` and `bᵀy + hᵀz − lowerᵀz_lower + upperᵀz_upper < 0`.
#[derive(Clone, Debug)]
pub struct InfeasibilityCertificate {
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub z_lower: DVector<f64>,
    pub z_upper: DVector<f64>,
    /// Least total constraint violation found by the phase-1 program.
    pub violation: f64,
}

impl InfeasibilityCertificate {
    /// `(stationarity residual, certificate value)`; valid when the first is small
    /// relative to the magnitude of the second and the second is negative.
    pub fn check(&self, qp: &QuadraticProgram) -> (f64, f64) {
        let stat = qp.a.transpose() * &self.y + qp.g.transpose() * &self.z - &self.z_lower + &self.z_upper;
        let mut value = qp.b.dot(&self.y) + qp.h.dot(&self.z);
        for i in 0..qp.dim() {
            if self.z_lower[i] > 0.0 {
                value -= qp.lower[i] * self.z_lower[i];
            }
            if self.z_upper[i] > 0.0 {
                value += qp.upper[i] * self.z_upper[i];
            }
        }
        (stat.amax(), value)
    }
}

#[derive(Clone, Debug)]
pub enum QpOutcome {
    Optimal(QpSolution),
    Infeasible(InfeasibilityCertificate),
}

pub fn solve_qp(qp: &QuadraticProgram, settings: &QpSettings) -> Result<QpOutcome> {
    qp.check()?;
    let n = qp.dim();
    // Crossed bounds are their own certificate.
    if let Some(i) = (0..n).find(|&i| qp.lower[i] > qp.upper[i]) {
        let mut zl = DVector::zeros(n);
        let mut zu = DVector::zeros(n);
        zl[i] = 1.0;
        zu[i] = 1.0;
        return Ok(QpOutcome::Infeasible(InfeasibilityCertificate {
            y: DVector::zeros(qp.a.nrows()),
            z: DVector::zeros(qp.g.nrows()),
            z_lower: zl,
            z_upper: zu,
            violation: qp.lower[i] - qp.upper[i],
        }));
    }
    let fixed: Vec<bool> = (0..n)
        .map(|i| qp.lower[i].is_finite() && qp.upper[i] - qp.lower[i] <= 1e-12 * (1.0 + qp.lower[i].abs()))
        .collect();
    if fixed.iter().any(|&f| f) {
        return solve_with_fixed(qp, &fixed, settings);
    }
    match interior_point_scaled(qp, settings) {
        Ok(sol) => Ok(QpOutcome::Optimal(sol)),
        Err(e) => match phase_one(qp, settings)? {
            Some(cert) => Ok(QpOutcome::Infeasible(cert)),
            None => Err(e),
        },
    }
}

/// Eliminates fixed variables, solves the reduced program, and lifts the result.
fn solve_with_fixed(qp: &QuadraticProgram, fixed: &[bool], settings: &QpSettings) -> Result<QpOutcome> {
    let n = qp.dim();
    let free: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
    let x_fixed = DVector::from_fn(n, |i, _| if fixed[i] { qp.lower[i] } else { 0.0 });
    let nr = free.len();
    let sel = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), nr, |r, k| m[(r, free[k])]);
    let p_r = DMatrix::from_fn(nr, nr, |i, j| qp.p[(free[i], free[j])]);
    let px = &qp.p * &x_fixed;
    let c_r = DVector::from_fn(nr, |i, _| qp.c[free[i]] + px[free[i]]);
    let a_full = sel(&qp.a);
    let b_full = &qp.b - &qp.a * &x_fixed;
    // Equality rows touching only fixed variables must already hold.
    let mut rows = Vec::new();
    for r in 0..a_full.nrows() {
        if a_full.row(r).amax() > 0.0 {
            rows.push(r);
        } else if b_full[r].abs() > settings.tolerance * (1.0 + qp.b[r].abs()) {
            let mut y = DVector::zeros(qp.a.nrows());
            y[r] = -b_full[r].signum();
            let zl = qp.a.transpose() * &y;
            let (z_lower, z_upper) = split_bound_multipliers(&zl, fixed);
            return Ok(QpOutcome::Infeasible(InfeasibilityCertificate {
                y,
                z: DVector::zeros(qp.g.nrows()),
                z_lower,
                z_upper,
                violation: b_full[r].abs(),
            }));
        }
    }
    let a_r = DMatrix::from_fn(rows.len(), nr, |i, k| a_full[(rows[i], k)]);
    let b_r = DVector::from_fn(rows.len(), |i, _| b_full[rows[i]]);
    let g_full = sel(&qp.g);
    let h_full = &qp.h - &qp.g * &x_fixed;
    // Inequality rows touching only fixed variables are dropped once checked; kept as
    // `0 ≤ h` they would pin a slack at zero and leave its multiplier unbounded.
    let mut ineq = Vec::new();
    for r in 0..g_full.nrows() {
        if g_full.row(r).amax() > 0.0 {
            ineq.push(r);
        } else if h_full[r] < -settings.tolerance * (1.0 + qp.h[r].abs()) {
            let mut z = DVector::zeros(qp.g.nrows());
            z[r] = 1.0;
            let zl = qp.g.transpose() * &z;
            let (z_lower, z_upper) = split_bound_multipliers(&zl, fixed);
            return Ok(QpOutcome::Infeasible(InfeasibilityCertificate {
                y: DVector::zeros(qp.a.nrows()),
                z,
                z_lower,
                z_upper,
                violation: -h_full[r],
            }));
        }
    }
    let g_r = DMatrix::from_fn(ineq.len(), nr, |i, k| g_full[(ineq[i], k)]);
    let h_r = DVector::from_fn(ineq.len(), |i, _| h_full[ineq[i]]);
    let reduced = QuadraticProgram {
        p: p_r,
        c: c_r,
        a: a_r,
        b: b_r,
        g: g_r,
        h: h_r,
        lower: DVector::from_fn(nr, |i, _| qp.lower[free[i]]),
        upper: DVector::from_fn(nr, |i, _| qp.upper[free[i]]),
    };
    if nr == 0 {
        let viol = qp.max_violation(&x_fixed);
        if viol > settings.tolerance.max(1e-9) {
            return match phase_one(qp, settings)? {
                Some(c) => Ok(QpOutcome::Infeasible(c)),
                None => Err(Error::Qp("fixed point violates constraints".into())),
            };
        }
    }
    let lift_y = |y_r: &DVector<f64>| {
        let mut y = DVector::zeros(qp.a.nrows());
        for (i, &r) in rows.iter().enumerate() {
            y[r] = y_r[i];
        }
        y
    };
    let lift_z = |z_r: &DVector<f64>| {
        let mut z = DVector::zeros(qp.g.nrows());
        for (i, &r) in ineq.iter().enumerate() {
            z[r] = z_r[i];
        }
        z
    };
    match solve_qp(&reduced, settings)? {
        QpOutcome::Optimal(s) => {
            let mut x = x_fixed.clone();
            for (k, &i) in free.iter().enumerate() {
                x[i] = s.x[k];
            }
            let y = lift_y(&s.y);
            let z = lift_z(&s.z);
            let mut zl = DVector::zeros(n);
            let mut zu = DVector::zeros(n);
            for (k, &i) in free.iter().enumerate() {
                zl[i] = s.z_lower[k];
                zu[i] = s.z_upper[k];
            }
            // Fixed variables absorb the stationarity residual in their bound multipliers.
            let grad = &qp.p * &x + &qp.c + qp.a.transpose() * &y + qp.g.transpose() * &z;
            for i in 0..n {
                if fixed[i] {
                    if grad[i] >= 0.0 {
                        zl[i] = grad[i];
                    } else {
                        zu[i] = -grad[i];
                    }
                }
            }
            Ok(QpOutcome::Optimal(QpSolution {
                objective: qp.objective(&x),
                x,
                y,
                z,
                z_lower: zl,
                z_upper: zu,
                iterations: s.iterations,
                kkt_residual: s.kkt_residual,
            }))
        }
        QpOutcome::Infeasible(c) => {
            let y = lift_y(&c.y);
            let z = lift_z(&c.z);
            let mut zl = DVector::zeros(n);
            let mut zu = DVector::zeros(n);
            for (k, &i) in free.iter().enumerate() {
                zl[i] = c.z_lower[k];
                zu[i] = c.z_upper[k];
            }
            let resid = qp.a.transpose() * &y + qp.g.transpose() * &z - &zl + &zu;
            let (fl, fu) = split_bound_multipliers(&resid, fixed);
            Ok(QpOutcome::Infeasible(InfeasibilityCertificate {
                y,
                z,
                z_lower: zl + fl,
                z_upper: zu - fu,
                violation: c.violation,
            }))
        }
    }
}

/// Bound multipliers on fixed coordinates that cancel `r` (`r − z_l + z_u = 0`).
fn split_bound_multipliers(r: &DVector<f64>, fixed: &[bool]) -> (DVector<f64>, DVector<f64>) {
    let n = r.len();
    let mut zl = DVector::zeros(n);
    let mut zu = DVector::zeros(n);
    for i in 0..n {
        if fixed[i] {
            if r[i] >= 0.0 {
                zl[i] = r[i];
            } else {
                zu[i] = -r[i];
            }
        }
    }
    (zl, zu)
}

#[derive(Clone)]
struct Iterate {
    x: DVector<f64>,
    y: DVector<f64>,
    s: DVector<f64>,
    z: DVector<f64>,
    sl: DVector<f64>,
    zl: DVector<f64>,
    su: DVector<f64>,
    zu: DVector<f64>,
}

struct Direction {
    dx: DVector<f64>,
    dy: DVector<f64>,
    ds: DVector<f64>,
    dz: DVector<f64>,
    dsl: DVector<f64>,
    dzl: DVector<f64>,
    dsu: DVector<f64>,
    dzu: DVector<f64>,
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(1.0, f64::min)
}

fn unpack(qp: &QuadraticProgram, it: &Iterate, lo: &[usize], up: &[usize], iterations: usize, residual: f64) -> QpSolution {
    let n = qp.dim();
    let mut zl = DVector::zeros(n);
    let mut zu = DVector::zeros(n);
    for (k, &i) in lo.iter().enumerate() {
        zl[i] = it.zl[k];
    }
    for (k, &i) in up.iter().enumerate() {
        zu[i] = it.zu[k];
    }
    QpSolution {
        objective: qp.objective(&it.x),
        x: it.x.clone(),
        y: it.y.clone(),
        z: it.z.clone(),
        z_lower: zl,
        z_upper: zu,
        iterations,
        kkt_residual: residual,
    }
}

/// KKT residual ∞-norm of a candidate primal–dual point.
fn kkt_residual(qp: &QuadraticProgram, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>, zl: &DVector<f64>, zu: &DVector<f64>) -> f64 {
    let stat = &qp.p * x + &qp.c + qp.a.transpose() * y + qp.g.transpose() * z - zl + zu;
    let slack = &qp.h - &qp.g * x;
    let mut comp = 0.0f64;
    for i in 0..z.len() {
        comp = comp.max((z[i] * slack[i]).abs());
    }
    for i in 0..x.len() {
        if zl[i] > 0.0 {
            comp = comp.max((zl[i] * (x[i] - qp.lower[i])).abs());
        }
        if zu[i] > 0.0 {
            comp = comp.max((zu[i] * (qp.upper[i] - x[i])).abs());
        }
    }
    let dual_sign = z.iter().chain(zl.iter()).chain(zu.iter()).fold(0.0f64, |m, v| m.max(-v));
    stat.amax().max(qp.max_violation(x)).max(comp).max(dual_sign)
}

/// Re-solves the equality-constrained program on the active set guessed from the iterate.
fn polish(qp: &QuadraticProgram, it: &Iterate, lo: &[usize], up: &[usize], iterations: usize) -> Option<QpSolution> {
    let n = qp.dim();
    let p_eq = qp.a.nrows();
    let act_g: Vec<usize> = (0..qp.g.nrows()).filter(|&i| it.z[i] > it.s[i]).collect();
    let act_l: Vec<usize> = (0..lo.len()).filter(|&k| it.zl[k] > it.sl[k]).collect();
    let act_u: Vec<usize> = (0..up.len()).filter(|&k| it.zu[k] > it.su[k]).collect();
    let k = p_eq + act_g.len() + act_l.len() + act_u.len();
    if k > n + p_eq {
        return None;
    }
    let mut c_mat = DMatrix::zeros(k, n);
    let mut d = DVector::zeros(k);
    c_mat.view_mut((0, 0), (p_eq, n)).copy_from(&qp.a);
    d.rows_mut(0, p_eq).copy_from(&qp.b);
    let mut r = p_eq;
    for &i in &act_g {
        c_mat.row_mut(r).copy_from(&qp.g.row(i));
        d[r] = qp.h[i];
        r += 1;
    }
    for &kk in &act_l {
        c_mat[(r, lo[kk])] = 1.0;
        d[r] = qp.lower[lo[kk]];
        r += 1;
    }
    for &kk in &act_u {
        c_mat[(r, up[kk])] = 1.0;
        d[r] = qp.upper[up[kk]];
        r += 1;
    }
    let dim = n + k;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
    kkt.view_mut((0, n), (n, k)).copy_from(&c_mat.transpose());
    kkt.view_mut((n, 0), (k, n)).copy_from(&c_mat);
    let mut rhs = DVector::zeros(dim);
    rhs.rows_mut(0, n).copy_from(&(-&qp.c));
    rhs.rows_mut(n, k).copy_from(&d);
    let mut reg = kkt.clone();
    let delta = 1e-12 * (1.0 + qp.p.amax());
    for i in 0..n {
        reg[(i, i)] += delta;
    }
    for i in n..dim {
        reg[(i, i)] -= delta;
    }
    let lu = reg.lu();
    let mut sol = lu.solve(&rhs)?;
    for _ in 0..3 {
        let res = &rhs - &kkt * &sol;
        sol += lu.solve(&res)?;
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let x = sol.rows(0, n).into_owned();
    let y = sol.rows(n, p_eq).into_owned();
    let mut z = DVector::zeros(qp.g.nrows());
    let mut zl = DVector::zeros(n);
    let mut zu = DVector::zeros(n);
    let mut r = n + p_eq;
    for &i in &act_g {
        z[i] = sol[r];
        r += 1;
    }
    for &kk in &act_l {
        zl[lo[kk]] = -sol[r];
        r += 1;
    }
    for &kk in &act_u {
        zu[up[kk]] = sol[r];
        r += 1;
    }
    let residual = kkt_residual(qp, &x, &y, &z, &zl, &zu);
    if !residual.is_finite() {
        return None;
    }
    Some(QpSolution {
        objective: qp.objective(&x),
        x,
        y,
        z,
        z_lower: zl,
        z_upper: zu,
        iterations,
        kkt_residual: residual,
    })
}

/// Runs the interior point on the program with its objective normalized to unit size,
/// then maps the multipliers back.
fn interior_point_scaled(qp: &QuadraticProgram, settings: &QpSettings) -> Result<QpSolution> {
    let k = qp.p.amax().max(qp.c.amax());
    if k <= 1.0 {
        return interior_point(qp, settings);
    }
    let mut scaled = qp.clone();
    scaled.p /= k;
    scaled.c /= k;
    let mut sol = interior_point(&scaled, settings)?;
    sol.y *= k;
    sol.z *= k;
    sol.z_lower *= k;
    sol.z_upper *= k;
    sol.objective = qp.objective(&sol.x);
    sol.kkt_residual = kkt_residual(qp, &sol.x, &sol.y, &sol.z, &sol.z_lower, &sol.z_upper);
    Ok(sol)
}

fn interior_point(qp: &QuadraticProgram, settings: &QpSettings) -> Result<QpSolution> {
    let n = qp.dim();
    let p_eq = qp.a.nrows();
    let m = qp.g.nrows();
    let lo: Vec<usize> = (0..n).filter(|&i| qp.lower[i].is_finite()).collect();
    let up: Vec<usize> = (0..n).filter(|&i| qp.upper[i].is_finite()).collect();
    let (ml, mu) = (lo.len(), up.len());
    let total_ineq = (m + ml + mu) as f64;

    let x = DVector::from_fn(n, |i, _| {
        let (l, u) = (qp.lower[i], qp.upper[i]);
        match (l.is_finite(), u.is_finite()) {
            (true, true) => 0.5 * (l + u),
            (true, false) => l.max(0.0) + 1.0,
            (false, true) => u.min(0.0) - 1.0,
            (false, false) => 0.0,
        }
    });
    let gx = &qp.g * &x;
    let mut it = Iterate {
        s: DVector::from_fn(m, |i, _| (qp.h[i] - gx[i]).max(1.0)),
        z: DVector::from_element(m, 1.0),
        sl: DVector::from_fn(ml, |k, _| (x[lo[k]] - qp.lower[lo[k]]).max(1e-2)),
        zl: DVector::from_element(ml, 1.0),
        su: DVector::from_fn(mu, |k, _| (qp.upper[up[k]] - x[up[k]]).max(1e-2)),
        zu: DVector::from_element(mu, 1.0),
        y: DVector::zeros(p_eq),
        x,
    };

    let scale = 1.0
        + qp.c.amax().max(qp.b.amax()).max(qp.h.amax()).max(qp.p.amax()).max(qp.a.amax()).max(qp.g.amax());
    let tol = settings.tolerance;
    let mut best_residual = f64::INFINITY;
    let mut best: Option<(Iterate, usize)> = None;

    for iter in 0..settings.max_iterations {
        // Residuals.
        let mut rd = &qp.p * &it.x + &qp.c + qp.a.transpose() * &it.y + qp.g.transpose() * &it.z;
        for (k, &i) in lo.iter().enumerate() {
            rd[i] -= it.zl[k];
        }
        for (k, &i) in up.iter().enumerate() {
            rd[i] += it.zu[k];
        }
        let rp = &qp.a * &it.x - &qp.b;
        let ri = &qp.g * &it.x + &it.s - &qp.h;
        let ril = DVector::from_fn(ml, |k, _| -it.x[lo[k]] + it.sl[k] + qp.lower[lo[k]]);
        let riu = DVector::from_fn(mu, |k, _| it.x[up[k]] + it.su[k] - qp.upper[up[k]]);
        let gap = it.s.dot(&it.z) + it.sl.dot(&it.zl) + it.su.dot(&it.zu);
        let mu_c = if total_ineq > 0.0 { gap / total_ineq } else { 0.0 };
        let primal = rp.amax().max(ri.amax()).max(ril.amax()).max(riu.amax());
        let residual = rd.amax().max(primal).max(mu_c);
        if residual < best_residual {
            best_residual = residual;
            best = Some((it.clone(), iter));
        }
        if primal <= tol * scale && mu_c <= tol {
            if let Some(polished) = polish(qp, &it, &lo, &up, iter) {
                if polished.kkt_residual <= tol {
                    return Ok(polished);
                }
            }
            if rd.amax() <= tol * scale {
                return Ok(unpack(qp, &it, &lo, &up, iter, residual));
            }
        }
        let dual_norm = it.y.amax().max(it.z.amax()).max(it.zl.amax()).max(it.zu.amax());
        if dual_norm > 1e14 * scale || !residual.is_finite() {
            break;
        }

        // Reduced KKT matrix [[H, Aᵀ], [A, −reg]].
        let w = it.z.component_div(&it.s);
        let mut hmat = qp.p.clone();
        if m > 0 {
            let gw = DMatrix::from_fn(m, n, |r, cidx| qp.g[(r, cidx)] * w[r]);
            hmat += qp.g.transpose() * gw;
        }
        for (k, &i) in lo.iter().enumerate() {
            hmat[(i, i)] += it.zl[k] / it.sl[k];
        }
        for (k, &i) in up.iter().enumerate() {
            hmat[(i, i)] += it.zu[k] / it.su[k];
        }
        let reg = 1e-11 * (1.0 + hmat.diagonal().amax());
        let dim = n + p_eq;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&hmat);
        for i in 0..n {
            kkt[(i, i)] += reg;
        }
        if p_eq > 0 {
            kkt.view_mut((0, n), (n, p_eq)).copy_from(&qp.a.transpose());
            kkt.view_mut((n, 0), (p_eq, n)).copy_from(&qp.a);
            for i in 0..p_eq {
                kkt[(n + i, n + i)] = -reg;
            }
        }
        let lu = kkt.clone().lu();
        let mut exact = kkt;
        for i in 0..n {
            exact[(i, i)] -= reg;
        }
        for i in 0..p_eq {
            exact[(n + i, n + i)] = 0.0;
        }

        let solve_dir = |rc: &DVector<f64>, rcl: &DVector<f64>, rcu: &DVector<f64>| -> Option<Direction> {
            // Inequality blocks fold into the first block row.
            let tg = DVector::from_fn(m, |i, _| (-rc[i] + it.z[i] * ri[i]) / it.s[i]);
            let tl = DVector::from_fn(ml, |k, _| (-rcl[k] + it.zl[k] * ril[k]) / it.sl[k]);
            let tu = DVector::from_fn(mu, |k, _| (-rcu[k] + it.zu[k] * riu[k]) / it.su[k]);
            let mut rhs1 = -&rd - qp.g.transpose() * &tg;
            for (k, &i) in lo.iter().enumerate() {
                rhs1[i] += tl[k];
            }
            for (k, &i) in up.iter().enumerate() {
                rhs1[i] -= tu[k];
            }
            let mut rhs = DVector::zeros(dim);
            rhs.rows_mut(0, n).copy_from(&rhs1);
            rhs.rows_mut(n, p_eq).copy_from(&(-&rp));
            let mut sol = lu.solve(&rhs)?;
            // One step of iterative refinement against the unregularized system.
            let res = &rhs - &exact * &sol;
            if let Some(corr) = lu.solve(&res) {
                sol += corr;
            }
            let dx = sol.rows(0, n).into_owned();
            let dy = sol.rows(n, p_eq).into_owned();
            let gdx = &qp.g * &dx;
            let ds = -&ri - &gdx;
            let dz = DVector::from_fn(m, |i, _| w[i] * gdx[i] + tg[i]);
            let dsl = DVector::from_fn(ml, |k, _| -ril[k] + dx[lo[k]]);
            let dzl = DVector::from_fn(ml, |k, _| -(it.zl[k] / it.sl[k]) * dx[lo[k]] + tl[k]);
            let dsu = DVector::from_fn(mu, |k, _| -riu[k] - dx[up[k]]);
            let dzu = DVector::from_fn(mu, |k, _| (it.zu[k] / it.su[k]) * dx[up[k]] + tu[k]);
            Some(Direction { dx, dy, ds, dz, dsl, dzl, dsu, dzu })
        };
        let step_len = |d: &Direction| {
            max_step(&it.s, &d.ds)
                .min(max_step(&it.z, &d.dz))
                .min(max_step(&it.sl, &d.dsl))
                .min(max_step(&it.zl, &d.dzl))
                .min(max_step(&it.su, &d.dsu))
                .min(max_step(&it.zu, &d.dzu))
        };

        // Predictor.
        let rc = it.s.component_mul(&it.z);
        let rcl = it.sl.component_mul(&it.zl);
        let rcu = it.su.component_mul(&it.zu);
        let Some(aff) = solve_dir(&rc, &rcl, &rcu) else { break };
        let alpha_aff = step_len(&aff);
        let mu_aff = if total_ineq > 0.0 {
            ((&it.s + alpha_aff * &aff.ds).dot(&(&it.z + alpha_aff * &aff.dz))
                + (&it.sl + alpha_aff * &aff.dsl).dot(&(&it.zl + alpha_aff * &aff.dzl))
                + (&it.su + alpha_aff * &aff.dsu).dot(&(&it.zu + alpha_aff * &aff.dzu)))
                / total_ineq
        } else {
            0.0
        };
        let sigma = if mu_c > 0.0 { (mu_aff / mu_c).clamp(0.0, 1.0).powi(3) } else { 0.0 };
        // Corrector.
        let target = sigma * mu_c;
        let rc = DVector::from_fn(m, |i, _| it.s[i] * it.z[i] + aff.ds[i] * aff.dz[i] - target);
        let rcl = DVector::from_fn(ml, |k, _| it.sl[k] * it.zl[k] + aff.dsl[k] * aff.dzl[k] - target);
        let rcu = DVector::from_fn(mu, |k, _| it.su[k] * it.zu[k] + aff.dsu[k] * aff.dzu[k] - target);
        let Some(d) = solve_dir(&rc, &rcl, &rcu) else { break };
        let alpha = (0.99 * step_len(&d)).min(1.0);
        it.x += alpha * &d.dx;
        it.y += alpha * &d.dy;
        it.s += alpha * &d.ds;
        it.z += alpha * &d.dz;
        it.sl += alpha * &d.dsl;
        it.zl += alpha * &d.dzl;
        it.su += alpha * &d.dsu;
        it.zu += alpha * &d.dzu;
    }
    if let Some((b, iter)) = best {
        if best_residual <= settings.acceptable_tolerance * scale {
            if let Some(polished) = polish(qp, &b, &lo, &up, iter) {
                if polished.kkt_residual <= best_residual {
                    return Ok(polished);
                }
            }
            return Ok(unpack(qp, &b, &lo, &up, iter, best_residual));
        }
    }
    Err(Error::NumericalFailure {
        what: "QP interior point",
        iterations: settings.max_iterations,
        estimate: best_residual,
    })
}

/// Minimizes total violation; returns a certificate if it is bounded away from zero.
fn phase_one(qp: &QuadraticProgram, settings: &QpSettings) -> Result<Option<InfeasibilityCertificate>> {
    let n = qp.dim();
    let p_eq = qp.a.nrows();
    let m = qp.g.nrows();
    // Variables: [x (n), v⁺ (p), v⁻ (p), w (m)].
    let nt = n + 2 * p_eq + m;
    let mut p = DMatrix::zeros(nt, nt);
    for i in 0..n {
        p[(i, i)] = 1e-10;
    }
    let mut c = DVector::zeros(nt);
    for i in n..nt {
        c[i] = 1.0;
    }
    let mut a = DMatrix::zeros(p_eq, nt);
    a.view_mut((0, 0), (p_eq, n)).copy_from(&qp.a);
    for i in 0..p_eq {
        a[(i, n + i)] = 1.0;
        a[(i, n + p_eq + i)] = -1.0;
    }
    let mut g = DMatrix::zeros(m, nt);
    g.view_mut((0, 0), (m, n)).copy_from(&qp.g);
    for i in 0..m {
        g[(i, n + 2 * p_eq + i)] = -1.0;
    }
    let mut lower = DVector::zeros(nt);
    let mut upper = DVector::from_element(nt, f64::INFINITY);
    for i in 0..n {
        lower[i] = qp.lower[i];
        upper[i] = qp.upper[i];
    }
    let lp = QuadraticProgram {
        p,
        c,
        a,
        b: qp.b.clone(),
        g,
        h: qp.h.clone(),
        lower,
        upper,
    };
    let sol = interior_point(&lp, &QpSettings { max_iterations: settings.max_iterations.max(200), ..*settings })?;
    let violation = sol.x.rows(n, nt - n).sum();
    if violation <= 1e-7 * (1.0 + qp.b.amax().max(qp.h.amax())) {
        return Ok(None);
    }
    Ok(Some(InfeasibilityCertificate {
        y: sol.y,
        z: sol.z,
        z_lower: sol.z_lower.rows(0, n).into_owned(),
        z_upper: sol.z_upper.rows(0, n).into_owned(),
        violation,
    }))
}
