//! Trust-region sequential convex programming for the chance-constrained
//! trajectory problem, with joint allocation of the risk budget.
//!
//! Decision vector: `[q_0 … q_T, u_0 … u_{T−1}, δ, γ]`. Each iteration linearizes
//! dynamics, the robustness constraint and nominal-clearance hinges at the current
//! iterate, solves a QP whose nonlinear constraints are elastic (L1-penalized), and
//! accepts or rejects the step on the exact-penalty merit.

use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::dynamics::{DynamicsModel, TransitionLinearization};
use crate::error::{Error, Result};
use crate::kinematics::RobotModel;
use crate::qp::{solve_qp, QpOutcome, QpSettings, QuadraticProgram};
use crate::risk::{
    check_psd, evaluate_nominal_risk, robust_constraint_from, RiskEvaluation, TrajectoryPlan,
    Z_VARIANCE_FLOOR,
};
use crate::shadow::{shadow_scale, RiskSettings, UncertainObstacle};
use crate::stats::normal_pdf;

/// Per-coordinate box on a waypoint state; equal bounds pin the coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StateBox {
    pub fn fixed(state: &[f64]) -> Self {
        Self {
            lower: state.to_vec(),
            upper: state.to_vec(),
        }
    }

    /// Midpoint, or the finite side when only one bound is finite.
    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| match (l.is_finite(), u.is_finite()) {
                (true, true) => 0.5 * (l + u),
                (true, false) => l,
                (false, true) => u,
                (false, false) => 0.0,
            })
            .collect()
    }
}

/// Linear inequality `coefficients · q_t ≤ bound` on one waypoint (or on all when `waypoint` is `None`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaypointConstraint {
    #[serde(default)]
    pub waypoint: Option<usize>,
    pub coefficients: Vec<f64>,
    pub bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `0.5 Σ ‖q_{t+1} − q_t‖²` over the whole state.
    FullState,
    /// As above over robot configuration coordinates only (excludes e.g. speed).
    PoseOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub initial_trust_radius: f64,
    pub min_trust_radius: f64,
    pub max_trust_radius: f64,
    pub initial_penalty: f64,
    pub max_penalty: f64,
    /// Step ∞-norm at which an accepted, feasible iterate is declared converged.
    pub step_tolerance: f64,
    /// Tolerance on dynamics residuals and the robustness constraint.
    pub feasibility_tolerance: f64,
    /// Accept a step when actual/predicted merit reduction is at least this.
    pub accept_ratio: f64,
    /// Grow the trust region when the ratio exceeds this.
    pub expand_ratio: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            initial_trust_radius: 1.0,
            min_trust_radius: 1e-8,
            max_trust_radius: 10.0,
            initial_penalty: 10.0,
            max_penalty: 1e8,
            step_tolerance: 1e-5,
            feasibility_tolerance: 1e-6,
            accept_ratio: 0.1,
            expand_ratio: 0.75,
        }
    }
}

/// The chance-constrained trajectory problem.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub robot: RobotModel,
    pub obstacles: Vec<UncertainObstacle>,
    pub dynamics: DynamicsModel,
    pub horizon: usize,
    pub dt: f64,
    pub start: StateBox,
    pub goal: StateBox,
    /// Total risk budget `Δ`.
    pub budget: f64,
    /// Covariance of the stacked `(T + 1)·n` state vector.
    pub tracking_covariance: DMatrix<f64>,
    pub objective: ObjectiveKind,
    pub constraints: Vec<WaypointConstraint>,
    pub risk: RiskSettings,
    pub solver: SolverSettings,
}

impl ProblemSpec {
    pub fn state_dim(&self) -> usize {
        self.robot.dof() + self.dynamics.extra_state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    /// Per-state-coordinate limits (robot joints, then dynamics extras).
    pub fn state_limits(&self) -> Vec<(f64, f64)> {
        let mut l = self.robot.limits();
        l.extend(self.dynamics.extra_state_bounds());
        l
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        if self.horizon < 1 {
            return Err(Error::InvalidProblem("horizon must be at least 1".into()));
        }
        if !(self.budget > 0.0 && self.budget < 1.0) {
            return Err(Error::InvalidProblem(format!("budget {} outside (0, 1)", self.budget)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidProblem("dt must be positive".into()));
        }
        self.dynamics.validate()?;
        self.dynamics.check_layout(self.robot.dof())?;
        for (name, b) in [("start", &self.start), ("goal", &self.goal)] {
            if b.lower.len() != n || b.upper.len() != n {
                return Err(Error::InvalidProblem(format!("{name} box must have {n} entries")));
            }
            if b.lower.iter().zip(&b.upper).any(|(l, u)| !(l <= u)) {
                return Err(Error::InvalidProblem(format!("{name} box has lower > upper")));
            }
        }
        let dim = n * (self.horizon + 1);
        if self.tracking_covariance.shape() != (dim, dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: self.tracking_covariance.nrows(),
            });
        }
        check_psd(&self.tracking_covariance)?;
        for c in &self.constraints {
            if c.coefficients.len() != n || c.waypoint.is_some_and(|t| t > self.horizon) {
                return Err(Error::InvalidProblem("malformed waypoint constraint".into()));
            }
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let n = self.state_dim();
        let m = self.control_dim();
        let t = self.horizon;
        Layout {
            n,
            m,
            t,
            nx: (t + 1) * n + t * m + 2,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    n: usize,
    m: usize,
    t: usize,
    nx: usize,
}

impl Layout {
    fn q(&self, t: usize, i: usize) -> usize {
        t * self.n + i
    }
    fn u(&self, t: usize, j: usize) -> usize {
        (self.t + 1) * self.n + t * self.m + j
    }
    fn delta(&self) -> usize {
        self.nx - 2
    }
    fn gamma(&self) -> usize {
        self.nx - 1
    }
    fn state<'a>(&self, x: &'a DVector<f64>, t: usize) -> &'a [f64] {
        &x.as_slice()[t * self.n..(t + 1) * self.n]
    }
    fn control<'a>(&self, x: &'a DVector<f64>, t: usize) -> &'a [f64] {
        let s = self.u(t, 0);
        &x.as_slice()[s..s + self.m]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    /// Joint allocation of `(δ, γ)` against environment and tracking uncertainty.
    Scora,
    /// Environment-only baseline: `Σε ≤ Δ`, `δ = Δ`, `γ = 0`.
    EpsOpt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub trust_radius: f64,
    pub penalty: f64,
    pub merit: f64,
    pub candidate_merit: f64,
    pub predicted_reduction: f64,
    pub objective: f64,
    pub dynamics_violation: f64,
    pub chance_violation: f64,
    pub clearance_violation: f64,
    pub total_risk: f64,
    pub delta: f64,
    pub gamma: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub plan: TrajectoryPlan,
    pub objective: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub log: Vec<IterationLog>,
    pub risk: RiskEvaluation,
    /// `Φ((δ − Σε)/σ_z)` at the returned plan.
    pub chance_value: f64,
    pub dynamics_residual: f64,
    pub mode: SolveMode,
}

/// `Φ⁻¹(1 − γ)`, accurate for tiny `γ`.
fn upper_quantile(gamma: f64) -> f64 {
    SQRT_2 * erfc_inv(2.0 * gamma)
}

/// Everything the subproblem needs at one iterate.
struct Linearization {
    objective: f64,
    risk: RiskEvaluation,
    transitions: Vec<TransitionLinearization>,
    /// Value of the (quantile-form) robustness constraint, `≤ 0` when satisfied.
    chance: f64,
    /// `∂chance/∂q` over the stacked states, including the spread term `z(γ) ∂σ_z/∂q`.
    chance_gradient: DVector<f64>,
    sigma_z: f64,
    /// Hinge pairs: `(waypoint, entry index, margin − nominal distance)`.
    hinges: Vec<(usize, usize, f64)>,
    linear: Vec<f64>,
}

impl Linearization {
    fn dynamics_l1(&self) -> f64 {
        self.transitions.iter().map(|t| t.residual.iter().map(|v| v.abs()).sum::<f64>()).sum()
    }
    fn dynamics_inf(&self) -> f64 {
        self.transitions.iter().map(|t| t.residual.amax()).fold(0.0, f64::max)
    }
    fn hinge_sum(&self) -> f64 {
        self.hinges.iter().map(|h| h.2.max(0.0)).sum()
    }
    fn linear_sum(&self) -> f64 {
        self.linear.iter().map(|v| v.max(0.0)).sum()
    }
    fn violation(&self) -> f64 {
        self.dynamics_l1() + self.chance.max(0.0) + self.hinge_sum() + self.linear_sum()
    }
    fn merit(&self, mu: f64) -> f64 {
        self.objective + mu * self.violation()
    }
    fn feasible(&self, tol: f64) -> bool {
        self.dynamics_inf() <= tol
            && self.chance <= tol
            && self.hinges.iter().all(|h| h.2 <= tol)
            && self.linear.iter().all(|v| *v <= tol)
    }
}

struct Solver<'a> {
    spec: &'a ProblemSpec,
    mode: SolveMode,
    lay: Layout,
    weights: Vec<f64>,
    p: DMatrix<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    /// Trust-region scale per variable.
    scale: DVector<f64>,
    /// Nominal-clearance margin per obstacle.
    margins: Vec<f64>,
    covariance: DMatrix<f64>,
}

impl<'a> Solver<'a> {
    fn new(spec: &'a ProblemSpec, mode: SolveMode) -> Result<Self> {
        spec.validate()?;
        let lay = spec.layout();
        let (n, t) = (lay.n, lay.t);
        let nq = spec.robot.dof();
        let weights: Vec<f64> = (0..n)
            .map(|i| match spec.objective {
                ObjectiveKind::FullState => 1.0,
                ObjectiveKind::PoseOnly if i < nq => 1.0,
                ObjectiveKind::PoseOnly => 0.0,
            })
            .collect();
        let mut p = DMatrix::zeros(lay.nx, lay.nx);
        for k in 0..t {
            for i in 0..n {
                let (a, b) = (lay.q(k, i), lay.q(k + 1, i));
                p[(a, a)] += weights[i];
                p[(b, b)] += weights[i];
                p[(a, b)] -= weights[i];
                p[(b, a)] -= weights[i];
            }
        }
        let limits = spec.state_limits();
        let cb = spec.dynamics.control_bounds();
        let mut lower = DVector::from_element(lay.nx, f64::NEG_INFINITY);
        let mut upper = DVector::from_element(lay.nx, f64::INFINITY);
        for k in 0..=t {
            for i in 0..n {
                let (mut l, mut u) = limits[i];
                if k == 0 {
                    l = l.max(spec.start.lower[i]);
                    u = u.min(spec.start.upper[i]);
                }
                if k == t {
                    l = l.max(spec.goal.lower[i]);
                    u = u.min(spec.goal.upper[i]);
                }
                if l > u {
                    return Err(Error::InvalidProblem(format!(
                        "waypoint {k} coordinate {i}: start/goal box outside limits"
                    )));
                }
                lower[lay.q(k, i)] = l;
                upper[lay.q(k, i)] = u;
            }
            if k < t {
                for (j, (l, u)) in cb.iter().enumerate() {
                    lower[lay.u(k, j)] = *l;
                    upper[lay.u(k, j)] = *u;
                }
            }
        }
        let budget = spec.budget;
        match mode {
            SolveMode::Scora => {
                lower[lay.delta()] = 1e-6;
                upper[lay.delta()] = budget;
                lower[lay.gamma()] = 1e-6;
                upper[lay.gamma()] = budget;
            }
            SolveMode::EpsOpt => {
                lower[lay.delta()] = budget;
                upper[lay.delta()] = budget;
                lower[lay.gamma()] = 0.0;
                upper[lay.gamma()] = 0.0;
            }
        }
        let mut scale = DVector::from_element(lay.nx, 1.0);
        scale[lay.delta()] = budget;
        scale[lay.gamma()] = budget;
        let margins = spec
            .obstacles
            .iter()
            .map(|o| {
                if o.is_certain() {
                    return Ok(1e-4);
                }
                let width = o.covariance().symmetric_eigenvalues().max().max(0.0).sqrt();
                Ok(2.0 * shadow_scale(spec.risk.eps_max, o.dof())? * width + 1e-4)
            })
            .collect::<Result<Vec<_>>>()?;
        let covariance = match mode {
            SolveMode::Scora => spec.tracking_covariance.clone(),
            SolveMode::EpsOpt => DMatrix::zeros(spec.tracking_covariance.nrows(), spec.tracking_covariance.ncols()),
        };
        Ok(Self {
            spec,
            mode,
            lay,
            weights,
            p,
            lower,
            upper,
            scale,
            margins,
            covariance,
        })
    }

    fn initial_guess(&self) -> DVector<f64> {
        let lay = self.lay;
        let a = self.spec.start.center();
        let b = self.spec.goal.center();
        let mut x = DVector::zeros(lay.nx);
        for k in 0..=lay.t {
            let s = k as f64 / lay.t as f64;
            for i in 0..lay.n {
                x[lay.q(k, i)] = a[i] + s * (b[i] - a[i]);
            }
        }
        match self.mode {
            SolveMode::Scora => {
                x[lay.delta()] = 0.5 * self.spec.budget;
                x[lay.gamma()] = 0.5 * self.spec.budget;
            }
            SolveMode::EpsOpt => {
                x[lay.delta()] = self.spec.budget;
                x[lay.gamma()] = 0.0;
            }
        }
        self.project(&mut x);
        x
    }

    fn project(&self, x: &mut DVector<f64>) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let lay = self.lay;
        let mut f = 0.0;
        for k in 0..lay.t {
            for i in 0..lay.n {
                let d = x[lay.q(k + 1, i)] - x[lay.q(k, i)];
                f += 0.5 * self.weights[i] * d * d;
            }
        }
        f
    }

    fn plan_of(&self, x: &DVector<f64>) -> TrajectoryPlan {
        let lay = self.lay;
        TrajectoryPlan {
            waypoints: (0..=lay.t).map(|k| DVector::from_column_slice(lay.state(x, k))).collect(),
            controls: (0..lay.t).map(|k| DVector::from_column_slice(lay.control(x, k))).collect(),
            tracking_covariance: self.covariance.clone(),
            delta: x[lay.delta()],
            gamma: x[lay.gamma()],
            budget: self.spec.budget,
        }
    }

    fn linearize(&self, x: &DVector<f64>) -> Result<Linearization> {
        let lay = self.lay;
        let plan = self.plan_of(x);
        let risk = evaluate_nominal_risk(&plan, &self.spec.robot, &self.spec.obstacles, &self.spec.risk)?;
        let transitions: Vec<TransitionLinearization> = (0..lay.t)
            .map(|k| self.spec.dynamics.linearize(lay.state(x, k), lay.control(x, k), lay.state(x, k + 1)))
            .collect();
        let sigma_z = risk.z_variance.max(Z_VARIANCE_FLOOR).sqrt();
        let (delta, gamma) = (x[lay.delta()], x[lay.gamma()]);
        let chance = match self.mode {
            SolveMode::Scora => risk.total_nominal_risk + sigma_z * upper_quantile(gamma) - delta,
            SolveMode::EpsOpt => risk.total_nominal_risk - delta,
        };
        let chance_gradient = match self.mode {
            SolveMode::Scora if risk.z_variance > Z_VARIANCE_FLOOR => {
                risk.gradient.clone() + upper_quantile(gamma) * self.spread_gradient(x, &risk, sigma_z)?
            }
            _ => risk.gradient.clone(),
        };
        let hinges = risk
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.nominal_distance < 2.0 * self.margins[e.obstacle])
            .map(|(idx, e)| (e.waypoint, idx, self.margins[e.obstacle] - e.nominal_distance))
            .collect();
        let linear = self.linear_values(x);
        Ok(Linearization {
            objective: self.objective(x),
            risk,
            transitions,
            chance,
            chance_gradient,
            sigma_z,
            hinges,
            linear,
        })
    }

    /// `∂σ_z/∂q = H Σ_q ∇R / σ_z`, with the Hessian-vector product taken as a directional
    /// difference of `∇R`.
    fn spread_gradient(&self, x: &DVector<f64>, risk: &RiskEvaluation, sigma_z: f64) -> Result<DVector<f64>> {
        let dir = &self.covariance * &risk.gradient / sigma_z;
        let scale = dir.amax();
        if scale == 0.0 {
            return Ok(DVector::zeros(dir.len()));
        }
        let h = 1e-4 / scale;
        let mut shifted = x.clone();
        for (i, v) in dir.iter().enumerate() {
            shifted[i] += h * v;
        }
        let ahead = evaluate_nominal_risk(&self.plan_of(&shifted), &self.spec.robot, &self.spec.obstacles, &self.spec.risk)?;
        Ok((ahead.gradient - &risk.gradient) / h)
    }

    /// Rows of the extra linear constraints (and heading-rate bounds) as `(t, coeffs, bound)`.
    fn linear_rows(&self) -> Vec<Vec<(usize, f64)>> {
        let lay = self.lay;
        let mut rows = Vec::new();
        for c in &self.spec.constraints {
            let ts: Vec<usize> = match c.waypoint {
                Some(t) => vec![t],
                None => (0..=lay.t).collect(),
            };
            for t in ts {
                rows.push(
                    c.coefficients
                        .iter()
                        .enumerate()
                        .filter(|(_, a)| **a != 0.0)
                        .map(|(i, a)| (lay.q(t, i), *a))
                        .collect(),
                );
            }
        }
        if let Some((i, w)) = self.spec.dynamics.heading_rate_bound() {
            let _ = w;
            for t in 0..lay.t {
                rows.push(vec![(lay.q(t + 1, i), 1.0), (lay.q(t, i), -1.0)]);
                rows.push(vec![(lay.q(t + 1, i), -1.0), (lay.q(t, i), 1.0)]);
            }
        }
        rows
    }

    fn linear_bounds(&self) -> Vec<f64> {
        let mut b = Vec::new();
        for c in &self.spec.constraints {
            let count = if c.waypoint.is_some() { 1 } else { self.lay.t + 1 };
            b.extend(std::iter::repeat(c.bound).take(count));
        }
        if let Some((_, w)) = self.spec.dynamics.heading_rate_bound() {
            b.extend(std::iter::repeat(w).take(2 * self.lay.t));
        }
        b
    }

    fn linear_values(&self, x: &DVector<f64>) -> Vec<f64> {
        self.linear_rows()
            .iter()
            .zip(self.linear_bounds())
            .map(|(row, b)| row.iter().map(|(j, a)| a * x[*j]).sum::<f64>() - b)
            .collect()
    }

    /// Builds and solves the convex subproblem; returns the candidate and model merit.
    /// Dynamics residuals (row order of the transitions) followed by the chance value.
    fn nonlinear_values(&self, lin: &Linearization) -> DVector<f64> {
        let mut v: Vec<f64> = lin.transitions.iter().flat_map(|t| t.residual.iter().copied()).collect();
        v.push(lin.chance);
        DVector::from_vec(v)
    }

    /// The subproblem's linear models of [`Self::nonlinear_values`], evaluated at `y`.
    fn model_values(&self, x: &DVector<f64>, lin: &Linearization, y: &DVector<f64>) -> DVector<f64> {
        let lay = self.lay;
        let d = y - x;
        let mut v = Vec::new();
        for (k, tr) in lin.transitions.iter().enumerate() {
            for (row, &si) in tr.rows.iter().enumerate() {
                let mut m = tr.residual[row] + d[lay.q(k + 1, si)];
                for i in 0..lay.n {
                    m -= tr.d_state[(row, i)] * d[lay.q(k, i)];
                }
                for j in 0..lay.m {
                    m -= tr.d_control[(row, j)] * d[lay.u(k, j)];
                }
                v.push(m);
            }
        }
        let mut c = lin.chance + lin.chance_gradient.dot(&d.rows(0, lin.chance_gradient.len())) - d[lay.delta()];
        if self.mode == SolveMode::Scora {
            c -= lin.sigma_z / normal_pdf(upper_quantile(x[lay.gamma()])) * d[lay.gamma()];
        }
        v.push(c);
        DVector::from_vec(v)
    }

    fn subproblem(
        &self,
        x: &DVector<f64>,
        lin: &Linearization,
        mu: f64,
        rho: f64,
        shift: Option<&DVector<f64>>,
    ) -> Result<Option<(DVector<f64>, f64)>> {
        let lay = self.lay;
        let nx = lay.nx;
        let shift_of = |i: usize| shift.map_or(0.0, |v| v[i]);
        let dyn_rows: usize = lin.transitions.iter().map(|t| t.rows.len()).sum();
        let lin_rows = self.linear_rows();
        let lin_b = self.linear_bounds();
        let nh = lin.hinges.len();
        let nl = lin_rows.len();
        // Elastic variables: dynamics (dyn_rows), chance (1), hinges (nh), linear (nl).
        let nt = nx + dyn_rows + 1 + nh + nl;
        let mut p = DMatrix::zeros(nt, nt);
        p.view_mut((0, 0), (nx, nx)).copy_from(&self.p);
        let mut c = DVector::zeros(nt);
        for i in nx..nt {
            c[i] = mu;
        }
        let rows = 2 * dyn_rows + 1 + nh + nl + 1;
        let mut g = DMatrix::zeros(rows, nt);
        let mut h = DVector::zeros(rows);
        let mut r = 0;
        let mut slack = nx;
        // Dynamics: |h̄ + J (x − x̄)| ≤ t.
        for (k, tr) in lin.transitions.iter().enumerate() {
            for (row, &si) in tr.rows.iter().enumerate() {
                let mut coeffs: Vec<(usize, f64)> = vec![(lay.q(k + 1, si), 1.0)];
                for i in 0..lay.n {
                    let v = tr.d_state[(row, i)];
                    if v != 0.0 {
                        coeffs.push((lay.q(k, i), -v));
                    }
                }
                for j in 0..lay.m {
                    let v = tr.d_control[(row, j)];
                    if v != 0.0 {
                        coeffs.push((lay.u(k, j), -v));
                    }
                }
                let jx: f64 = coeffs.iter().map(|(i, a)| a * x[*i]).sum();
                let offset = tr.residual[row] + shift_of(slack - nx) - jx;
                for sign in [1.0, -1.0] {
                    for (i, a) in &coeffs {
                        g[(r, *i)] += sign * a;
                    }
                    g[(r, slack)] = -1.0;
                    h[r] = -sign * offset;
                    r += 1;
                }
                slack += 1;
            }
        }
        // Robustness constraint, linearized at the iterate.
        {
            let (gamma, delta) = (x[lay.gamma()], x[lay.delta()]);
            let mut coeffs: Vec<(usize, f64)> = lin
                .chance_gradient
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, *v))
                .collect();
            coeffs.push((lay.delta(), -1.0));
            if self.mode == SolveMode::Scora {
                let z = upper_quantile(gamma);
                coeffs.push((lay.gamma(), -lin.sigma_z / normal_pdf(z)));
            }
            let jx: f64 = coeffs.iter().map(|(i, a)| a * x[*i]).sum();
            for (i, a) in &coeffs {
                g[(r, *i)] += a;
            }
            g[(r, slack)] = -1.0;
            h[r] = jx - lin.chance - shift_of(slack - nx);
            let _ = delta;
            r += 1;
            slack += 1;
        }
        // Nominal clearance hinges: margin − (sd + ∇sd·(q − q̄)) ≤ t.
        for &(t, idx, value) in &lin.hinges {
            let e = &lin.risk.entries[idx];
            let mut jx = 0.0;
            for (i, gv) in e.nominal_gradient.iter().enumerate() {
                let col = lay.q(t, i);
                g[(r, col)] -= gv;
                jx += gv * x[col];
            }
            g[(r, slack)] = -1.0;
            h[r] = -value - jx;
            r += 1;
            slack += 1;
        }
        for (row, b) in lin_rows.iter().zip(&lin_b) {
            for (i, a) in row {
                g[(r, *i)] += a;
            }
            g[(r, slack)] = -1.0;
            h[r] = *b;
            r += 1;
            slack += 1;
        }
        // Budget.
        g[(r, lay.delta())] = 1.0;
        g[(r, lay.gamma())] = 1.0;
        h[r] = self.spec.budget.max(x[lay.delta()] + x[lay.gamma()]);
        debug_assert_eq!(r + 1, rows);
        debug_assert_eq!(slack, nt);

        let mut lower = DVector::zeros(nt);
        let mut upper = DVector::from_element(nt, f64::INFINITY);
        for i in 0..nx {
            let (l, u) = (self.lower[i], self.upper[i]);
            if l == u {
                lower[i] = l;
                upper[i] = u;
                continue;
            }
            let (lo, hi) = if i == lay.gamma() {
                // The quantile term is strongly curved near zero; bound γ multiplicatively.
                let f = rho.clamp(0.5, 2.0).exp();
                (x[i] / f, x[i] * f)
            } else {
                let tr = rho * self.scale[i];
                (x[i] - tr, x[i] + tr)
            };
            lower[i] = l.max(lo).min(x[i]);
            upper[i] = u.min(hi).max(x[i]);
        }
        let qp = QuadraticProgram::new(p, c).with_inequalities(g, h).with_bounds(lower, upper);
        let settings = QpSettings {
            acceptable_tolerance: 1e-6,
            ..QpSettings::default()
        };
        match solve_qp(&qp, &settings) {
            Ok(QpOutcome::Optimal(sol)) => {
                let mut cand = sol.x.rows(0, nx).into_owned();
                self.project(&mut cand);
                let model = self.objective(&cand) + mu * sol.x.rows(nx, nt - nx).iter().map(|v| v.max(0.0)).sum::<f64>();
                Ok(Some((cand, model)))
            }
            Ok(QpOutcome::Infeasible(_)) | Err(Error::NumericalFailure { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn solve(&self, initial: Option<DVector<f64>>) -> Result<SolveResult> {
        let s = &self.spec.solver;
        let mut x = match initial {
            Some(x0) => {
                if x0.len() != self.lay.nx {
                    return Err(Error::DimensionMismatch {
                        expected: self.lay.nx,
                        got: x0.len(),
                    });
                }
                let mut x0 = x0;
                self.project(&mut x0);
                x0
            }
            None => self.initial_guess(),
        };
        let mut lin = self.linearize(&x)?;
        let mut mu = s.initial_penalty;
        let mut rho = s.initial_trust_radius;
        let mut log = Vec::new();
        let mut status = SolveStatus::MaxIter;
        let tol = s.feasibility_tolerance;
        let mut iterations = 0;
        for iter in 0..s.max_iterations {
            iterations = iter + 1;
            let merit = lin.merit(mu);
            let outcome = self.subproblem(&x, &lin, mu, rho, None)?;
            let Some((cand, model)) = outcome else {
                log.push(IterationLog {
                    iteration: iter,
                    trust_radius: rho,
                    penalty: mu,
                    merit,
                    candidate_merit: f64::NAN,
                    predicted_reduction: f64::NAN,
                    objective: lin.objective,
                    dynamics_violation: lin.dynamics_inf(),
                    chance_violation: lin.chance.max(0.0),
                    clearance_violation: lin.hinge_sum(),
                    total_risk: lin.risk.total_nominal_risk,
                    delta: x[self.lay.delta()],
                    gamma: x[self.lay.gamma()],
                    step_norm: 0.0,
                    accepted: false,
                });
                rho *= 0.5;
                if rho < s.min_trust_radius {
                    status = if lin.feasible(tol) { SolveStatus::Converged } else { SolveStatus::Infeasible };
                    break;
                }
                continue;
            };
            let predicted = merit - model;
            let step = (&cand - &x).amax();
            let mut entry = IterationLog {
                iteration: iter,
                trust_radius: rho,
                penalty: mu,
                merit,
                candidate_merit: f64::NAN,
                predicted_reduction: predicted,
                objective: lin.objective,
                dynamics_violation: lin.dynamics_inf(),
                chance_violation: lin.chance.max(0.0),
                clearance_violation: lin.hinge_sum(),
                total_risk: lin.risk.total_nominal_risk,
                delta: x[self.lay.delta()],
                gamma: x[self.lay.gamma()],
                step_norm: step,
                accepted: false,
            };
            let stalled = predicted <= 1e-10 * (1.0 + merit.abs()) || step <= s.step_tolerance;
            if stalled {
                log.push(entry);
                if lin.feasible(tol) {
                    status = SolveStatus::Converged;
                    break;
                }
                mu *= 10.0;
                if mu > s.max_penalty {
                    status = SolveStatus::Infeasible;
                    break;
                }
                rho = rho.max(s.initial_trust_radius * 0.1);
                continue;
            }
            let mut cand = cand;
            let mut cand_lin = self.linearize(&cand)?;
            let mut cand_merit = cand_lin.merit(mu);
            let mut ratio = (merit - cand_merit) / predicted;
            if ratio < s.accept_ratio {
                // Second-order correction: re-solve with the constraint models shifted by
                // their linearization error at the candidate.
                let shift = self.nonlinear_values(&cand_lin) - self.model_values(&x, &lin, &cand);
                if let Some((soc, _)) = self.subproblem(&x, &lin, mu, rho, Some(&shift))? {
                    let soc_lin = self.linearize(&soc)?;
                    let soc_merit = soc_lin.merit(mu);
                    let soc_ratio = (merit - soc_merit) / predicted;
                    if soc_ratio > ratio {
                        cand = soc;
                        cand_lin = soc_lin;
                        cand_merit = soc_merit;
                        ratio = soc_ratio;
                    }
                }
            }
            entry.candidate_merit = cand_merit;
            if ratio >= s.accept_ratio && cand_merit <= merit {
                entry.accepted = true;
                log.push(entry);
                x = cand;
                lin = cand_lin;
                if ratio >= s.expand_ratio {
                    rho = (rho * 1.5).min(s.max_trust_radius);
                }
                if step <= s.step_tolerance && lin.feasible(tol) {
                    status = SolveStatus::Converged;
                    break;
                }
            } else {
                log.push(entry);
                rho *= 0.5;
                if rho < s.min_trust_radius {
                    status = if lin.feasible(tol) { SolveStatus::Converged } else { SolveStatus::Infeasible };
                    break;
                }
            }
        }
        let plan = self.plan_of(&x);
        let chance = robust_constraint_from(plan.delta, plan.gamma, lin.risk.total_nominal_risk, lin.risk.z_variance, &lin.risk.gradient);
        let chance_value = match self.mode {
            SolveMode::Scora => chance.value,
            SolveMode::EpsOpt => {
                if lin.risk.total_nominal_risk <= plan.delta + tol {
                    1.0
                } else {
                    0.0
                }
            }
        };
        Ok(SolveResult {
            objective: lin.objective,
            iterations,
            status,
            log,
            chance_value,
            dynamics_residual: lin.dynamics_inf(),
            risk: lin.risk,
            plan,
            mode: self.mode,
        })
    }
}

/// Solves the joint-allocation problem; `initial_guess` is the full decision vector.
pub fn solve_scora(spec: &ProblemSpec, initial_guess: Option<DVector<f64>>) -> Result<SolveResult> {
    Solver::new(spec, SolveMode::Scora)?.solve(initial_guess)
}

/// Environment-only baseline (`Σ_q` ignored, `δ = Δ`, `γ = 0`).
pub fn solve_eps_opt(spec: &ProblemSpec, initial_guess: Option<DVector<f64>>) -> Result<SolveResult> {
    Solver::new(spec, SolveMode::EpsOpt)?.solve(initial_guess)
}

pub fn solve(spec: &ProblemSpec, mode: SolveMode, initial_guess: Option<DVector<f64>>) -> Result<SolveResult> {
    Solver::new(spec, mode)?.solve(initial_guess)
}

/// Straight-line initial decision vector for `spec` under `mode`.
pub fn default_initial_guess(spec: &ProblemSpec, mode: SolveMode) -> Result<DVector<f64>> {
    Ok(Solver::new(spec, mode)?.initial_guess())
}

/// Objective `0.5 Σ ‖q_{t+1} − q_t‖²` (weighted per `spec.objective`) of a plan.
pub fn plan_objective(spec: &ProblemSpec, plan: &TrajectoryPlan) -> f64 {
    let nq = spec.robot.dof();
    let mut f = 0.0;
    for w in plan.waypoints.windows(2) {
        for i in 0..w[0].len() {
            if spec.objective == ObjectiveKind::PoseOnly && i >= nq {
                continue;
            }
            let d = w[1][i] - w[0][i];
            f += 0.5 * d * d;
        }
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ConvexShape, Pose};
    use crate::monte_carlo::{estimate_risk, ValidationConfig};
    use nalgebra::{Matrix2, Vector3};

    fn point_spec(obstacles: Vec<UncertainObstacle>, sigma_q: f64, budget: f64) -> ProblemSpec {
        let t = 10;
        let n = 2;
        let mut cov = DMatrix::zeros((t + 1) * n, (t + 1) * n);
        for i in n..(t + 1) * n {
            cov[(i, i)] = sigma_q * sigma_q;
        }
        ProblemSpec {
            robot: RobotModel::point_2d(ConvexShape::disk(0.2)),
            obstacles,
            dynamics: DynamicsModel::None,
            horizon: t,
            dt: 0.1,
            start: StateBox::fixed(&[0.0, 0.0]),
            goal: StateBox::fixed(&[5.0, 2.0]),
            budget,
            tracking_covariance: cov,
            objective: ObjectiveKind::FullState,
            constraints: Vec::new(),
            risk: RiskSettings::default(),
            solver: SolverSettings::default(),
        }
    }

    fn disk_obstacle(center: [f64; 2], radius: f64, sigma: f64) -> UncertainObstacle {
        let shape = ConvexShape::disk(radius).transformed(Pose::from_translation(Vector3::new(center[0], center[1], 0.0)));
        UncertainObstacle::planar(shape, Matrix2::identity() * sigma * sigma).unwrap()
    }

    #[test]
    fn free_space_is_straight_line() {
        let spec = point_spec(Vec::new(), 0.0, 0.1);
        let res = solve_scora(&spec, None).unwrap();
        assert_eq!(res.status, SolveStatus::Converged);
        assert!(res.iterations <= 5, "{} iterations", res.iterations);
        let exact = 0.5 * (25.0 + 4.0) / 10.0;
        assert!((res.objective - exact).abs() <= 1e-6);
        for (k, w) in res.plan.waypoints.iter().enumerate() {
            let s = k as f64 / 10.0;
            assert!((w[0] - 5.0 * s).abs() < 1e-6 && (w[1] - 2.0 * s).abs() < 1e-6);
        }
    }

    #[test]
    fn avoids_uncertain_disk_and_respects_budget() {
        let obs = disk_obstacle([2.5, 1.0], 0.5, 0.1);
        let spec = point_spec(vec![obs], 0.02, 0.1);
        let res = solve_scora(&spec, None).unwrap();
        assert_eq!(res.status, SolveStatus::Converged);
        assert!(res.dynamics_residual <= 1e-5);
        assert!(res.plan.delta + res.plan.gamma <= spec.budget + 1e-9);
        assert!(res.chance_value >= 1.0 - res.plan.gamma - 1e-4);
        assert!(res.risk.total_nominal_risk <= res.plan.delta + 1e-6);
        assert!(res.objective > 0.5 * 29.0 / 10.0);
        // Every waypoint stays out of the nominal disk.
        for e in &res.risk.entries {
            assert!(e.nominal_distance > 0.0);
        }
        let mut plan = res.plan.clone();
        plan.tracking_covariance = spec.tracking_covariance.clone();
        let mc = estimate_risk(&plan, &spec.robot, &spec.obstacles, &ValidationConfig::default()).unwrap();
        assert!(mc.estimate.p_hat <= spec.budget + 2.0 * mc.estimate.standard_error, "{:?}", mc.estimate);
    }

    #[test]
    fn accepted_steps_never_raise_merit() {
        let obs = disk_obstacle([2.5, 1.0], 0.5, 0.1);
        let spec = point_spec(vec![obs], 0.02, 0.1);
        let res = solve_scora(&spec, None).unwrap();
        for e in res.log.iter().filter(|e| e.accepted) {
            assert!(e.candidate_merit <= e.merit + 1e-12, "{e:?}");
        }
    }

    #[test]
    fn repeated_solves_are_identical() {
        let obs = disk_obstacle([2.5, 1.2], 0.4, 0.08);
        let spec = point_spec(vec![obs], 0.02, 0.05);
        let a = solve_scora(&spec, None).unwrap();
        let b = solve_scora(&spec, None).unwrap();
        assert_eq!(format!("{:?}", a.log), format!("{:?}", b.log));
        assert_eq!(a.plan, b.plan);
    }

    #[test]
    fn zero_tracking_noise_matches_baseline() {
        let obs = disk_obstacle([2.5, 1.0], 0.5, 0.1);
        let spec = point_spec(vec![obs], 0.0, 0.1);
        let a = solve_scora(&spec, None).unwrap();
        let b = solve_eps_opt(&spec, None).unwrap();
        assert_eq!(a.status, SolveStatus::Converged);
        assert_eq!(b.status, SolveStatus::Converged);
        assert!((a.objective - b.objective).abs() <= 1e-6, "{} vs {}", a.objective, b.objective);
    }

    #[test]
    fn baseline_pins_allocation() {
        let obs = disk_obstacle([2.5, 1.0], 0.5, 0.1);
        let spec = point_spec(vec![obs], 0.05, 0.1);
        let b = solve_eps_opt(&spec, None).unwrap();
        assert_eq!(b.plan.delta, 0.1);
        assert_eq!(b.plan.gamma, 0.0);
        assert!(b.plan.tracking_covariance.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tracking_noise_costs_objective() {
        let obs = disk_obstacle([2.5, 1.0], 0.5, 0.1);
        let spec = point_spec(vec![obs], 0.05, 0.1);
        let a = solve_scora(&spec, None).unwrap();
        let b = solve_eps_opt(&spec, None).unwrap();
        assert_eq!(a.status, SolveStatus::Converged);
        assert!(b.objective <= a.objective + 1e-6);
    }

    #[test]
    fn rejects_bad_budget_and_guess() {
        let mut spec = point_spec(Vec::new(), 0.0, 0.1);
        spec.budget = 1.5;
        assert!(solve_scora(&spec, None).is_err());
        spec.budget = 0.1;
        assert!(matches!(
            solve_scora(&spec, Some(DVector::zeros(3))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn upper_quantile_is_accurate_in_the_tail() {
        assert!((upper_quantile(0.025) - 1.959963984540054).abs() < 1e-12);
        assert!((upper_quantile(1e-12) - 7.034483825301131).abs() < 1e-9);
    }
}
