//! Trajectory-level risk: the Boole sum of per-waypoint bounds, the linearized
//! Gaussian robustness constraint, and the `γ + δ ≤ Δ` budget.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::RobotModel;
use crate::shadow::{risk_bound_for_link, BoundRegime, RiskBound, RiskSettings, UncertainObstacle};
use crate::stats::{normal_cdf, normal_pdf};

/// Floor on `RᵀΣ_qR`; the robustness constraint becomes a step function below it.
pub const Z_VARIANCE_FLOOR: f64 = 1e-24;

/// Nominal trajectory with its tracking covariance and risk allocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPlan {
    /// State at each waypoint `0..=T`; the leading entries are the robot configuration.
    pub waypoints: Vec<DVector<f64>>,
    /// Control applied between consecutive waypoints (`T` entries, possibly empty vectors).
    pub controls: Vec<DVector<f64>>,
    /// Covariance of the stacked `(T + 1)·n` state vector.
    pub tracking_covariance: DMatrix<f64>,
    pub delta: f64,
    pub gamma: f64,
    pub budget: f64,
}

impl TrajectoryPlan {
    pub fn horizon(&self) -> usize {
        self.waypoints.len().saturating_sub(1)
    }

    pub fn state_dim(&self) -> usize {
        self.waypoints.first().map_or(0, |w| w.len())
    }

    pub fn stacked(&self) -> DVector<f64> {
        let n = self.state_dim();
        DVector::from_fn(self.waypoints.len() * n, |i, _| self.waypoints[i / n][i % n])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        if self.waypoints.is_empty() || self.waypoints.iter().any(|w| w.len() != n) {
            return Err(Error::InvalidProblem("waypoints must share one dimension".into()));
        }
        let dim = n * self.waypoints.len();
        let cov = &self.tracking_covariance;
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: cov.nrows(),
            });
        }
        check_psd(cov)?;
        if !(self.delta >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::InvalidProblem("risk allocation must be nonnegative".into()));
        }
        if self.gamma + self.delta > self.budget + 1e-9 {
            return Err(Error::InvalidProblem(format!(
                "allocation γ + δ = {} exceeds budget {}",
                self.gamma + self.delta,
                self.budget
            )));
        }
        Ok(())
    }
}

/// Symmetric (within 1e-9) and positive semi-definite.
pub fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidCovariance("covariance must be square".into()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidCovariance("covariance has non-finite entries".into()));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-9 {
        return Err(Error::InvalidCovariance(format!(
            "covariance is not symmetric (residual {asym:e})"
        )));
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let eig = m.clone().symmetric_eigenvalues();
    let top = eig.max().max(0.0);
    if eig.min() < -1e-12f64.max(1e-9 * top) {
        return Err(Error::InvalidCovariance(format!(
            "covariance has negative eigenvalue {:e}",
            eig.min()
        )));
    }
    Ok(())
}

/// One `(waypoint, obstacle, link)` bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkRisk {
    pub waypoint: usize,
    pub obstacle: usize,
    pub link: usize,
    pub epsilon: f64,
    pub regime: BoundRegime,
    /// Shadow scale `s` with `ε = P(χ² > s²)`.
    pub scale: f64,
    /// `∂ε/∂q` over the robot configuration.
    pub gradient: Vec<f64>,
    pub nominal_distance: f64,
    /// `∂(nominal distance)/∂q` over the robot configuration.
    pub nominal_gradient: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEvaluation {
    pub waypoints: usize,
    pub obstacles: usize,
    pub links: usize,
    /// Flattened `(waypoint, obstacle, link)` bounds in row-major order.
    pub entries: Vec<LinkRisk>,
    pub total_nominal_risk: f64,
    /// Gradient of the total risk over the stacked state vector.
    pub gradient: DVector<f64>,
    pub z_variance: f64,
}

impl RiskEvaluation {
    pub fn epsilon(&self, waypoint: usize, obstacle: usize, link: usize) -> f64 {
        self.entries[(waypoint * self.obstacles + obstacle) * self.links + link].epsilon
    }

    /// Per-(waypoint, obstacle) risk, summed over links.
    pub fn waypoint_obstacle_risk(&self, waypoint: usize, obstacle: usize) -> f64 {
        (0..self.links).map(|l| self.epsilon(waypoint, obstacle, l)).sum()
    }
}

/// Evaluates every link/obstacle bound along the plan (Boole sum over all of them).
pub fn evaluate_nominal_risk(
    plan: &TrajectoryPlan,
    robot: &RobotModel,
    obstacles: &[UncertainObstacle],
    settings: &RiskSettings,
) -> Result<RiskEvaluation> {
    let n = plan.state_dim();
    let nq = robot.dof();
    if n < nq {
        return Err(Error::DimensionMismatch { expected: nq, got: n });
    }
    let links = robot.links().len();
    let states = plan
        .waypoints
        .iter()
        .map(|w| robot.forward_kinematics(&w.as_slice()[..nq]))
        .collect::<Result<Vec<_>>>()?;
    let triples: Vec<(usize, usize, usize)> = (0..plan.waypoints.len())
        .flat_map(|t| (0..obstacles.len()).flat_map(move |o| (0..links).map(move |l| (t, o, l))))
        .collect();
    let bounds: Vec<Result<RiskBound>> = triples
        .par_iter()
        .map(|&(t, o, l)| {
            risk_bound_for_link(&robot.links()[l].shape, &states[t][l], &obstacles[o], settings).map_err(
                |e| Error::RiskContext {
                    waypoint: t,
                    obstacle: o,
                    link: l,
                    source: Box::new(e),
                },
            )
        })
        .collect();
    let mut entries = Vec::with_capacity(triples.len());
    let mut gradient = DVector::zeros(plan.waypoints.len() * n);
    let mut total = 0.0;
    for (&(t, o, l), b) in triples.iter().zip(bounds) {
        let b = b?;
        total += b.epsilon;
        for (i, g) in b.gradient.iter().enumerate() {
            gradient[t * n + i] += g;
        }
        entries.push(LinkRisk {
            waypoint: t,
            obstacle: o,
            link: l,
            epsilon: b.epsilon,
            regime: b.regime,
            scale: b.scale,
            gradient: b.gradient.as_slice().to_vec(),
            nominal_distance: b.nominal_distance,
            nominal_gradient: b.nominal_gradient.as_slice().to_vec(),
        });
    }
    let z_variance = if plan.tracking_covariance.nrows() == gradient.len() {
        (gradient.transpose() * &plan.tracking_covariance * &gradient)[(0, 0)].max(0.0)
    } else {
        0.0
    };
    Ok(RiskEvaluation {
        waypoints: plan.waypoints.len(),
        obstacles: obstacles.len(),
        links,
        entries,
        total_nominal_risk: total,
        gradient,
        z_variance,
    })
}

/// Value and gradients of `Φ((δ − Σε) / σ_z)`, required to be at least `1 − γ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustConstraint {
    pub value: f64,
    pub sigma_z: f64,
    /// Gaussian density of `N(0, σ_z²)` at `δ − Σε`.
    pub d_delta: f64,
    /// `∂value/∂q̄` over the stacked state, holding `R` fixed.
    pub d_states: DVector<f64>,
    pub satisfied: bool,
}

pub fn evaluate_robust_constraint(plan: &TrajectoryPlan, eval: &RiskEvaluation) -> RobustConstraint {
    robust_constraint_from(plan.delta, plan.gamma, eval.total_nominal_risk, eval.z_variance, &eval.gradient)
}

pub(crate) fn robust_constraint_from(
    delta: f64,
    gamma: f64,
    total: f64,
    z_variance: f64,
    r: &DVector<f64>,
) -> RobustConstraint {
    let sigma_z = z_variance.max(Z_VARIANCE_FLOOR).sqrt();
    let arg = (delta - total) / sigma_z;
    let value = normal_cdf(arg);
    let d_delta = normal_pdf(arg) / sigma_z;
    RobustConstraint {
        value,
        sigma_z,
        d_delta,
        d_states: -d_delta * r,
        satisfied: value >= 1.0 - gamma,
    }
}

/// `Δ − γ − δ`; the allocation is feasible iff this is nonnegative.
pub fn risk_budget_residual(plan: &TrajectoryPlan) -> f64 {
    plan.budget - plan.gamma - plan.delta
}

/// `(waypoint, obstacle, ε)` rows with per-link risks summed.
pub fn risk_trace(eval: &RiskEvaluation) -> Vec<(usize, usize, f64)> {
    let mut rows = Vec::with_capacity(eval.waypoints * eval.obstacles);
    for t in 0..eval.waypoints {
        for o in 0..eval.obstacles {
            rows.push((t, o, eval.waypoint_obstacle_risk(t, o)));
        }
    }
    rows
}
