//! Versioned JSON scenario files.
//!
//! A scenario names a robot, uncertain obstacles, dynamics, horizon, risk budget,
//! tracking covariance and start/goal sets. See `scenarios/` for complete examples.

use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Matrix3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::geometry::ConvexShape;
use crate::kinematics::RobotSpec;
use crate::risk::check_psd;
use crate::scp::{ObjectiveKind, ProblemSpec, SolverSettings, StateBox, WaypointConstraint};
use crate::shadow::{RiskSettings, UncertainObstacle};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub shape: ConvexShape,
    /// 2x2 (planar) or 3x3 position covariance; omitted for a known obstacle.
    #[serde(default)]
    pub covariance: Option<Vec<Vec<f64>>>,
    /// Degrees of freedom of the position error; defaults to the covariance rank.
    #[serde(default)]
    pub dof: Option<u32>,
}

/// Covariance of the stacked waypoint vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CovarianceSpec {
    Zero,
    /// Full `(T + 1)·n` square matrix.
    Dense { matrix: Vec<Vec<f64>> },
    /// One `n × n` block repeated on the diagonal. The start waypoint gets the block
    /// only when `include_start` is set.
    BlockDiagonal {
        block: Vec<Vec<f64>>,
        #[serde(default)]
        include_start: bool,
    },
}

/// Either an exact state or a per-coordinate box; `null` bounds are unbounded.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSetSpec {
    #[serde(default)]
    pub state: Option<Vec<f64>>,
    #[serde(default)]
    pub lower: Option<Vec<Option<f64>>>,
    #[serde(default)]
    pub upper: Option<Vec<Option<f64>>>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskOverrides {
    #[serde(default)]
    pub eps_min: Option<f64>,
    #[serde(default)]
    pub eps_max: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: u64,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    pub robot: RobotSpec,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    /// Dynamics block; its `dt` defaults to the scenario `dt`.
    #[serde(default)]
    pub dynamics: Option<Value>,
    pub horizon: usize,
    pub dt: f64,
    pub budget: f64,
    #[serde(default = "zero_covariance")]
    pub tracking_covariance: CovarianceSpec,
    pub start: StateSetSpec,
    pub goal: StateSetSpec,
    #[serde(default = "default_objective")]
    pub objective: ObjectiveKind,
    #[serde(default)]
    pub constraints: Vec<WaypointConstraint>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub risk: RiskOverrides,
}

fn zero_covariance() -> CovarianceSpec {
    CovarianceSpec::Zero
}

fn default_objective() -> ObjectiveKind {
    ObjectiveKind::FullState
}

fn matrix_from_rows(rows: &[Vec<f64>], path: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != n {
            return Err(Error::schema(format!("{path}[{i}]"), format!("expected {n} columns, found {}", r.len())));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::schema(format!("{path}[{i}][{j}]"), "entry must be finite"));
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn psd_at(m: &DMatrix<f64>, path: &str) -> Result<()> {
    check_psd(m).map_err(|e| Error::schema(path, e.to_string()))
}

fn state_box(spec: &StateSetSpec, n: usize, path: &str) -> Result<StateBox> {
    let check_len = |len: usize, field: &str| {
        if len == n {
            Ok(())
        } else {
            Err(Error::schema(format!("{path}.{field}"), format!("expected {n} entries, found {len}")))
        }
    };
    match (&spec.state, &spec.lower, &spec.upper) {
        (Some(s), None, None) => {
            check_len(s.len(), "state")?;
            Ok(StateBox::fixed(s))
        }
        (None, Some(l), Some(u)) => {
            check_len(l.len(), "lower")?;
            check_len(u.len(), "upper")?;
            let lower: Vec<f64> = l.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect();
            let upper: Vec<f64> = u.iter().map(|v| v.unwrap_or(f64::INFINITY)).collect();
            if let Some(i) = (0..n).find(|&i| !(lower[i] <= upper[i])) {
                return Err(Error::schema(format!("{path}.lower[{i}]"), "lower bound exceeds upper bound"));
            }
            Ok(StateBox { lower, upper })
        }
        _ => Err(Error::schema(path, "give either `state` or both `lower` and `upper`")),
    }
}

fn obstacle(spec: &ObstacleSpec, path: &str) -> Result<UncertainObstacle> {
    let o = match &spec.covariance {
        None => UncertainObstacle::certain(spec.shape.clone()),
        Some(rows) => {
            let m = matrix_from_rows(rows, &format!("{path}.covariance"))?;
            match m.nrows() {
                2 => UncertainObstacle::planar(spec.shape.clone(), Matrix2::from_fn(|i, j| m[(i, j)])),
                3 => UncertainObstacle::new(spec.shape.clone(), Matrix3::from_fn(|i, j| m[(i, j)])),
                k => return Err(Error::schema(format!("{path}.covariance"), format!("expected 2x2 or 3x3, found {k}x{k}"))),
            }
        }
    }
    .map_err(|e| Error::schema(format!("{path}.covariance"), e.to_string()))?;
    match spec.dof {
        Some(d) => o.with_dof(d).map_err(|e| Error::schema(format!("{path}.dof"), e.to_string())),
        None => Ok(o),
    }
}

fn tracking_covariance(spec: &CovarianceSpec, n: usize, horizon: usize) -> Result<DMatrix<f64>> {
    let dim = n * (horizon + 1);
    let path = "tracking_covariance";
    let m = match spec {
        CovarianceSpec::Zero => DMatrix::zeros(dim, dim),
        CovarianceSpec::Dense { matrix } => {
            let m = matrix_from_rows(matrix, &format!("{path}.matrix"))?;
            if m.nrows() != dim {
                return Err(Error::schema(
                    format!("{path}.matrix"),
                    format!("expected {dim}x{dim} for {} waypoints of {n} states", horizon + 1),
                ));
            }
            m
        }
        CovarianceSpec::BlockDiagonal { block, include_start } => {
            let b = matrix_from_rows(block, &format!("{path}.block"))?;
            if b.nrows() != n {
                return Err(Error::schema(format!("{path}.block"), format!("expected {n}x{n}")));
            }
            psd_at(&b, &format!("{path}.block"))?;
            let mut m = DMatrix::zeros(dim, dim);
            let first = if *include_start { 0 } else { 1 };
            for t in first..=horizon {
                m.view_mut((t * n, t * n), (n, n)).copy_from(&b);
            }
            m
        }
    };
    psd_at(&m, path)?;
    Ok(m)
}

impl ScenarioFile {
    /// Parses and schema-checks scenario JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::schema("$", "scenario must be a JSON object"))?;
        match obj.get("version") {
            None => {
                return Err(Error::UnsupportedVersion(
                    "scenario has no `version`; files predating version 1 (single risk budget without allocation) are not supported".into(),
                ))
            }
            Some(v) if v.as_u64() != Some(SCHEMA_VERSION) => {
                return Err(Error::UnsupportedVersion(format!("scenario version {v}; expected {SCHEMA_VERSION}")))
            }
            Some(_) => {}
        }
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::schema(path, e.into_inner().to_string())
        })
    }

    /// Builds and validates the optimization problem.
    pub fn to_problem(&self) -> Result<ProblemSpec> {
        let robot = self.robot.build().map_err(|e| match e {
            Error::Schema { path, message } => Error::schema(format!("robot.{path}"), message),
            other => Error::schema("robot", other.to_string()),
        })?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::schema("dt", "must be positive"));
        }
        if self.horizon < 1 {
            return Err(Error::schema("horizon", "must be at least 1"));
        }
        if !(self.budget > 0.0 && self.budget < 1.0) {
            return Err(Error::schema("budget", "must lie in (0, 1)"));
        }
        let dynamics = match &self.dynamics {
            None => DynamicsModel::None,
            Some(v) => {
                let mut v = v.clone();
                if let Some(obj) = v.as_object_mut() {
                    match obj.get("dt").and_then(Value::as_f64) {
                        Some(dt) if (dt - self.dt).abs() > 1e-12 => {
                            return Err(Error::schema("dynamics.dt", "differs from the scenario dt"))
                        }
                        _ => {}
                    }
                    let is_none = obj.get("model").and_then(Value::as_str) == Some("none");
                    if !is_none {
                        obj.insert("dt".into(), Value::from(self.dt));
                    }
                }
                let model: DynamicsModel = serde_path_to_error::deserialize(v)
                    .map_err(|e| Error::schema(format!("dynamics.{}", e.path()), e.into_inner().to_string()))?;
                model.validate().map_err(|e| Error::schema("dynamics", e.to_string()))?;
                model
            }
        };
        let obstacles = self
            .obstacles
            .iter()
            .enumerate()
            .map(|(i, o)| obstacle(o, &format!("obstacles[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let n = robot.dof() + dynamics.extra_state_dim();
        let start = state_box(&self.start, n, "start")?;
        let goal = state_box(&self.goal, n, "goal")?;
        let tracking = tracking_covariance(&self.tracking_covariance, n, self.horizon)?;
        let mut risk = RiskSettings::default();
        if let Some(e) = self.risk.eps_min {
            risk.eps_min = e;
        }
        if let Some(e) = self.risk.eps_max {
            risk.eps_max = e;
        }
        if !(risk.eps_min > 0.0 && risk.eps_min < risk.eps_max && risk.eps_max < 1.0) {
            return Err(Error::schema("risk", "need 0 < eps_min < eps_max < 1"));
        }
        let spec = ProblemSpec {
            robot,
            obstacles,
            dynamics,
            horizon: self.horizon,
            dt: self.dt,
            start,
            goal,
            budget: self.budget,
            tracking_covariance: tracking,
            objective: self.objective,
            constraints: self.constraints.clone(),
            risk,
            solver: self.solver,
        };
        spec.validate().map_err(|e| Error::schema("$", e.to_string()))?;
        Ok(spec)
    }
}

/// Reads, schema-checks and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ProblemSpec> {
    load_scenario_file(path)?.to_problem()
}

pub fn load_scenario_file(path: impl AsRef<Path>) -> Result<ScenarioFile> {
    let text = std::fs::read_to_string(path)?;
    ScenarioFile::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Value {
        serde_json::json!({
            "version": 1,
            "robot": {
                "joints": [
                    {"name": "x", "type": "prismatic", "axis": [1, 0, 0]},
                    {"name": "y", "type": "prismatic", "axis": [0, 1, 0], "parent": "x"}
                ],
                "links": [{"name": "body", "joint": "y", "shape": {"type": "disk", "radius": 0.2}}]
            },
            "obstacles": [
                {"shape": {"type": "disk", "radius": 0.5, "center": [2.5, 1.0]}, "covariance": [[0.01, 0], [0, 0.01]]}
            ],
            "horizon": 4,
            "dt": 0.5,
            "budget": 0.1,
            "tracking_covariance": {"type": "block_diagonal", "block": [[1e-4, 0], [0, 1e-4]]},
            "start": {"state": [0, 0]},
            "goal": {"lower": [5, null], "upper": [5, null]}
        })
    }

    fn parse(v: &Value) -> Result<ProblemSpec> {
        ScenarioFile::from_json(&v.to_string())?.to_problem()
    }

    #[test]
    fn minimal_scenario_loads() {
        let p = parse(&minimal()).unwrap();
        assert_eq!(p.horizon, 4);
        assert_eq!(p.obstacles[0].dof(), 2);
        assert_eq!(p.tracking_covariance.nrows(), 10);
        assert_eq!(p.tracking_covariance[(0, 0)], 0.0);
        assert_eq!(p.tracking_covariance[(2, 2)], 1e-4);
        assert_eq!(p.goal.upper[1], f64::INFINITY);
        assert_eq!(p.dynamics, DynamicsModel::None);
    }

    #[test]
    fn missing_version_is_unsupported() {
        let mut v = minimal();
        v.as_object_mut().unwrap().remove("version");
        assert!(matches!(parse(&v), Err(Error::UnsupportedVersion(_))));
        v["version"] = Value::from(0);
        assert!(matches!(parse(&v), Err(Error::UnsupportedVersion(_))));
    }

    #[test]
    fn schema_errors_carry_paths() {
        let mut v = minimal();
        v["obstacles"][0]["covariance"] = serde_json::json!([[0.01, 0.2], [0.2, 0.01]]);
        match parse(&v) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "obstacles[0].covariance"),
            other => panic!("{other:?}"),
        }
        let mut v = minimal();
        v["horizon"] = Value::from("four");
        match parse(&v) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "horizon"),
            other => panic!("{other:?}"),
        }
        let mut v = minimal();
        v["start"] = serde_json::json!({"state": [0, 0, 0]});
        match parse(&v) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "start.state"),
            other => panic!("{other:?}"),
        }
        let mut v = minimal();
        v["tracking_covariance"] = serde_json::json!({"type": "block_diagonal", "block": [[-1, 0], [0, 1]]});
        match parse(&v) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "tracking_covariance.block"),
            other => panic!("{other:?}"),
        }
        let mut v = minimal();
        v["unexpected"] = Value::from(1);
        assert!(matches!(parse(&v), Err(Error::Schema { .. })));
    }

    #[test]
    fn dynamics_takes_scenario_dt() {
        let mut v = minimal();
        v["robot"] = serde_json::json!({
            "joints": [{"name": "base", "type": "planar"}],
            "links": [{"name": "car", "joint": "base", "shape": {"type": "box", "half_extents": [2.25, 0.9, 0.0]}}]
        });
        v["dynamics"] = serde_json::json!({"model": "bicycle", "l_r": 1.4, "l_f": 1.4});
        v["tracking_covariance"] = serde_json::json!({"type": "zero"});
        v["start"] = serde_json::json!({"state": [0, 0, 0, 0]});
        v["goal"] = serde_json::json!({"state": [5, 0, 0, 0]});
        let p = parse(&v).unwrap();
        match p.dynamics {
            DynamicsModel::Bicycle(b) => assert_eq!(b.dt, 0.5),
            other => panic!("{other:?}"),
        }
        v["dynamics"]["dt"] = Value::from(0.1);
        assert!(matches!(parse(&v), Err(Error::Schema { .. })));
    }
}
