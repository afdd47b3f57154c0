//! Solve → validate → report, with CSV/JSON artifacts.
//!
//! Exit codes: [`EXIT_OK`] when the solver converged and the Monte Carlo estimate
//! is within `Δ + 2 SE`; [`EXIT_INFEASIBLE`] when no converged plan was found;
//! [`EXIT_VALIDATION`] when sampling rejects a converged plan; [`EXIT_IO`] for
//! unreadable or malformed inputs and unwritable outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monte_carlo::{configuration_risk_oracle, estimate_risk, MonteCarloReport, ValidationConfig};
use crate::risk::{risk_trace, TrajectoryPlan};
use crate::scp::{solve, IterationLog, ProblemSpec, SolveMode, SolveResult, SolveStatus};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_IO: i32 = 4;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const RISK_TRACE_FILE: &str = "risk_trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HISTOGRAM_FILE: &str = "mc_histogram.csv";
pub const TRIALS_FILE: &str = "mc_trials.csv";
pub const ORACLE_FILE: &str = "oracle.csv";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub trials: usize,
    pub upsample_waypoints: usize,
    pub seed: u64,
    pub collisions: usize,
    pub failures: usize,
    pub p_hat: f64,
    pub standard_error: f64,
    /// `Δ + 2 SE`.
    pub threshold: f64,
    pub passed: bool,
}

/// Contents of `summary.json`. `runtime_seconds` is the only field that varies
/// between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub mode: SolveMode,
    pub status: SolveStatus,
    pub iterations: usize,
    pub objective: f64,
    pub budget: f64,
    pub delta: f64,
    pub gamma: f64,
    pub delta_plus_gamma: f64,
    pub total_nominal_risk: f64,
    pub chance_value: f64,
    pub dynamics_residual: f64,
    pub monte_carlo: Option<MonteCarloSummary>,
    pub exit_code: i32,
    pub runtime_seconds: f64,
}

impl Summary {
    pub fn from_solve(scenario: &str, result: &SolveResult, runtime_seconds: f64) -> Self {
        let plan = &result.plan;
        let mut s = Self {
            scenario: scenario.to_string(),
            mode: result.mode,
            status: result.status,
            iterations: result.iterations,
            objective: result.objective,
            budget: plan.budget,
            delta: plan.delta,
            gamma: plan.gamma,
            delta_plus_gamma: plan.delta + plan.gamma,
            total_nominal_risk: result.risk.total_nominal_risk,
            chance_value: result.chance_value,
            dynamics_residual: result.dynamics_residual,
            monte_carlo: None,
            exit_code: EXIT_OK,
            runtime_seconds,
        };
        s.exit_code = s.compute_exit_code();
        s
    }

    pub fn attach_monte_carlo(&mut self, report: &MonteCarloReport, config: &ValidationConfig) {
        let e = report.estimate;
        let threshold = self.budget + 2.0 * e.standard_error;
        self.monte_carlo = Some(MonteCarloSummary {
            trials: e.trials,
            upsample_waypoints: config.upsample_waypoints,
            seed: config.rng_seed,
            collisions: e.collisions,
            failures: e.failures,
            p_hat: e.p_hat,
            standard_error: e.standard_error,
            threshold,
            passed: e.p_hat <= threshold && e.failures == 0,
        });
        self.exit_code = self.compute_exit_code();
    }

    fn compute_exit_code(&self) -> i32 {
        if self.status != SolveStatus::Converged {
            return EXIT_INFEASIBLE;
        }
        match &self.monte_carlo {
            Some(mc) if !mc.passed => EXIT_VALIDATION,
            _ => EXIT_OK,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Solves and times one scenario.
pub fn solve_timed(spec: &ProblemSpec, mode: SolveMode) -> Result<(SolveResult, f64)> {
    let start = Instant::now();
    let result = solve(spec, mode, None)?;
    Ok((result, start.elapsed().as_secs_f64()))
}

/// Monte Carlo validation under the scenario's tracking covariance, whatever covariance
/// the plan itself was optimized with.
pub fn validate_plan(spec: &ProblemSpec, plan: &TrajectoryPlan, config: &ValidationConfig) -> Result<MonteCarloReport> {
    let mut plan = plan.clone();
    plan.tracking_covariance = spec.tracking_covariance.clone();
    estimate_risk(&plan, &spec.robot, &spec.obstacles, config)
}

/// Straight line between the centers of the start and goal sets, with zero controls.
pub fn straight_line_plan(spec: &ProblemSpec) -> TrajectoryPlan {
    let a = DVector::from_vec(spec.start.center());
    let b = DVector::from_vec(spec.goal.center());
    let t_max = spec.horizon as f64;
    TrajectoryPlan {
        waypoints: (0..=spec.horizon).map(|t| &a + (&b - &a) * (t as f64 / t_max)).collect(),
        controls: (0..spec.horizon).map(|_| DVector::zeros(spec.control_dim())).collect(),
        tracking_covariance: spec.tracking_covariance.clone(),
        delta: spec.budget,
        gamma: 0.0,
        budget: spec.budget,
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(csv_error)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::schema("csv", format!("{other:?}")),
    }
}

/// Columns `t, time, q0.., u0..`; the last row leaves the controls empty.
pub fn write_trajectory_csv(path: &Path, plan: &TrajectoryPlan, dt: f64) -> Result<()> {
    let n = plan.state_dim();
    let m = plan.controls.first().map_or(0, |u| u.len());
    let mut w = csv_writer(path)?;
    let mut header = vec!["t".to_string(), "time".to_string()];
    header.extend((0..n).map(|i| format!("q{i}")));
    header.extend((0..m).map(|j| format!("u{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for (t, q) in plan.waypoints.iter().enumerate() {
        let mut row = vec![t.to_string(), (t as f64 * dt).to_string()];
        row.extend(q.iter().map(f64::to_string));
        match plan.controls.get(t) {
            Some(u) => row.extend(u.iter().map(f64::to_string)),
            None => row.extend((0..m).map(|_| String::new())),
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Waypoints and controls of a stored trajectory.
pub type StoredTrajectory = (Vec<DVector<f64>>, Vec<DVector<f64>>);

/// Reads waypoints and controls written by [`write_trajectory_csv`].
pub fn read_trajectory_csv(path: &Path, spec: &ProblemSpec) -> Result<StoredTrajectory> {
    let n = spec.state_dim();
    let m = spec.control_dim();
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let headers = r.headers().map_err(csv_error)?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::schema(format!("trajectory.{name}"), "missing column"))
    };
    let q_cols = (0..n).map(|i| column(&format!("q{i}"))).collect::<Result<Vec<_>>>()?;
    let u_cols = (0..m).map(|j| column(&format!("u{j}"))).collect::<Result<Vec<_>>>()?;
    let mut waypoints = Vec::new();
    let mut controls = Vec::new();
    for (row, record) in r.records().enumerate() {
        let record = record.map_err(csv_error)?;
        let cell = |c: usize| -> Result<Option<f64>> {
            let s = record.get(c).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::schema(format!("trajectory[{row}]"), format!("not a number: {s:?}")))
        };
        let q = q_cols
            .iter()
            .map(|&c| cell(c)?.ok_or_else(|| Error::schema(format!("trajectory[{row}]"), "empty state cell")))
            .collect::<Result<Vec<_>>>()?;
        waypoints.push(DVector::from_vec(q));
        let u = u_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        if u.iter().all(Option::is_some) && row < spec.horizon {
            controls.push(DVector::from_iterator(m, u.into_iter().flatten()));
        }
    }
    if waypoints.len() != spec.horizon + 1 {
        return Err(Error::schema(
            "trajectory",
            format!("expected {} waypoints, found {}", spec.horizon + 1, waypoints.len()),
        ));
    }
    if controls.len() != spec.horizon {
        return Err(Error::schema("trajectory", "controls missing"));
    }
    Ok((waypoints, controls))
}

/// Columns `t, obstacle, epsilon`, summed over links.
pub fn write_risk_trace_csv(path: &Path, result: &SolveResult) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", "obstacle", "epsilon"]).map_err(csv_error)?;
    for (t, o, e) in risk_trace(&result.risk) {
        w.write_record([t.to_string(), o.to_string(), e.to_string()]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `trial, collided, first_collision, failed`; `first_collision` is an index
/// into the up-sampled path and empty when the trial is collision-free.
pub fn write_trials_csv(path: &Path, report: &MonteCarloReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["trial", "collided", "first_collision", "failed"]).map_err(csv_error)?;
    for r in &report.records {
        w.write_record([
            r.trial.to_string(),
            u8::from(r.collided).to_string(),
            r.first_collision.map(|i| i.to_string()).unwrap_or_default(),
            u8::from(r.failed).to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// First-collision counts per up-sampled configuration: `index, time, count`.
pub fn write_histogram_csv(path: &Path, report: &MonteCarloReport, spec: &ProblemSpec, points: usize) -> Result<()> {
    let duration = spec.horizon as f64 * spec.dt;
    let mut w = csv_writer(path)?;
    w.write_record(["index", "time", "count"]).map_err(csv_error)?;
    for (i, c) in report.histogram(points).into_iter().enumerate() {
        let time = if points > 1 { duration * i as f64 / (points - 1) as f64 } else { 0.0 };
        w.write_record([i.to_string(), time.to_string(), c.to_string()]).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_iterations_jsonl(path: &Path, log: &[IterationLog]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for entry in log {
        serde_json::to_writer(&mut w, entry)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    fs::write(path, summary.to_json()?)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::schema(format!("summary.{}", e.path()), e.into_inner().to_string()))
}

/// Where a run writes, plus the optional iteration log.
#[derive(Clone, Debug)]
pub struct OutputPaths {
    pub dir: PathBuf,
    pub iteration_log: Option<PathBuf>,
}

impl OutputPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            iteration_log: None,
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

/// Solves and writes the trajectory, risk trace, iteration log and summary (without
/// Monte Carlo). Returns the summary and the solver result.
pub fn run_solve(name: &str, spec: &ProblemSpec, mode: SolveMode, out: &OutputPaths) -> Result<(Summary, SolveResult)> {
    fs::create_dir_all(&out.dir)?;
    let (result, runtime) = solve_timed(spec, mode)?;
    write_trajectory_csv(&out.file(TRAJECTORY_FILE), &result.plan, spec.dt)?;
    write_risk_trace_csv(&out.file(RISK_TRACE_FILE), &result)?;
    if let Some(log) = &out.iteration_log {
        write_iterations_jsonl(log, &result.log)?;
    }
    let summary = Summary::from_solve(name, &result, runtime);
    write_summary(&out.file(SUMMARY_FILE), &summary)?;
    Ok((summary, result))
}

/// Samples `plan`, writes the trial and histogram CSVs, and folds the estimate into `summary`.
pub fn run_validation(
    spec: &ProblemSpec,
    plan: &TrajectoryPlan,
    config: &ValidationConfig,
    summary: &mut Summary,
    out: &OutputPaths,
) -> Result<MonteCarloReport> {
    fs::create_dir_all(&out.dir)?;
    let report = validate_plan(spec, plan, config)?;
    write_trials_csv(&out.file(TRIALS_FILE), &report)?;
    write_histogram_csv(&out.file(HISTOGRAM_FILE), &report, spec, config.upsample_waypoints)?;
    summary.attach_monte_carlo(&report, config);
    write_summary(&out.file(SUMMARY_FILE), summary)?;
    Ok(report)
}

/// Full solve → validate → report run. Validation is skipped when the solver did not
/// converge.
pub fn run_pipeline(
    name: &str,
    spec: &ProblemSpec,
    mode: SolveMode,
    config: &ValidationConfig,
    out: &OutputPaths,
) -> Result<Summary> {
    let (mut summary, result) = run_solve(name, spec, mode, out)?;
    if result.status == SolveStatus::Converged {
        run_validation(spec, &result.plan, config, &mut summary, out)?;
    }
    Ok(summary)
}

/// One row of the sampled-vs-bound audit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub waypoint: usize,
    pub obstacle: usize,
    pub link: usize,
    pub epsilon: f64,
    pub p_hat: f64,
    pub standard_error: f64,
    /// `ε ≥ p̂ − 3 SE`.
    pub sound: bool,
}

/// Compares each `(waypoint, obstacle, link)` bound on `plan` with a direct sampling
/// estimate of the same configuration's collision probability.
pub fn oracle_audit(spec: &ProblemSpec, plan: &TrajectoryPlan, samples: usize, seed: u64) -> Result<Vec<OracleRow>> {
    let eval = crate::risk::evaluate_nominal_risk(plan, &spec.robot, &spec.obstacles, &spec.risk)?;
    let nq = spec.robot.dof();
    let states = plan
        .waypoints
        .iter()
        .map(|w| spec.robot.forward_kinematics(&w.as_slice()[..nq]))
        .collect::<Result<Vec<_>>>()?;
    let links = spec.robot.links();
    Ok(eval
        .entries
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let est = configuration_risk_oracle(
                &links[e.link].shape,
                &states[e.waypoint][e.link].pose,
                &spec.obstacles[e.obstacle],
                samples,
                seed.wrapping_add(k as u64),
            );
            OracleRow {
                waypoint: e.waypoint,
                obstacle: e.obstacle,
                link: e.link,
                epsilon: e.epsilon,
                p_hat: est.p_hat,
                standard_error: est.standard_error,
                sound: e.epsilon >= est.p_hat - 3.0 * est.standard_error,
            }
        })
        .collect())
}

pub fn write_oracle_csv(path: &Path, rows: &[OracleRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
