//! Sampling-based collision-risk estimation, used for validation and as test oracles.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{intersects, ConvexShape, Pose};
use crate::kinematics::RobotModel;
use crate::risk::TrajectoryPlan;
use crate::shadow::UncertainObstacle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub trials: usize,
    /// Total points after up-sampling, endpoints included.
    pub upsample_waypoints: usize,
    pub rng_seed: u64,
    pub sample_environment: bool,
    pub sample_tracking: bool,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            upsample_waypoints: 100,
            rng_seed: 0,
            sample_environment: true,
            sample_tracking: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub p_hat: f64,
    pub standard_error: f64,
    pub trials: usize,
    pub collisions: usize,
    /// Trials aborted by a geometry or kinematics failure; counted in `trials`, not in `collisions`.
    pub failures: usize,
}

impl RiskEstimate {
    pub fn from_counts(collisions: usize, trials: usize, failures: usize) -> Self {
        let p = if trials == 0 { 0.0 } else { collisions as f64 / trials as f64 };
        let se = if trials == 0 { 0.0 } else { (p * (1.0 - p) / trials as f64).sqrt() };
        Self {
            p_hat: p,
            standard_error: se,
            trials,
            collisions,
            failures,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub collided: bool,
    /// Index into the up-sampled trajectory of the first colliding configuration.
    pub first_collision: Option<usize>,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub estimate: RiskEstimate,
    pub records: Vec<TrialRecord>,
}

impl MonteCarloReport {
    /// Counts of first-collision indices, one bin per up-sampled configuration.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let mut h = vec![0; bins];
        for r in &self.records {
            if let Some(i) = r.first_collision {
                if i < bins {
                    h[i] += 1;
                }
            }
        }
        h
    }
}

fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Linear interpolation to exactly `count` points (endpoints kept), taking the
/// shortest arc on the listed angle coordinates.
pub fn upsample(waypoints: &[DVector<f64>], count: usize, wrapping: &[usize]) -> Result<Vec<DVector<f64>>> {
    if waypoints.len() < 2 {
        return Err(Error::Domain("up-sampling needs at least two waypoints".into()));
    }
    if count < waypoints.len() {
        return Err(Error::Domain(format!(
            "cannot up-sample {} waypoints to {count}",
            waypoints.len()
        )));
    }
    let segments = waypoints.len() - 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        if i == count - 1 {
            out.push(waypoints[segments].clone());
            continue;
        }
        let u = i as f64 * segments as f64 / (count - 1) as f64;
        let k = (u.floor() as usize).min(segments - 1);
        let s = u - k as f64;
        let (a, b) = (&waypoints[k], &waypoints[k + 1]);
        if s == 0.0 {
            out.push(a.clone());
            continue;
        }
        let mut p = a + (b - a) * s;
        for &c in wrapping {
            p[c] = a[c] + s * wrap_angle(b[c] - a[c]);
        }
        out.push(p);
    }
    Ok(out)
}

/// Factor `L` with `L Lᵀ = Σ` for a symmetric PSD matrix (negative roundoff eigenvalues clipped).
fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut l = eig.eigenvectors;
    for (j, v) in eig.eigenvalues.iter().enumerate() {
        let r = v.max(0.0).sqrt();
        l.column_mut(j).scale_mut(r);
    }
    l
}

fn psd_factor3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = m.symmetric_eigen();
    let mut l = eig.eigenvectors;
    for j in 0..3 {
        let r = eig.eigenvalues[j].max(0.0).sqrt();
        l.column_mut(j).scale_mut(r);
    }
    l
}

fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian<R: Rng>(rng: &mut R, factor: &DMatrix<f64>) -> DVector<f64> {
    let xi = DVector::from_fn(factor.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    factor * xi
}

fn gaussian3<R: Rng>(rng: &mut R, factor: &Matrix3<f64>) -> Vector3<f64> {
    let xi = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    factor * xi
}

/// First up-sampled index at which any link meets any (offset) obstacle.
fn first_collision(
    path: &[DVector<f64>],
    robot: &RobotModel,
    obstacles: &[UncertainObstacle],
    offsets: &[Pose],
) -> Result<Option<usize>> {
    let nq = robot.dof();
    for (i, q) in path.iter().enumerate() {
        let states = robot.forward_kinematics(&q.as_slice()[..nq])?;
        for (link, state) in robot.links().iter().zip(&states) {
            for (o, off) in obstacles.iter().zip(offsets) {
                if intersects(&link.shape, &state.pose, &o.nominal, off) {
                    return Ok(Some(i));
                }
            }
        }
    }
    Ok(None)
}

/// Runs `config.trials` independent executions of `plan`. Each trial draws one joint
/// tracking error over all planned waypoints (applied before up-sampling) and one
/// static offset per obstacle.
pub fn estimate_risk(
    plan: &TrajectoryPlan,
    robot: &RobotModel,
    obstacles: &[UncertainObstacle],
    config: &ValidationConfig,
) -> Result<MonteCarloReport> {
    plan.validate()?;
    if config.trials == 0 {
        return Err(Error::Domain("trials must be at least 1".into()));
    }
    if config.upsample_waypoints < plan.waypoints.len() {
        return Err(Error::Domain(format!(
            "upsample_waypoints {} below the {} planned waypoints",
            config.upsample_waypoints,
            plan.waypoints.len()
        )));
    }
    if plan.state_dim() < robot.dof() {
        return Err(Error::DimensionMismatch {
            expected: robot.dof(),
            got: plan.state_dim(),
        });
    }
    let n = plan.state_dim();
    let tracking = config.sample_tracking && plan.tracking_covariance.iter().any(|v| *v != 0.0);
    let track_factor = if tracking { Some(psd_factor(&plan.tracking_covariance)) } else { None };
    let env_factors: Vec<Matrix3<f64>> = obstacles.iter().map(|o| psd_factor3(&o.covariance())).collect();
    let wrapping = robot.wrapping_coordinates();

    let records: Vec<TrialRecord> = (0..config.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(config.rng_seed, trial as u64);
            let waypoints: Vec<DVector<f64>> = match &track_factor {
                Some(f) => {
                    let e = gaussian(&mut rng, f);
                    plan.waypoints
                        .iter()
                        .enumerate()
                        .map(|(t, w)| w + e.rows(t * n, n))
                        .collect()
                }
                None => plan.waypoints.clone(),
            };
            let offsets: Vec<Pose> = env_factors
                .iter()
                .map(|f| {
                    if config.sample_environment {
                        Pose::from_translation(gaussian3(&mut rng, f))
                    } else {
                        Pose::identity()
                    }
                })
                .collect();
            let outcome = upsample(&waypoints, config.upsample_waypoints, &wrapping)
                .and_then(|path| first_collision(&path, robot, obstacles, &offsets));
            match outcome {
                Ok(hit) => TrialRecord {
                    trial,
                    collided: hit.is_some(),
                    first_collision: hit,
                    failed: false,
                },
                Err(_) => TrialRecord {
                    trial,
                    collided: false,
                    first_collision: None,
                    failed: true,
                },
            }
        })
        .collect();
    let collisions = records.iter().filter(|r| r.collided).count();
    let failures = records.iter().filter(|r| r.failed).count();
    Ok(MonteCarloReport {
        estimate: RiskEstimate::from_counts(collisions, config.trials, failures),
        records,
    })
}

/// Collision probability of a fixed shape at `pose` against an obstacle with Gaussian
/// position error, by direct sampling.
pub fn configuration_risk_oracle(
    shape: &ConvexShape,
    pose: &Pose,
    obstacle: &UncertainObstacle,
    samples: usize,
    seed: u64,
) -> RiskEstimate {
    const CHUNK: usize = 4096;
    let factor = psd_factor3(&obstacle.covariance());
    let chunks = samples.div_ceil(CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = trial_rng(seed, c as u64);
            let count = CHUNK.min(samples - c * CHUNK);
            (0..count)
                .filter(|_| {
                    let d = gaussian3(&mut rng, &factor);
                    intersects(shape, pose, &obstacle.nominal, &Pose::from_translation(d))
                })
                .count()
        })
        .sum();
    RiskEstimate::from_counts(hits, samples, 0)
}

pub const DEFAULT_ORACLE_SAMPLES: usize = 100_000;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::chi2_sf;
    use nalgebra::Matrix2;

    fn plan(points: &[[f64; 2]], sigma_q: f64) -> TrajectoryPlan {
        let n = 2;
        let dim = points.len() * n;
        TrajectoryPlan {
            waypoints: points.iter().map(|p| DVector::from_column_slice(p)).collect(),
            controls: vec![DVector::zeros(0); points.len() - 1],
            tracking_covariance: DMatrix::identity(dim, dim) * sigma_q * sigma_q,
            delta: 0.05,
            gamma: 0.05,
            budget: 0.1,
        }
    }

    fn disk_at(x: f64, y: f64, r: f64, sigma: f64) -> UncertainObstacle {
        let shape = ConvexShape::disk(r).transformed(Pose::from_translation(Vector3::new(x, y, 0.0)));
        UncertainObstacle::planar(shape, Matrix2::identity() * sigma * sigma).unwrap()
    }

    #[test]
    fn midpoint_inserted_and_endpoints_kept() {
        let w = vec![DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![2.0, -1.0])];
        let u = upsample(&w, 3, &[]).unwrap();
        assert_eq!(u.len(), 3);
        assert_eq!(u[0], w[0]);
        assert_eq!(u[2], w[1]);
        assert_eq!(u[1], DVector::from_vec(vec![1.0, 0.0]));
        let dense = upsample(&[w[0].clone(), w[1].clone(), w[0].clone()], 100, &[]).unwrap();
        assert_eq!(dense.len(), 100);
        assert_eq!(dense[99], w[0]);
    }

    #[test]
    fn angle_takes_short_way_round() {
        let w = vec![DVector::from_vec(vec![3.1]), DVector::from_vec(vec![-3.1])];
        let u = upsample(&w, 11, &[0]).unwrap();
        // Oracle: unwrap the end angle explicitly and interpolate.
        let end = -3.1 + 2.0 * PI;
        for (i, p) in u.iter().enumerate() {
            let s = i as f64 / 10.0;
            let expect = 3.1 + s * (end - 3.1);
            assert!((wrap_angle(p[0]) - wrap_angle(expect)).abs() < 1e-12);
            assert!(p[0].cos() < -0.99, "{} strays toward zero", p[0]);
        }
        assert!((u[5][0] - PI).abs() < 1e-12);
        assert_eq!(u[10][0], -3.1);
    }

    #[test]
    fn far_obstacle_never_hit() {
        let robot = RobotModel::point_2d(ConvexShape::disk(0.1));
        let p = plan(&[[0.0, 0.0], [1.0, 0.0]], 0.01);
        let obs = disk_at(50.0, 50.0, 1.0, 0.1);
        let r = estimate_risk(&p, &robot, &[obs], &ValidationConfig::default()).unwrap();
        assert_eq!(r.estimate.collisions, 0);
        assert_eq!(r.estimate.p_hat, 0.0);
    }

    #[test]
    fn through_center_always_hit() {
        let robot = RobotModel::point_2d(ConvexShape::disk(0.1));
        let p = plan(&[[0.0, 0.0], [4.0, 0.0]], 1e-4);
        let obs = disk_at(2.0, 0.0, 0.5, 1e-4);
        let r = estimate_risk(&p, &robot, &[obs], &ValidationConfig::default()).unwrap();
        assert_eq!(r.estimate.p_hat, 1.0);
        assert_eq!(r.estimate.standard_error, 0.0);
        let h = r.histogram(100);
        assert_eq!(h.iter().sum::<usize>(), 1000);
    }

    #[test]
    fn point_versus_point_closed_form() {
        // A disk robot of radius r against a point obstacle collides iff ‖d‖ ≤ r.
        let (r, sigma) = (0.15, 0.1);
        let robot = RobotModel::point_2d(ConvexShape::disk(r));
        let p = plan(&[[0.0, 0.0], [0.0, 0.0]], 0.0);
        let obs = UncertainObstacle::planar(ConvexShape::point(), Matrix2::identity() * sigma * sigma).unwrap();
        let cfg = ValidationConfig {
            trials: 20_000,
            upsample_waypoints: 2,
            rng_seed: 3,
            ..ValidationConfig::default()
        };
        let est = estimate_risk(&p, &robot, &[obs.clone()], &cfg).unwrap().estimate;
        let exact = 1.0 - chi2_sf(r * r / (sigma * sigma), 2);
        assert!((est.p_hat - exact).abs() <= 3.0 * est.standard_error, "{} vs {exact}", est.p_hat);
        let oracle = configuration_risk_oracle(&ConvexShape::disk(r), &Pose::identity(), &obs, 20_000, 9);
        assert!((oracle.p_hat - exact).abs() <= 3.0 * oracle.standard_error);
    }

    #[test]
    fn oracle_extremes() {
        let obs = disk_at(0.0, 0.0, 0.5, 1e-3);
        let inside = configuration_risk_oracle(&ConvexShape::point(), &Pose::identity(), &obs, 2000, 1);
        assert_eq!(inside.p_hat, 1.0);
        let far = configuration_risk_oracle(&ConvexShape::point(), &Pose::planar(10.0, 0.0, 0.0), &obs, 2000, 1);
        assert_eq!(far.p_hat, 0.0);
    }

    #[test]
    fn same_seed_same_counts() {
        let robot = RobotModel::point_2d(ConvexShape::disk(0.2));
        let p = plan(&[[0.0, 0.0], [2.0, 0.0], [4.0, 0.0]], 0.05);
        let obs = disk_at(2.0, 0.6, 0.3, 0.2);
        let cfg = ValidationConfig {
            rng_seed: 11,
            ..ValidationConfig::default()
        };
        let a = estimate_risk(&p, &robot, &[obs.clone()], &cfg).unwrap();
        let b = estimate_risk(&p, &robot, &[obs.clone()], &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.estimate.collisions > 0 && a.estimate.collisions < 1000);
        let c = estimate_risk(&p, &robot, &[obs], &ValidationConfig { rng_seed: 12, ..cfg }).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn rejects_bad_config() {
        let robot = RobotModel::point_2d(ConvexShape::point());
        let p = plan(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 0.0);
        let cfg = ValidationConfig {
            upsample_waypoints: 2,
            ..ValidationConfig::default()
        };
        assert!(estimate_risk(&p, &robot, &[], &cfg).is_err());
        let cfg = ValidationConfig {
            trials: 0,
            ..ValidationConfig::default()
        };
        assert!(estimate_risk(&p, &robot, &[], &cfg).is_err());
    }
}
