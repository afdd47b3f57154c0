//! End-to-end acceptance checks. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process exits nonzero if any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scora_core::dynamics::{BicycleParams, DynamicsModel, UnicycleParams};
use scora_core::geometry::{ConvexShape, Pose};
use scora_core::kinematics::{finite_difference_point_jacobian, RobotModel};
use scora_core::monte_carlo::{configuration_risk_oracle, estimate_risk, ValidationConfig};
use scora_core::pipeline::validate_plan;
use scora_core::risk::{evaluate_nominal_risk, TrajectoryPlan};
use scora_core::scenario::load_scenario;
use scora_core::scp::{solve, ProblemSpec, SolveMode, SolveResult, SolveStatus};
use scora_core::shadow::{risk_bound, risk_bound_with_gradient, BoundRegime, RiskSettings, UncertainObstacle};
use scora_core::stats::chi2_quantile;

const SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn random_spd(rng: &mut ChaCha8Rng, rank: usize, scale: f64) -> Matrix3<f64> {
    let mut l = Matrix3::zeros();
    for c in 0..rank {
        for r in 0..3 {
            l[(r, c)] = rng.random_range(-1.0..1.0) * scale;
        }
    }
    l * l.transpose()
}

fn random_shape(rng: &mut ChaCha8Rng) -> ConvexShape {
    match rng.random_range(0..5) {
        0 => ConvexShape::sphere(rng.random_range(0.1..0.5)).unwrap(),
        1 => ConvexShape::cuboid(Vector3::new(
            rng.random_range(0.1..0.6),
            rng.random_range(0.1..0.6),
            rng.random_range(0.1..0.6),
        )),
        2 => ConvexShape::capsule(
            Vector3::new(-rng.random_range(0.1..0.4), 0.0, 0.0),
            Vector3::new(rng.random_range(0.1..0.4), 0.0, 0.0),
            rng.random_range(0.05..0.3),
        )
        .unwrap(),
        3 => ConvexShape::ellipsoid(Matrix3::from_diagonal(&Vector3::new(
            rng.random_range(0.01..0.25),
            rng.random_range(0.01..0.25),
            rng.random_range(0.01..0.25),
        )))
        .unwrap(),
        _ => {
            let n = rng.random_range(3..8);
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)))
                .collect();
            ConvexShape::polytope(pts).unwrap()
        }
    }
}

fn random_pose(rng: &mut ChaCha8Rng, center: Vector3<f64>) -> Pose {
    Pose::from_rpy(
        center,
        rng.random_range(-3.0..3.0),
        rng.random_range(-1.5..1.5),
        rng.random_range(-3.0..3.0),
    )
}

/// Robot and obstacle shapes placed so the sampled collision probability is
/// typically between a few per mille and one half.
fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let settings = RiskSettings::default();
    let mut failures = Vec::new();
    let mut nontrivial = 0;
    for case in 0..200 {
        let robot = random_shape(&mut rng);
        let rank = 1 + case % 3;
        let scale = rng.random_range(0.1..0.35);
        let obstacle = UncertainObstacle::new(random_shape(&mut rng).transformed(random_pose(&mut rng, Vector3::zeros())), random_spd(&mut rng, rank, scale)).unwrap();
        let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let reach = rng.random_range(0.3..1.5);
        let pose = random_pose(&mut rng, dir * reach);
        let bound = risk_bound(&robot, &pose, &obstacle, &settings).unwrap();
        let est = configuration_risk_oracle(&robot, &pose, &obstacle, 100_000, SEED + case as u64);
        if est.p_hat > 0.0 && est.p_hat < 1.0 {
            nontrivial += 1;
        }
        if bound.epsilon < est.p_hat - 3.0 * est.standard_error {
            failures.push(format!("case {case}: bound {:.4} < p {:.4}", bound.epsilon, est.p_hat));
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: format!("{} of 200 bounds below p - 3 SE ({nontrivial} cases with 0 < p < 1) {}", failures.len(), failures.join("; ")),
    }
}

fn close(a: f64, b: f64, abs: f64, rel: f64) -> bool {
    (a - b).abs() <= abs.max(rel * b.abs())
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let settings = RiskSettings::default();
    let robots = [
        RobotModel::planar_body(ConvexShape::rectangle(1.0, 0.5)),
        RobotModel::planar_arm(&[0.6, 0.5, 0.4], 0.08).unwrap(),
        RobotModel::point_3d(ConvexShape::sphere(0.2).unwrap()),
    ];
    let mut checked = 0;
    let mut risk_bad = Vec::new();
    let mut attempts = 0;
    while checked < 100 && attempts < 10_000 {
        attempts += 1;
        let robot = &robots[attempts % robots.len()];
        let n = robot.dof();
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        let obstacle = if attempts % robots.len() == 2 {
            UncertainObstacle::new(
                ConvexShape::sphere(0.3).unwrap().transformed(Pose::from_translation(Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                ))),
                random_spd(&mut rng, 3, 0.25),
            )
        } else {
            let c = random_spd(&mut rng, 2, 0.25);
            UncertainObstacle::planar(
                ConvexShape::rectangle(0.6, 0.4).transformed(Pose::planar(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-3.0..3.0),
                )),
                Matrix2::new(c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]),
            )
        }
        .unwrap();
        let link = robot.links().len() - 1;
        let b = risk_bound_with_gradient(robot, &q, link, &obstacle, &settings).unwrap();
        if b.regime != BoundRegime::Interior || b.epsilon < 1e-5 || b.epsilon > 0.9 {
            continue;
        }
        // Each bound carries ~1e-9 of distance-solver noise, so a smaller step
        // measures the noise rather than the slope.
        let h = 1e-4;
        let mut fd = DVector::zeros(n);
        let mut interior = true;
        for i in 0..n {
            let mut qp = q.clone();
            qp[i] += h;
            let mut qm = q.clone();
            qm[i] -= h;
            let bp = risk_bound_with_gradient(robot, &qp, link, &obstacle, &settings).unwrap();
            let bm = risk_bound_with_gradient(robot, &qm, link, &obstacle, &settings).unwrap();
            interior &= bp.regime == BoundRegime::Interior && bm.regime == BoundRegime::Interior;
            fd[i] = (bp.epsilon - bm.epsilon) / (2.0 * h);
        }
        if !interior {
            continue;
        }
        checked += 1;
        for i in 0..n {
            if !close(b.gradient[i], fd[i], 1e-3, 1e-2) {
                risk_bad.push(format!("q {q:.3?} coord {i}: analytic {:.5e} fd {:.5e}", b.gradient[i], fd[i]));
                break;
            }
        }
    }

    let mut jac_err: f64 = 0.0;
    for _ in 0..100 {
        for robot in &robots {
            let q: Vec<f64> = (0..robot.dof()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let states = robot.forward_kinematics(&q).unwrap();
            for (l, state) in states.iter().enumerate() {
                let local = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0);
                let analytic = state.point_jacobian(&state.pose.transform_point(&local));
                let fd = finite_difference_point_jacobian(robot, &q, l, &local, 1e-6).unwrap();
                jac_err = jac_err.max((DMatrix::from_column_slice(3, robot.dof(), analytic.as_slice()) - fd).amax());
            }
        }
        let models = [
            DynamicsModel::Bicycle(BicycleParams::new(1.4, 1.4, 0.625)),
            DynamicsModel::Unicycle(UnicycleParams { dt: 0.2, v_max: 1.0, max_heading_rate: None }),
        ];
        for model in &models {
            let n = 4;
            let q: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..model.control_dim()).map(|_| rng.random_range(-0.5..0.5)).collect();
            let next = model.step(&q, &u);
            let lin = model.linearize(&q, &u, &next);
            let h = 1e-6;
            for j in 0..n {
                let mut qp = q.clone();
                qp[j] += h;
                let mut qm = q.clone();
                qm[j] -= h;
                let (fp, fm) = (model.step(&qp, &u), model.step(&qm, &u));
                for (r, &row) in lin.rows.iter().enumerate() {
                    jac_err = jac_err.max((lin.d_state[(r, j)] - (fp[row] - fm[row]) / (2.0 * h)).abs());
                }
            }
            for j in 0..u.len() {
                let mut up = u.clone();
                up[j] += h;
                let mut um = u.clone();
                um[j] -= h;
                let (fp, fm) = (model.step(&q, &up), model.step(&q, &um));
                for (r, &row) in lin.rows.iter().enumerate() {
                    jac_err = jac_err.max((lin.d_control[(r, j)] - (fp[row] - fm[row]) / (2.0 * h)).abs());
                }
            }
        }
    }
    Outcome {
        pass: checked == 100 && risk_bad.is_empty() && jac_err <= 1e-6,
        detail: format!(
            "{checked} risk gradients checked, {} outside tolerance; max kinematics/dynamics Jacobian error {jac_err:.2e} {}",
            risk_bad.len(),
            risk_bad.join("; ")
        ),
    }
}

/// `Pr(χ²_k ≤ x)` by adaptive Simpson on `u = √x`, which removes the `k = 1` singularity.
fn chi2_cdf_by_integration(x: f64, k: u32) -> f64 {
    let norm = match k {
        1 => (2.0 / std::f64::consts::PI).sqrt(),
        2 => 1.0,
        3 => (2.0 / std::f64::consts::PI).sqrt(),
        _ => unreachable!(),
    };
    let f = move |u: f64| norm * u.powi(k as i32 - 1) * (-0.5 * u * u).exp();
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let b = x.sqrt();
    let (fa, fm, fb) = (f(0.0), f(0.5 * b), f(b));
    simpson(&f, 0.0, b, fa, fm, fb, b / 6.0 * (fa + 4.0 * fm + fb), 1e-15, 60)
}

fn chi2_quantile_by_integration(p: f64, k: u32) -> f64 {
    let (mut lo, mut hi) = (0.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf_by_integration(mid, k) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut closed: f64 = 0.0;
    for p in [0.5, 0.9, 0.95, 0.99, 0.999] {
        for k in 1..=3 {
            let q = chi2_quantile(p, k).unwrap();
            let oracle = chi2_quantile_by_integration(p, k);
            worst = worst.max((q - oracle).abs() / oracle);
            if k == 2 {
                let exact = -2.0 * (1.0 - p).ln();
                closed = closed.max((q - exact).abs() / exact);
            }
        }
    }
    Outcome {
        pass: worst <= 1e-9 && closed <= 1e-12,
        detail: format!("max relative error vs integration {worst:.2e}, vs dof-2 closed form {closed:.2e}"),
    }
}

fn planar_obstacle(rng: &mut ChaCha8Rng, x: f64, y: f64) -> UncertainObstacle {
    let c = random_spd(rng, 2, 0.2);
    let shape = match rng.random_range(0..3) {
        0 => ConvexShape::rectangle(rng.random_range(0.4..1.2), rng.random_range(0.4..1.2)),
        1 => ConvexShape::disk(rng.random_range(0.2..0.6)),
        _ => {
            let verts: Vec<[f64; 2]> = (0..6)
                .map(|i| {
                    let a = i as f64 * std::f64::consts::PI / 3.0 + rng.random_range(-0.3..0.3);
                    let r = rng.random_range(0.25..0.6);
                    [r * a.cos(), r * a.sin()]
                })
                .collect();
            ConvexShape::polygon(&verts).unwrap()
        }
    };
    UncertainObstacle::planar(
        shape.transformed(Pose::planar(x, y, rng.random_range(-3.0..3.0))),
        Matrix2::new(c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]),
    )
    .unwrap()
}

/// Random planar scenes: a car footprint on a fixed path past obstacles at random
/// offsets, sampled at the planned waypoints only.
fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let settings = RiskSettings::default();
    let robot = RobotModel::planar_body(ConvexShape::rectangle(0.8, 0.4));
    let mut bad = Vec::new();
    let mut min_margin = f64::INFINITY;
    for scene in 0..20 {
        let obstacles: Vec<UncertainObstacle> = (0..rng.random_range(1..4))
            .map(|i| {
                let x = 1.0 + 1.5 * i as f64 + rng.random_range(-0.5..0.5);
                let y = rng.random_range(0.4..1.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                planar_obstacle(&mut rng, x, y)
            })
            .collect();
        let t_max = 10;
        let waypoints: Vec<DVector<f64>> = (0..=t_max)
            .map(|t| {
                let s = t as f64 / t_max as f64;
                DVector::from_vec(vec![5.0 * s, 0.2 * (6.0 * s).sin(), 0.2 * (6.0 * s).cos()])
            })
            .collect();
        let plan = TrajectoryPlan {
            controls: vec![DVector::zeros(0); t_max],
            tracking_covariance: DMatrix::zeros(3 * (t_max + 1), 3 * (t_max + 1)),
            waypoints,
            delta: 0.5,
            gamma: 0.0,
            budget: 0.5,
        };
        let eval = evaluate_nominal_risk(&plan, &robot, &obstacles, &settings).unwrap();
        let config = ValidationConfig {
            trials: 1000,
            upsample_waypoints: plan.waypoints.len(),
            rng_seed: SEED + scene,
            sample_environment: true,
            sample_tracking: false,
        };
        let mc = estimate_risk(&plan, &robot, &obstacles, &config).unwrap().estimate;
        let margin = eval.total_nominal_risk - (mc.p_hat - 3.0 * mc.standard_error);
        min_margin = min_margin.min(margin);
        if margin < 0.0 {
            bad.push(format!("scene {scene}: sum {:.4} < mc {:.4}", eval.total_nominal_risk, mc.p_hat));
        }
    }
    Outcome {
        pass: bad.is_empty(),
        detail: format!("{} of 20 scenes violate the sum bound; smallest margin {min_margin:.4} {}", bad.len(), bad.join("; ")),
    }
}

struct Benchmark {
    scora: SolveResult,
    scora_seconds: f64,
    eps: SolveResult,
    scora_mc: (f64, f64),
    eps_mc: (f64, f64),
}

fn mc(spec: &ProblemSpec, plan: &TrajectoryPlan) -> (f64, f64) {
    let config = ValidationConfig {
        trials: 2000,
        upsample_waypoints: 100,
        rng_seed: SEED,
        ..Default::default()
    };
    let e = validate_plan(spec, plan, &config).unwrap().estimate;
    (e.p_hat, e.standard_error)
}

fn benchmark(spec: &ProblemSpec) -> Benchmark {
    let t = Instant::now();
    let scora = solve(spec, SolveMode::Scora, None).unwrap();
    let scora_seconds = t.elapsed().as_secs_f64();
    let eps = solve(spec, SolveMode::EpsOpt, None).unwrap();
    let scora_mc = mc(spec, &scora.plan);
    let eps_mc = mc(spec, &eps.plan);
    Benchmark {
        scora,
        scora_seconds,
        eps,
        scora_mc,
        eps_mc,
    }
}

fn criterion_5(runs: &[(&str, &SolveResult, (f64, f64))]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, r, (p, se)) in runs {
        if r.status != SolveStatus::Converged {
            parts.push(format!("{name}: not converged, skipped"));
            continue;
        }
        let limit = r.plan.gamma + r.plan.delta + 3.0 * se;
        pass &= *p <= limit;
        parts.push(format!("{name}: mc {p:.4} vs {limit:.4}"));
    }
    Outcome {
        pass,
        detail: parts.join(", "),
    }
}

fn criterion_6(b: &Benchmark, budget: f64) -> Outcome {
    let converged = b.scora.status == SolveStatus::Converged;
    let within = b.scora_mc.0 <= budget + 2.0 * b.scora_mc.1;
    let ordered = b.eps_mc.0 >= b.scora_mc.0;
    let fast = b.scora_seconds <= 60.0;
    Outcome {
        pass: converged && within && ordered && fast,
        detail: format!(
            "scora {:?} in {:.1} s, mc {:.4} +/- {:.4}; eps-opt mc {:.4}",
            b.scora.status, b.scora_seconds, b.scora_mc.0, b.scora_mc.1, b.eps_mc.0
        ),
    }
}

fn criterion_7(b: &Benchmark, budget: f64) -> Outcome {
    let converged = b.scora.status == SolveStatus::Converged;
    let within = b.scora_mc.0 <= budget + 2.0 * b.scora_mc.1;
    let cheaper = b.eps.objective <= b.scora.objective;
    let safer = b.scora_mc.0 <= b.eps_mc.0;
    let fast = b.scora_seconds <= 30.0;
    Outcome {
        pass: converged && within && cheaper && safer && fast,
        detail: format!(
            "scora {:?} in {:.1} s, objective {:.4}, mc {:.4} +/- {:.4}; eps-opt objective {:.4}, mc {:.4}",
            b.scora.status, b.scora_seconds, b.scora.objective, b.scora_mc.0, b.scora_mc.1, b.eps.objective, b.eps_mc.0
        ),
    }
}

fn criterion_8(spec: &ProblemSpec) -> (Outcome, SolveResult) {
    let r = solve(spec, SolveMode::Scora, None).unwrap();
    let a = DVector::from_vec(spec.start.center());
    let b = DVector::from_vec(spec.goal.center());
    let deviation = r
        .plan
        .waypoints
        .iter()
        .enumerate()
        .map(|(t, w)| (w - (&a + (&b - &a) * (t as f64 / spec.horizon as f64))).amax())
        .fold(0.0, f64::max);
    let outcome = Outcome {
        pass: r.status == SolveStatus::Converged && r.iterations <= 5 && deviation <= 1e-6,
        detail: format!("{:?} after {} iterations, max deviation {deviation:.2e}", r.status, r.iterations),
    };
    (outcome, r)
}

fn summary_without_timing(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("summary.json"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim_start().starts_with("\"runtime_seconds\""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    let names = ["free_space", "parking", "mobile_manipulator"];
    for name in names {
        let mut outputs = Vec::new();
        for run in 0..2 {
            let dir = tmp.path().join(format!("{name}_{run}"));
            let status = Command::new(env!("CARGO_BIN_EXE_scora"))
                .args(["pipeline", "--seed", "7", "--scenario"])
                .arg(scenario(name))
                .arg("--out-dir")
                .arg(&dir)
                .output()
                .unwrap();
            assert!(status.status.code().is_some());
            outputs.push(summary_without_timing(&dir));
        }
        if outputs[0] != outputs[1] {
            differing.push(name);
        }
    }
    Outcome {
        pass: differing.is_empty(),
        detail: format!("{} scenarios, differing summaries: {:?}", names.len(), differing),
    }
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "epsilon-shadow soundness", criterion_1()),
        (2, "gradients and Jacobians", criterion_2()),
        (3, "chi-squared quantile", criterion_3()),
        (4, "sum-of-bounds vs environment sampling", criterion_4()),
    ];

    let parking = load_scenario(scenario("parking")).unwrap();
    let manipulator = load_scenario(scenario("mobile_manipulator")).unwrap();
    let free = load_scenario(scenario("free_space")).unwrap();
    let park = benchmark(&parking);
    let arm = benchmark(&manipulator);
    let (c8, free_result) = criterion_8(&free);
    let free_mc = mc(&free, &free_result.plan);

    results.push((
        5,
        "joint risk within gamma + delta",
        criterion_5(&[
            ("parking", &park.scora, park.scora_mc),
            ("mobile_manipulator", &arm.scora, arm.scora_mc),
            ("free_space", &free_result, free_mc),
        ]),
    ));
    results.push((6, "parking benchmark", criterion_6(&park, parking.budget)));
    results.push((7, "mobile manipulator benchmark", criterion_7(&arm, manipulator.budget)));
    results.push((8, "free-space straight line", c8));
    results.push((9, "pipeline determinism", criterion_9()));

    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n} ({name}): {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail.trim_end());
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
