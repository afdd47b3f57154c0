use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};
use proptest::prelude::*;

use scora_core::dynamics::{BicycleParams, DynamicsModel, UnicycleParams};
use scora_core::geometry::{signed_distance, ConvexShape, Pose};
use scora_core::kinematics::{finite_difference_point_jacobian, RobotModel};
use scora_core::monte_carlo::{estimate_risk, ValidationConfig};
use scora_core::risk::{evaluate_nominal_risk, evaluate_robust_constraint, TrajectoryPlan};
use scora_core::scenario::load_scenario;
use scora_core::scp::{solve, ObjectiveKind, ProblemSpec, SolveMode, SolveStatus, SolverSettings, StateBox};
use scora_core::shadow::{risk_bound, shadow_shape, BoundRegime, RiskSettings, UncertainObstacle};

fn covariance(l: [f64; 6]) -> Matrix3<f64> {
    let f = Matrix3::new(l[0], 0.0, 0.0, l[1], l[2], 0.0, l[3], l[4], l[5]);
    f * f.transpose()
}

fn arb_factor() -> impl Strategy<Value = [f64; 6]> {
    (0.05..0.3f64, -0.1..0.1f64, 0.05..0.3f64, -0.1..0.1f64, -0.1..0.1f64, 0.05..0.3f64)
        .prop_map(|(a, b, c, d, e, f)| [a, b, c, d, e, f])
}

fn arb_offset() -> impl Strategy<Value = Vector3<f64>> {
    (-1.5..1.5f64, -1.5..1.5f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn manipulator() -> RobotModel {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/mobile_manipulator.json");
    load_scenario(path).unwrap().robot
}

fn sd(robot: &ConvexShape, pose: &Pose, shape: &ConvexShape) -> f64 {
    signed_distance(robot, pose, shape, &Pose::identity()).unwrap().signed_distance
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shadow_distance_is_nondecreasing_in_risk(factor in arb_factor(), offset in arb_offset()) {
        let obs = UncertainObstacle::new(ConvexShape::cuboid(Vector3::new(0.4, 0.3, 0.2)), covariance(factor)).unwrap();
        let robot = ConvexShape::capsule(Vector3::zeros(), Vector3::new(0.0, 0.0, 0.4), 0.1).unwrap();
        let pose = Pose::from_translation(offset);
        let mut last = f64::NEG_INFINITY;
        for k in 1..20 {
            let d = sd(&robot, &pose, &shadow_shape(&obs, k as f64 / 20.0).unwrap());
            prop_assert!(d >= last - 1e-9);
            last = d;
        }
    }

    #[test]
    fn interior_bound_brackets_contact(factor in arb_factor(), offset in arb_offset()) {
        let obs = UncertainObstacle::new(ConvexShape::sphere(0.3).unwrap(), covariance(factor)).unwrap();
        let robot = ConvexShape::cuboid(Vector3::new(0.2, 0.1, 0.1));
        let pose = Pose::from_translation(offset);
        let b = risk_bound(&robot, &pose, &obs, &RiskSettings::default()).unwrap();
        prop_assume!(b.regime == BoundRegime::Interior && b.epsilon > 2e-4);
        prop_assert!(sd(&robot, &pose, &shadow_shape(&obs, b.epsilon).unwrap()) >= -1e-7);
        prop_assert!(sd(&robot, &pose, &shadow_shape(&obs, b.epsilon - 1e-4).unwrap()) < 0.0);
    }

    #[test]
    fn certain_disjoint_obstacle_has_minimum_risk(offset in arb_offset()) {
        let obs = UncertainObstacle::certain(ConvexShape::sphere(0.2).unwrap()).unwrap();
        let robot = ConvexShape::Sphere(0.1);
        let pose = Pose::from_translation(offset);
        prop_assume!(offset.norm() > 0.31);
        let settings = RiskSettings::default();
        prop_assert_eq!(risk_bound(&robot, &pose, &obs, &settings).unwrap().epsilon, settings.eps_min);
    }

    #[test]
    fn base_translation_moves_every_link(q in prop::collection::vec(-2.0..2.0f64, 10), dx in -3.0..3.0f64, dy in -3.0..3.0f64) {
        let robot = manipulator();
        let a = robot.forward_kinematics(&q).unwrap();
        prop_assert_eq!(&a, &robot.forward_kinematics(&q).unwrap());
        let mut moved = q.clone();
        moved[0] += dx;
        moved[1] += dy;
        let b = robot.forward_kinematics(&moved).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            let shift = lb.pose.transform_point(&Vector3::zeros()) - la.pose.transform_point(&Vector3::zeros());
            prop_assert!((shift - Vector3::new(dx, dy, 0.0)).amax() <= 1e-12);
        }
    }

    #[test]
    fn manipulator_jacobian_matches_finite_differences(q in prop::collection::vec(-2.0..2.0f64, 10), p in arb_offset()) {
        let robot = manipulator();
        let states = robot.forward_kinematics(&q).unwrap();
        for (l, state) in states.iter().enumerate() {
            let local = p * 0.2;
            let analytic = state.point_jacobian(&state.pose.transform_point(&local));
            let fd = finite_difference_point_jacobian(&robot, &q, l, &local, 1e-6).unwrap();
            let analytic = DMatrix::from_column_slice(3, robot.dof(), analytic.as_slice());
            prop_assert!((analytic - fd).amax() <= 1e-6);
        }
    }

    #[test]
    fn dynamics_jacobians_match_finite_differences(
        q in prop::collection::vec(-2.0..2.0f64, 4),
        u in prop::collection::vec(-0.5..0.5f64, 2),
    ) {
        let models = [
            DynamicsModel::Bicycle(BicycleParams::new(1.4, 1.4, 0.625)),
            DynamicsModel::Unicycle(UnicycleParams { dt: 0.2, v_max: 1.0, max_heading_rate: None }),
        ];
        let h = 1e-6;
        for model in &models {
            let u = &u[..model.control_dim()];
            let lin = model.linearize(&q, u, &model.step(&q, u));
            for j in 0..q.len() {
                let (mut qp, mut qm) = (q.clone(), q.clone());
                qp[j] += h;
                qm[j] -= h;
                let (fp, fm) = (model.step(&qp, u), model.step(&qm, u));
                for (r, &row) in lin.rows.iter().enumerate() {
                    prop_assert!((lin.d_state[(r, j)] - (fp[row] - fm[row]) / (2.0 * h)).abs() <= 1e-6);
                }
            }
            for j in 0..u.len() {
                let (mut up, mut um) = (u.to_vec(), u.to_vec());
                up[j] += h;
                um[j] -= h;
                let (fp, fm) = (model.step(&q, &up), model.step(&q, &um));
                for (r, &row) in lin.rows.iter().enumerate() {
                    prop_assert!((lin.d_control[(r, j)] - (fp[row] - fm[row]) / (2.0 * h)).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn robust_constraint_is_monotone_in_delta(y in -1.0..1.0f64, sigma_q in 0.01..0.2f64, delta in 0.01..0.2f64) {
        let robot = RobotModel::point_2d(ConvexShape::disk(0.2));
        let obs = UncertainObstacle::planar(
            ConvexShape::disk(0.4).transformed(Pose::from_translation(Vector3::new(1.0, 0.0, 0.0))),
            Matrix2::identity() * 0.01,
        )
        .unwrap();
        let waypoints: Vec<DVector<f64>> = (0..5).map(|t| DVector::from_vec(vec![0.5 * t as f64, y])).collect();
        let mut plan = TrajectoryPlan {
            controls: vec![DVector::zeros(0); 4],
            tracking_covariance: DMatrix::identity(10, 10) * sigma_q * sigma_q,
            waypoints,
            delta,
            gamma: 0.0,
            budget: 0.5,
        };
        let eval = evaluate_nominal_risk(&plan, &robot, &[obs], &RiskSettings::default()).unwrap();
        let base = evaluate_robust_constraint(&plan, &eval);
        let h = 1e-7;
        plan.delta = delta + h;
        let up = evaluate_robust_constraint(&plan, &eval);
        plan.delta = delta - h;
        let down = evaluate_robust_constraint(&plan, &eval);
        prop_assert!(up.value >= base.value && base.value >= down.value);
        prop_assert!((base.d_delta - (up.value - down.value) / (2.0 * h)).abs() <= 1e-6 * base.d_delta.max(1.0));
    }

    #[test]
    fn monte_carlo_is_seed_deterministic(seed in 0u64..1000) {
        let robot = RobotModel::point_2d(ConvexShape::disk(0.2));
        let obs = UncertainObstacle::planar(
            ConvexShape::disk(0.3).transformed(Pose::from_translation(Vector3::new(1.0, 0.45, 0.0))),
            Matrix2::identity() * 0.02,
        )
        .unwrap();
        let plan = TrajectoryPlan {
            waypoints: (0..5).map(|t| DVector::from_vec(vec![0.5 * t as f64, 0.0])).collect(),
            controls: vec![DVector::zeros(0); 4],
            tracking_covariance: DMatrix::identity(10, 10) * 0.01,
            delta: 0.1,
            gamma: 0.0,
            budget: 0.1,
        };
        let config = ValidationConfig { trials: 200, upsample_waypoints: 20, rng_seed: seed, ..Default::default() };
        let a = estimate_risk(&plan, &robot, &[obs.clone()], &config).unwrap();
        let b = estimate_risk(&plan, &robot, &[obs], &config).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn disk_problem(center: [f64; 2]) -> ProblemSpec {
    let t = 8;
    let obs = UncertainObstacle::planar(
        ConvexShape::disk(0.4).transformed(Pose::from_translation(Vector3::new(center[0], center[1], 0.0))),
        Matrix2::identity() * 0.01,
    )
    .unwrap();
    ProblemSpec {
        robot: RobotModel::point_2d(ConvexShape::disk(0.2)),
        obstacles: vec![obs],
        dynamics: DynamicsModel::None,
        horizon: t,
        dt: 0.1,
        start: StateBox::fixed(&[0.0, 0.0]),
        goal: StateBox::fixed(&[4.0, 1.0]),
        budget: 0.1,
        tracking_covariance: DMatrix::identity(2 * (t + 1), 2 * (t + 1)) * 4e-4,
        objective: ObjectiveKind::FullState,
        constraints: Vec::new(),
        risk: RiskSettings::default(),
        solver: SolverSettings::default(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn solver_merit_and_determinism(x in 1.5..2.5f64, y in 0.2..0.8f64) {
        let spec = disk_problem([x, y]);
        let a = solve(&spec, SolveMode::Scora, None).unwrap();
        for e in a.log.iter().filter(|e| e.accepted) {
            prop_assert!(e.candidate_merit <= e.merit + 1e-12);
        }
        let b = solve(&spec, SolveMode::Scora, None).unwrap();
        prop_assert_eq!(format!("{:?}", a.log), format!("{:?}", b.log));
        if a.status == SolveStatus::Converged {
            prop_assert!(a.plan.delta + a.plan.gamma <= spec.budget + 1e-9);
        }
    }
}
