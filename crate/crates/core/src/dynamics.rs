//! Discrete-time transition models used as equality constraints between waypoints.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x1, Matrix4, Matrix4x2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kinematic bicycle parameters. State `[x, y, θ, v]`, control `[a, δθ]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BicycleParams {
    pub l_r: f64,
    pub l_f: f64,
    pub dt: f64,
    /// Acceleration bounds (m/s²).
    #[serde(default = "default_accel")]
    pub accel_limits: [f64; 2],
    /// Steering magnitude bound (rad).
    #[serde(default = "default_steer")]
    pub max_steer: f64,
    /// Speed bounds (m/s).
    #[serde(default = "default_speed")]
    pub speed_limits: [f64; 2],
}

fn default_accel() -> [f64; 2] {
    [-3.0, 3.0]
}
fn default_steer() -> f64 {
    0.6
}
fn default_speed() -> [f64; 2] {
    [-3.0, 3.0]
}

impl BicycleParams {
    pub fn new(l_r: f64, l_f: f64, dt: f64) -> Self {
        Self {
            l_r,
            l_f,
            dt,
            accel_limits: default_accel(),
            max_steer: default_steer(),
            speed_limits: default_speed(),
        }
    }

    fn slip(&self, steer: f64) -> (f64, f64) {
        let k = self.l_r / (self.l_f + self.l_r);
        let t = steer.tan();
        let beta = (k * t).atan();
        let sec2 = 1.0 + t * t;
        (beta, k * sec2 / (1.0 + k * k * t * t))
    }
}

pub fn bicycle_step(state: &Vector4<f64>, control: &[f64; 2], p: &BicycleParams) -> Vector4<f64> {
    let (x, y, th, v) = (state[0], state[1], state[2], state[3]);
    let [a, steer] = *control;
    let (beta, _) = p.slip(steer);
    Vector4::new(
        x + v * (th + beta).cos() * p.dt,
        y + v * (th + beta).sin() * p.dt,
        th + (v / p.l_r) * p.dt * beta.sin(),
        v + a * p.dt,
    )
}

/// `(∂next/∂state, ∂next/∂control)` of [`bicycle_step`].
pub fn bicycle_step_jacobians(
    state: &Vector4<f64>,
    control: &[f64; 2],
    p: &BicycleParams,
) -> (Matrix4<f64>, Matrix4x2<f64>) {
    let (th, v) = (state[2], state[3]);
    let (beta, dbeta) = p.slip(control[1]);
    let (s, c) = (th + beta).sin_cos();
    let dt = p.dt;
    #[rustfmt::skip]
    let fx = Matrix4::new(
        1.0, 0.0, -v * s * dt, c * dt,
        0.0, 1.0, v * c * dt, s * dt,
        0.0, 0.0, 1.0, dt * beta.sin() / p.l_r,
        0.0, 0.0, 0.0, 1.0,
    );
    #[rustfmt::skip]
    let fu = Matrix4x2::new(
        0.0, -v * s * dt * dbeta,
        0.0, v * c * dt * dbeta,
        0.0, (v / p.l_r) * dt * beta.cos() * dbeta,
        dt, 0.0,
    );
    (fx, fu)
}

/// Unicycle base: `[x, y, θ]` with speed control; θ itself is not propagated.
pub fn unicycle_step(state: &Vector3<f64>, v: f64, dt: f64) -> Vector3<f64> {
    let (s, c) = state[2].sin_cos();
    Vector3::new(state[0] + v * c * dt, state[1] + v * s * dt, state[2])
}

pub fn unicycle_step_jacobians(state: &Vector3<f64>, v: f64, dt: f64) -> (Matrix3<f64>, Matrix3x1<f64>) {
    let (s, c) = state[2].sin_cos();
    #[rustfmt::skip]
    let fx = Matrix3::new(
        1.0, 0.0, -v * s * dt,
        0.0, 1.0, v * c * dt,
        0.0, 0.0, 1.0,
    );
    (fx, Matrix3x1::new(c * dt, s * dt, 0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnicycleParams {
    pub dt: f64,
    #[serde(default = "default_unicycle_speed")]
    pub v_max: f64,
    /// Optional heading-rate bound (rad/s) on consecutive base headings.
    #[serde(default)]
    pub max_heading_rate: Option<f64>,
}

fn default_unicycle_speed() -> f64 {
    1.0
}

/// Transition model attached to a problem.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum DynamicsModel {
    /// Waypoints are unconstrained by any transition model.
    None,
    /// Bicycle on a planar base: the state appends speed `v` to the `(x, y, θ)` configuration.
    Bicycle(BicycleParams),
    /// Unicycle on the leading planar-base coordinates of the configuration.
    Unicycle(UnicycleParams),
}

/// Linearization of one transition residual `h = q_{t+1}[rows] − f(q_t, u_t)`.
#[derive(Clone, Debug)]
pub struct TransitionLinearization {
    pub residual: DVector<f64>,
    /// State indices constrained by the residual rows.
    pub rows: Vec<usize>,
    pub d_state: DMatrix<f64>,
    pub d_control: DMatrix<f64>,
}

impl DynamicsModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            DynamicsModel::None => Ok(()),
            DynamicsModel::Bicycle(p) => {
                if !(p.dt > 0.0 && p.l_r > 0.0 && p.l_f > 0.0) {
                    return Err(Error::InvalidProblem(
                        "bicycle requires dt, l_r, l_f > 0".into(),
                    ));
                }
                if !(p.accel_limits[0] <= p.accel_limits[1]
                    && p.speed_limits[0] <= p.speed_limits[1]
                    && p.max_steer > 0.0
                    && p.max_steer < std::f64::consts::FRAC_PI_2)
                {
                    return Err(Error::InvalidProblem("inconsistent bicycle limits".into()));
                }
                Ok(())
            }
            DynamicsModel::Unicycle(p) => {
                if !(p.dt > 0.0 && p.v_max > 0.0) {
                    return Err(Error::InvalidProblem("unicycle requires dt, v_max > 0".into()));
                }
                if p.max_heading_rate.is_some_and(|w| !(w > 0.0)) {
                    return Err(Error::InvalidProblem("heading rate bound must be positive".into()));
                }
                Ok(())
            }
        }
    }

    /// State entries appended after the robot configuration.
    pub fn extra_state_dim(&self) -> usize {
        match self {
            DynamicsModel::Bicycle(_) => 1,
            _ => 0,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            DynamicsModel::None => 0,
            DynamicsModel::Bicycle(_) => 2,
            DynamicsModel::Unicycle(_) => 1,
        }
    }

    pub fn control_bounds(&self) -> Vec<(f64, f64)> {
        match self {
            DynamicsModel::None => Vec::new(),
            DynamicsModel::Bicycle(p) => vec![
                (p.accel_limits[0], p.accel_limits[1]),
                (-p.max_steer, p.max_steer),
            ],
            DynamicsModel::Unicycle(p) => vec![(-p.v_max, p.v_max)],
        }
    }

    pub fn extra_state_bounds(&self) -> Vec<(f64, f64)> {
        match self {
            DynamicsModel::Bicycle(p) => vec![(p.speed_limits[0], p.speed_limits[1])],
            _ => Vec::new(),
        }
    }

    /// Index of the heading coordinate and the per-step bound, if heading rate is limited.
    pub fn heading_rate_bound(&self) -> Option<(usize, f64)> {
        match self {
            DynamicsModel::Unicycle(p) => p.max_heading_rate.map(|w| (2, w * p.dt)),
            _ => None,
        }
    }

    /// Checks that the configuration layout supports this model (planar base first).
    pub fn check_layout(&self, config_dim: usize) -> Result<()> {
        match self {
            DynamicsModel::Bicycle(_) if config_dim != 3 => Err(Error::InvalidProblem(format!(
                "bicycle dynamics need a 3-coordinate planar body, robot has {config_dim}"
            ))),
            DynamicsModel::Unicycle(_) if config_dim < 3 => Err(Error::InvalidProblem(
                "unicycle dynamics need a planar base as the first joint".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Residual and Jacobians of the transition from `q` under `u` to `q_next`.
    pub fn linearize(&self, q: &[f64], u: &[f64], q_next: &[f64]) -> TransitionLinearization {
        let n = q.len();
        match self {
            DynamicsModel::None => TransitionLinearization {
                residual: DVector::zeros(0),
                rows: Vec::new(),
                d_state: DMatrix::zeros(0, n),
                d_control: DMatrix::zeros(0, 0),
            },
            DynamicsModel::Bicycle(p) => {
                let s = Vector4::new(q[0], q[1], q[2], q[3]);
                let c = [u[0], u[1]];
                let f = bicycle_step(&s, &c, p);
                let (fx, fu) = bicycle_step_jacobians(&s, &c, p);
                TransitionLinearization {
                    residual: DVector::from_fn(4, |i, _| q_next[i] - f[i]),
                    rows: vec![0, 1, 2, 3],
                    d_state: DMatrix::from_fn(4, n, |i, j| if j < 4 { fx[(i, j)] } else { 0.0 }),
                    d_control: DMatrix::from_fn(4, 2, |i, j| fu[(i, j)]),
                }
            }
            DynamicsModel::Unicycle(p) => {
                let s = Vector3::new(q[0], q[1], q[2]);
                let f = unicycle_step(&s, u[0], p.dt);
                let (fx, fu) = unicycle_step_jacobians(&s, u[0], p.dt);
                TransitionLinearization {
                    residual: DVector::from_fn(2, |i, _| q_next[i] - f[i]),
                    rows: vec![0, 1],
                    d_state: DMatrix::from_fn(2, n, |i, j| if j < 3 { fx[(i, j)] } else { 0.0 }),
                    d_control: DMatrix::from_fn(2, 1, |i, _| fu[(i, 0)]),
                }
            }
        }
    }

    /// Forward rollout of the modelled coordinates; other coordinates copy from `q`.
    pub fn step(&self, q: &[f64], u: &[f64]) -> Vec<f64> {
        let mut next = q.to_vec();
        match self {
            DynamicsModel::None => {}
            DynamicsModel::Bicycle(p) => {
                let f = bicycle_step(&Vector4::new(q[0], q[1], q[2], q[3]), &[u[0], u[1]], p);
                next[..4].copy_from_slice(f.as_slice());
            }
            DynamicsModel::Unicycle(p) => {
                let f = unicycle_step(&Vector3::new(q[0], q[1], q[2]), u[0], p.dt);
                next[0] = f[0];
                next[1] = f[1];
            }
        }
        next
    }
}
