use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rigid transform `x -> R x + t`.
///
/// Planar poses are embedded in 3D as a rotation about `z` with zero `z` translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseSpec", into = "PoseSpec")]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation,
        }
    }

    /// Planar pose `(x, y, theta)`.
    pub fn planar(x: f64, y: f64, theta: f64) -> Self {
        Self {
            rotation: Rotation3::from_axis_angle(&Vector3::z_axis(), theta),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    pub fn from_rpy(translation: Vector3<f64>, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            rotation: Rotation3::from_euler_angles(roll, pitch, yaw),
            translation,
        }
    }

    /// Builds a pose from a raw matrix, checking `RᵀR = I` and `det R = +1` to 1e-9.
    pub fn from_matrix(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !residual.is_finite() || residual > 1e-9 {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (residual {residual:e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidPose("rotation determinant is not +1".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("translation is not finite".into()));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    #[inline]
    pub fn inverse_transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * v
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.translation == Vector3::zeros() && self.rotation == Rotation3::identity()
    }
}

/// JSON form: `{"translation": [x, y, z], "rpy": [r, p, y]}` or `"rotation"` as row-major 3x3.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpy: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[[f64; 3]; 3]>,
}

impl TryFrom<PoseSpec> for Pose {
    type Error = Error;

    fn try_from(spec: PoseSpec) -> Result<Self> {
        let t = Vector3::from(spec.translation);
        match (spec.rpy, spec.rotation) {
            (Some(_), Some(_)) => Err(Error::InvalidPose(
                "give either `rpy` or `rotation`, not both".into(),
            )),
            (Some([r, p, y]), None) => Ok(Pose::from_rpy(t, r, p, y)),
            (None, Some(rows)) => {
                let m = Matrix3::from_fn(|i, j| rows[i][j]);
                Pose::from_matrix(m, t)
            }
            (None, None) => Ok(Pose::from_translation(t)),
        }
    }
}

impl From<Pose> for PoseSpec {
    fn from(pose: Pose) -> Self {
        let m = pose.rotation.matrix();
        let rotation = if pose.rotation == Rotation3::identity() {
            None
        } else {
            Some([
                [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            ])
        };
        PoseSpec {
            translation: pose.translation.into(),
            rpy: None,
            rotation,
        }
    }
}
