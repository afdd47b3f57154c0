//! Support-function convex geometry: shapes, rigid poses, and signed distance.

mod epa;
mod gjk;
mod pose;
mod shape;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use epa::EpaSettings;
pub use gjk::GjkSettings;
pub use pose::{Pose, PoseSpec};
pub use shape::{ConvexShape, ShapeSpec};

use crate::error::Result;
use gjk::{GjkOutcome, MinkowskiDifference};

/// Outcome of a signed-distance query between shapes A and B.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceResult {
    /// Separation if disjoint, negative penetration depth if overlapping (m).
    pub signed_distance: f64,
    pub witness_a: Vector3<f64>,
    pub witness_b: Vector3<f64>,
    /// Unit vector from B toward A; moving A along it increases the signed distance.
    pub normal: Vector3<f64>,
}

/// Query configuration for [`signed_distance_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct DistanceSettings {
    pub gjk: GjkSettings,
    pub epa: EpaSettings,
}

pub fn signed_distance(
    a: &ConvexShape,
    pose_a: &Pose,
    b: &ConvexShape,
    pose_b: &Pose,
) -> Result<DistanceResult> {
    signed_distance_with(a, pose_a, b, pose_b, &DistanceSettings::default())
}

pub fn signed_distance_with(
    a: &ConvexShape,
    pose_a: &Pose,
    b: &ConvexShape,
    pose_b: &Pose,
    settings: &DistanceSettings,
) -> Result<DistanceResult> {
    a.validate()?;
    b.validate()?;
    let m = MinkowskiDifference {
        a,
        pose_a,
        b,
        pose_b,
    };
    match gjk::gjk(&m, &settings.gjk)? {
        GjkOutcome::Separated {
            distance,
            witness_a,
            witness_b,
            normal,
        } => Ok(DistanceResult {
            signed_distance: distance,
            witness_a,
            witness_b,
            normal,
        }),
        GjkOutcome::Overlapping { simplex } => {
            let pen = epa::epa(&m, &simplex, &settings.epa)?;
            Ok(DistanceResult {
                signed_distance: -pen.depth,
                witness_a: pen.witness_a,
                witness_b: pen.witness_b,
                normal: -pen.normal,
            })
        }
    }
}

/// Separation distance only, without penetration depth: `Some(d)` with `d > 0` when the
/// shapes are disjoint, `None` when they overlap or touch.
pub(crate) fn separation(
    a: &ConvexShape,
    pose_a: &Pose,
    b: &ConvexShape,
    pose_b: &Pose,
    settings: &GjkSettings,
) -> Result<Option<DistanceResult>> {
    let m = MinkowskiDifference {
        a,
        pose_a,
        b,
        pose_b,
    };
    Ok(match gjk::gjk(&m, settings)? {
        GjkOutcome::Separated {
            distance,
            witness_a,
            witness_b,
            normal,
        } => Some(DistanceResult {
            signed_distance: distance,
            witness_a,
            witness_b,
            normal,
        }),
        GjkOutcome::Overlapping { .. } => None,
    })
}

/// `true` if the shapes overlap with positive measure or touch within roundoff.
pub fn intersects(a: &ConvexShape, pose_a: &Pose, b: &ConvexShape, pose_b: &Pose) -> bool {
    let (alo, ahi) = a.aabb(pose_a);
    let (blo, bhi) = b.aabb(pose_b);
    if (0..3).any(|i| ahi[i] < blo[i] || bhi[i] < alo[i]) {
        return false;
    }
    let m = MinkowskiDifference {
        a,
        pose_a,
        b,
        pose_b,
    };
    gjk::gjk_intersects(&m, 128)
}
