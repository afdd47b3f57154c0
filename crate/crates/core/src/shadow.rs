//! ε-shadows of uncertain obstacles and the per-obstacle risk bound.
//!
//! The shadow at scale `s` is `O ⊕ s·E`, with `E = {x : xᵀ Σ_O⁺ x ≤ 1}` the unit
//! ellipsoid of the offset covariance. A scale corresponds to the risk level
//! `ε = Pr(χ²(k) > s²)`. The signed distance from a robot to the shadow is convex
//! and nonincreasing in `s`, so the largest clear shadow is found by Newton steps
//! taken from the clear side, which never cross the contact point.

use nalgebra::{DVector, Matrix2, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    separation, signed_distance_with, ConvexShape, DistanceSettings, GjkSettings, Pose,
};
use crate::kinematics::{LinkState, RobotModel};
pub use crate::stats::chi2_quantile;
use crate::stats::{chi2_isf, chi2_pdf, chi2_sf};

const COVARIANCE_SYMMETRY_TOL: f64 = 1e-9;
const RANK_TOL: f64 = 1e-12;

/// A nominal convex obstacle displaced by a Gaussian translation `d ~ N(0, Σ_O)`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertainObstacle {
    pub nominal: ConvexShape,
    covariance: Matrix3<f64>,
    dof: u32,
}

impl UncertainObstacle {
    /// Validates `Σ_O` (symmetric, PSD). The χ² dof defaults to the rank of `Σ_O`.
    pub fn new(nominal: ConvexShape, covariance: Matrix3<f64>) -> Result<Self> {
        nominal.validate()?;
        let asym = (covariance - covariance.transpose()).abs().max();
        if !covariance.iter().all(|v| v.is_finite()) || asym > COVARIANCE_SYMMETRY_TOL {
            return Err(Error::InvalidCovariance(format!(
                "offset covariance is not symmetric (residual {asym:e})"
            )));
        }
        let covariance = 0.5 * (covariance + covariance.transpose());
        let eig = covariance.symmetric_eigenvalues();
        let top = eig.max().max(0.0);
        if eig.min() < -RANK_TOL.max(1e-9 * top) {
            return Err(Error::InvalidCovariance(format!(
                "offset covariance has negative eigenvalue {:e}",
                eig.min()
            )));
        }
        let rank = eig.iter().filter(|&&l| l > RANK_TOL.max(1e-10 * top)).count() as u32;
        Ok(Self {
            nominal,
            covariance,
            dof: rank,
        })
    }

    /// Planar obstacle: the 2×2 covariance is zero-padded in `z`.
    pub fn planar(nominal: ConvexShape, covariance: Matrix2<f64>) -> Result<Self> {
        let mut full = Matrix3::zeros();
        full.fixed_view_mut::<2, 2>(0, 0).copy_from(&covariance);
        Self::new(nominal, full)
    }

    /// Deterministic obstacle (`Σ_O = 0`).
    pub fn certain(nominal: ConvexShape) -> Result<Self> {
        Self::new(nominal, Matrix3::zeros())
    }

    /// Overrides the χ² degrees of freedom (e.g. 3 for a planar scene, which is conservative).
    pub fn with_dof(mut self, dof: u32) -> Result<Self> {
        if !(1..=3).contains(&dof) || dof < self.dof {
            return Err(Error::Domain(format!(
                "chi-squared dof {dof} must be in {}..=3",
                self.dof.max(1)
            )));
        }
        if self.dof > 0 {
            self.dof = dof;
        }
        Ok(self)
    }

    pub fn covariance(&self) -> &Matrix3<f64> {
        &self.covariance
    }

    /// Degrees of freedom of the offset distribution (0 when deterministic).
    pub fn dof(&self) -> u32 {
        self.dof
    }

    pub fn is_certain(&self) -> bool {
        self.dof == 0
    }

    /// Support value of the unit uncertainty ellipsoid along a unit direction.
    fn ellipsoid_width(&self, n: &Vector3<f64>) -> f64 {
        n.dot(&(self.covariance * n)).max(0.0).sqrt()
    }

    fn shadow_at_scale(&self, s: f64) -> ConvexShape {
        if self.is_certain() || s == 0.0 {
            return self.nominal.clone();
        }
        ConvexShape::minkowski_sum(
            self.nominal.clone(),
            ConvexShape::Ellipsoid(self.covariance * (s * s)),
        )
    }
}

/// `S_ε = O ⊕ D_ε`, containing the displaced obstacle with probability `1 − ε`.
pub fn shadow_shape(obstacle: &UncertainObstacle, epsilon: f64) -> Result<ConvexShape> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Domain(format!("shadow risk level {epsilon} outside (0, 1)")));
    }
    if obstacle.is_certain() {
        return Ok(obstacle.nominal.clone());
    }
    let s2 = chi2_isf(epsilon, obstacle.dof)?;
    Ok(obstacle.shadow_at_scale(s2.sqrt()))
}

/// Shadow scale `s` for a risk level (`s² = χ²` inverse survival at `ε`).
pub fn shadow_scale(epsilon: f64, dof: u32) -> Result<f64> {
    Ok(chi2_isf(epsilon, dof)?.sqrt())
}

#[derive(Clone, Copy, Debug)]
pub struct RiskSettings {
    pub eps_min: f64,
    pub eps_max: f64,
    /// Newton/bisection stopping tolerance on the shadow scale (relative).
    pub scale_tolerance: f64,
    pub max_iterations: usize,
    pub distance: DistanceSettings,
}

impl Default for RiskSettings {
    fn default() -> Self {
        Self {
            eps_min: 1e-6,
            eps_max: 1.0 - 1e-6,
            scale_tolerance: 1e-13,
            max_iterations: 100,
            distance: DistanceSettings {
                gjk: GjkSettings {
                    tolerance: 1e-11,
                    max_iterations: 256,
                },
                ..DistanceSettings::default()
            },
        }
    }
}

/// Where the bound landed relative to its clamps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundRegime {
    /// Contact with an interior shadow; the gradient is defined.
    Interior,
    /// Clear of the largest shadow considered: `ε = ε_min`.
    Clear,
    /// Touching or inside the smallest shadow (or the nominal obstacle): `ε = 1`.
    Saturated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RiskBound {
    pub epsilon: f64,
    /// `∂ε/∂q`; empty for shape-only queries, zero at the clamps.
    pub gradient: DVector<f64>,
    /// Unit vector from the shadow toward the robot at contact.
    pub contact_normal: Vector3<f64>,
    /// True when the gradient is meaningful (interior contact found).
    pub converged: bool,
    pub regime: BoundRegime,
    /// Shadow scale at the reported `ε`.
    pub scale: f64,
    /// Robot witness point at contact (world frame).
    pub witness_robot: Vector3<f64>,
    /// Signed distance from the robot to the nominal obstacle.
    pub nominal_distance: f64,
    /// Normal and robot witness of the nominal-obstacle query.
    pub nominal_normal: Vector3<f64>,
    pub nominal_witness: Vector3<f64>,
    /// `∂(nominal distance)/∂q`; filled by the configuration-space variants.
    pub nominal_gradient: DVector<f64>,
}

/// Smallest `ε` whose shadow the robot link does not penetrate.
pub fn risk_bound(
    shape: &ConvexShape,
    pose: &Pose,
    obstacle: &UncertainObstacle,
    settings: &RiskSettings,
) -> Result<RiskBound> {
    let nominal = signed_distance_with(shape, pose, &obstacle.nominal, &Pose::identity(), &settings.distance)?;
    let saturated = |r: &crate::geometry::DistanceResult| RiskBound {
        epsilon: 1.0,
        gradient: DVector::zeros(0),
        contact_normal: r.normal,
        converged: false,
        regime: BoundRegime::Saturated,
        scale: 0.0,
        witness_robot: r.witness_a,
        nominal_distance: nominal.signed_distance,
        nominal_normal: nominal.normal,
        nominal_witness: nominal.witness_a,
        nominal_gradient: DVector::zeros(0),
    };
    let clear = |r: &crate::geometry::DistanceResult, s: f64| RiskBound {
        epsilon: settings.eps_min,
        gradient: DVector::zeros(0),
        contact_normal: r.normal,
        converged: false,
        regime: BoundRegime::Clear,
        scale: s,
        witness_robot: r.witness_a,
        nominal_distance: nominal.signed_distance,
        nominal_normal: nominal.normal,
        nominal_witness: nominal.witness_a,
        nominal_gradient: DVector::zeros(0),
    };
    if nominal.signed_distance <= 0.0 {
        return Ok(saturated(&nominal));
    }
    if obstacle.is_certain() {
        return Ok(clear(&nominal, 0.0));
    }
    let dof = obstacle.dof;
    let s_lo = shadow_scale(settings.eps_max, dof)?;
    let s_hi = shadow_scale(settings.eps_min, dof)?;
    let gjk = &settings.distance.gjk;
    let dist_at = |s: f64| separation(shape, pose, &obstacle.shadow_at_scale(s), &Pose::identity(), gjk);

    let Some(at_lo) = dist_at(s_lo)? else {
        return Ok(saturated(&nominal));
    };
    if let Some(at_hi) = dist_at(s_hi)? {
        return Ok(clear(&at_hi, s_hi));
    }

    // Newton from the clear side; iterates stay clear because sd(s) is convex.
    let mut s = s_lo;
    let mut best = at_lo;
    let mut newton_ok = false;
    for _ in 0..settings.max_iterations {
        let slope = obstacle.ellipsoid_width(&best.normal);
        if slope <= 1e-14 {
            break;
        }
        let next = (s + best.signed_distance / slope).min(s_hi);
        if next - s <= settings.scale_tolerance * (1.0 + s) {
            newton_ok = true;
            break;
        }
        match dist_at(next)? {
            Some(r) => {
                s = next;
                best = r;
            }
            None => {
                // Roundoff put the step on contact; the previous iterate is within tolerance.
                newton_ok = best.signed_distance <= 1e-9 * (1.0 + s);
                break;
            }
        }
    }
    if !newton_ok {
        // Bisection on the sign of the separation.
        let mut lo = s;
        let mut hi = s_hi;
        for _ in 0..200 {
            if hi - lo <= settings.scale_tolerance * (1.0 + lo) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            match dist_at(mid)? {
                Some(r) => {
                    lo = mid;
                    best = r;
                }
                None => hi = mid,
            }
        }
        s = lo;
    }
    // Near contact the GJK normal is poorly resolved; read it off a slightly smaller shadow
    // with a tight duality gap instead.
    let fine = GjkSettings {
        tolerance: 1e-13,
        max_iterations: 512,
    };
    if let Ok(Some(r)) = separation(shape, pose, &obstacle.shadow_at_scale(s * (1.0 - 1e-4)), &Pose::identity(), &fine) {
        best.normal = r.normal;
        best.witness_a = r.witness_a;
    }
    Ok(RiskBound {
        epsilon: chi2_sf(s * s, dof).clamp(settings.eps_min, 1.0),
        gradient: DVector::zeros(0),
        contact_normal: best.normal,
        converged: true,
        regime: BoundRegime::Interior,
        scale: s,
        witness_robot: best.witness_a,
        nominal_distance: nominal.signed_distance,
        nominal_normal: nominal.normal,
        nominal_witness: nominal.witness_a,
        nominal_gradient: DVector::zeros(0),
    })
}

/// Risk bound for one robot link at configuration `q`, with `∂ε/∂q`.
pub fn risk_bound_with_gradient(
    robot: &RobotModel,
    q: &[f64],
    link_index: usize,
    obstacle: &UncertainObstacle,
    settings: &RiskSettings,
) -> Result<RiskBound> {
    let link = robot.links().get(link_index).ok_or(Error::InvalidLink(link_index))?;
    let states = robot.forward_kinematics(q)?;
    risk_bound_for_link(&link.shape, &states[link_index], obstacle, settings)
}

/// As [`risk_bound_with_gradient`] for a link whose forward kinematics is already known.
pub fn risk_bound_for_link(
    shape: &ConvexShape,
    state: &LinkState,
    obstacle: &UncertainObstacle,
    settings: &RiskSettings,
) -> Result<RiskBound> {
    let mut bound = risk_bound(shape, &state.pose, obstacle, settings)?;
    bound.nominal_gradient =
        DVector::from_column_slice((state.point_jacobian(&bound.nominal_witness).transpose() * bound.nominal_normal).as_slice());
    let dof = bound.nominal_gradient.len();
    bound.gradient = DVector::zeros(dof);
    if bound.regime != BoundRegime::Interior {
        return Ok(bound);
    }
    let slope = obstacle.ellipsoid_width(&bound.contact_normal);
    if slope <= 1e-14 {
        return Err(Error::GradientUndefined(
            "contact normal lies in the null space of the offset covariance".into(),
        ));
    }
    let dsd_dq = state.point_jacobian(&bound.witness_robot).transpose() * bound.contact_normal;
    // sd(q, s) = 0 gives ds/dq = (∂sd/∂q) / slope, and dε/ds = −2s·f_χ²(s²).
    let s = bound.scale;
    let deps_ds = -2.0 * s * chi2_pdf(s * s, obstacle.dof);
    bound.gradient = DVector::from_iterator(dof, dsd_dq.iter().map(|g| deps_ds * g / slope));
    Ok(bound)
}
