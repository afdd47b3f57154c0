use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::Pose;
use crate::error::{Error, Result};

/// A convex body described by its support function.
///
/// Minkowski sums and rigid transforms are kept as implicit nodes; no explicit
/// sum polytope is ever built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ShapeSpec", into = "ShapeSpec")]
pub enum ConvexShape {
    /// Convex hull of the listed vertices (meters).
    Polytope(Vec<Vector3<f64>>),
    /// Ball of the given radius centered at the origin.
    Sphere(f64),
    /// Segment `a`–`b` swept by a ball of `radius`.
    Capsule {
        a: Vector3<f64>,
        b: Vector3<f64>,
        radius: f64,
    },
    /// `{x : xᵀ A⁻¹ x ≤ 1}` for a symmetric shape matrix `A`. A semi-definite `A`
    /// gives a flat (lower-dimensional) ellipsoid.
    Ellipsoid(Matrix3<f64>),
    MinkowskiSum(Box<ConvexShape>, Box<ConvexShape>),
    Transformed(Box<ConvexShape>, Pose),
}

const SYMMETRY_TOL: f64 = 1e-9;

impl ConvexShape {
    pub fn polytope(vertices: Vec<Vector3<f64>>) -> Result<Self> {
        let s = ConvexShape::Polytope(vertices);
        s.validate()?;
        Ok(s)
    }

    /// Planar polygon embedded at `z = 0`.
    pub fn polygon(vertices: &[[f64; 2]]) -> Result<Self> {
        Self::polytope(
            vertices
                .iter()
                .map(|v| Vector3::new(v[0], v[1], 0.0))
                .collect(),
        )
    }

    /// Axis-aligned rectangle in the plane, centered at the origin.
    pub fn rectangle(length: f64, width: f64) -> Self {
        let (hl, hw) = (0.5 * length, 0.5 * width);
        ConvexShape::Polytope(vec![
            Vector3::new(-hl, -hw, 0.0),
            Vector3::new(hl, -hw, 0.0),
            Vector3::new(hl, hw, 0.0),
            Vector3::new(-hl, hw, 0.0),
        ])
    }

    /// Axis-aligned box centered at the origin.
    pub fn cuboid(half_extents: Vector3<f64>) -> Self {
        let mut v = Vec::with_capacity(8);
        for sx in [-1.0, 1.0] {
            for sy in [-1.0, 1.0] {
                for sz in [-1.0, 1.0] {
                    v.push(Vector3::new(
                        sx * half_extents.x,
                        sy * half_extents.y,
                        sz * half_extents.z,
                    ));
                }
            }
        }
        ConvexShape::Polytope(v)
    }

    pub fn sphere(radius: f64) -> Result<Self> {
        let s = ConvexShape::Sphere(radius);
        s.validate()?;
        Ok(s)
    }

    pub fn point() -> Self {
        ConvexShape::Polytope(vec![Vector3::zeros()])
    }

    /// Flat disk of the given radius in the `z = 0` plane.
    pub fn disk(radius: f64) -> Self {
        let r2 = radius * radius;
        ConvexShape::Ellipsoid(Matrix3::from_diagonal(&Vector3::new(r2, r2, 0.0)))
    }

    pub fn capsule(a: Vector3<f64>, b: Vector3<f64>, radius: f64) -> Result<Self> {
        let s = ConvexShape::Capsule { a, b, radius };
        s.validate()?;
        Ok(s)
    }

    /// Full-dimensional ellipsoid; the shape matrix must be symmetric positive definite.
    pub fn ellipsoid(shape: Matrix3<f64>) -> Result<Self> {
        let s = ConvexShape::Ellipsoid(shape);
        s.validate()?;
        let eig = shape.symmetric_eigenvalues();
        if eig.iter().any(|&l| l <= 0.0) {
            return Err(Error::InvalidShape(
                "ellipsoid shape matrix must be positive definite".into(),
            ));
        }
        Ok(s)
    }

    pub fn minkowski_sum(a: ConvexShape, b: ConvexShape) -> Self {
        ConvexShape::MinkowskiSum(Box::new(a), Box::new(b))
    }

    pub fn transformed(self, pose: Pose) -> Self {
        if pose.is_identity() {
            return self;
        }
        match self {
            ConvexShape::Transformed(inner, p) => {
                ConvexShape::Transformed(inner, pose.compose(&p))
            }
            other => ConvexShape::Transformed(Box::new(other), pose),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexShape::Polytope(v) => {
                if v.is_empty() {
                    return Err(Error::InvalidShape("polytope has no vertices".into()));
                }
                if v.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
                    return Err(Error::InvalidShape("polytope vertex is not finite".into()));
                }
            }
            ConvexShape::Sphere(r) => {
                if !(r.is_finite() && *r >= 0.0) {
                    return Err(Error::InvalidShape(format!("sphere radius {r} < 0")));
                }
            }
            ConvexShape::Capsule { a, b, radius } => {
                if !(radius.is_finite() && *radius >= 0.0) {
                    return Err(Error::InvalidShape(format!("capsule radius {radius} < 0")));
                }
                if !(a.iter().chain(b.iter()).all(|c| c.is_finite())) {
                    return Err(Error::InvalidShape("capsule endpoint is not finite".into()));
                }
            }
            ConvexShape::Ellipsoid(m) => {
                if !m.iter().all(|c| c.is_finite()) {
                    return Err(Error::InvalidShape("ellipsoid matrix is not finite".into()));
                }
                let asym = (m - m.transpose()).abs().max();
                if asym > SYMMETRY_TOL {
                    return Err(Error::InvalidShape(format!(
                        "ellipsoid matrix is not symmetric (residual {asym:e})"
                    )));
                }
                if m.diagonal().iter().any(|&d| d < 0.0) {
                    return Err(Error::InvalidShape(
                        "ellipsoid matrix has a negative diagonal entry".into(),
                    ));
                }
            }
            ConvexShape::MinkowskiSum(a, b) => {
                a.validate()?;
                b.validate()?;
            }
            ConvexShape::Transformed(s, _) => s.validate()?,
        }
        Ok(())
    }

    /// Farthest point of the shape along the unit vector `direction`.
    pub fn support(&self, direction: &Vector3<f64>) -> Result<Vector3<f64>> {
        let norm = direction.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDirection(norm));
        }
        self.validate()?;
        Ok(self.support_point(direction))
    }

    /// Support mapping for any nonzero direction; the shape must already be valid.
    pub(crate) fn support_point(&self, d: &Vector3<f64>) -> Vector3<f64> {
        match self {
            ConvexShape::Polytope(vertices) => {
                let mut best = vertices[0];
                let mut best_dot = best.dot(d);
                for v in &vertices[1..] {
                    let dot = v.dot(d);
                    if dot > best_dot {
                        best_dot = dot;
                        best = *v;
                    }
                }
                best
            }
            ConvexShape::Sphere(r) => {
                let n = d.norm();
                if n > 0.0 {
                    d * (*r / n)
                } else {
                    Vector3::zeros()
                }
            }
            ConvexShape::Capsule { a, b, radius } => {
                let end = if a.dot(d) >= b.dot(d) { a } else { b };
                let n = d.norm();
                if n > 0.0 {
                    end + d * (*radius / n)
                } else {
                    *end
                }
            }
            ConvexShape::Ellipsoid(m) => {
                let md = m * d;
                let q = d.dot(&md);
                if q > 1e-300 {
                    md / q.sqrt()
                } else {
                    Vector3::zeros()
                }
            }
            ConvexShape::MinkowskiSum(a, b) => a.support_point(d) + b.support_point(d),
            ConvexShape::Transformed(s, pose) => {
                let local = pose.inverse_transform_vector(d);
                pose.transform_point(&s.support_point(&local))
            }
        }
    }

    /// Exact axis-aligned bounding box of the shape placed at `pose`.
    pub fn aabb(&self, pose: &Pose) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::zeros();
        let mut hi = Vector3::zeros();
        for axis in 0..3 {
            let mut e = Vector3::zeros();
            e[axis] = 1.0;
            let local = pose.inverse_transform_vector(&e);
            hi[axis] = pose.transform_point(&self.support_point(&local))[axis];
            lo[axis] = pose.transform_point(&self.support_point(&-local))[axis];
        }
        (lo, hi)
    }
}

/// JSON wire form of [`ConvexShape`]. Units are meters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ShapeSpec {
    Sphere {
        radius: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<[f64; 3]>,
    },
    Polytope {
        vertices: Vec<[f64; 3]>,
    },
    /// Planar polygon at `z = 0`.
    Polygon {
        vertices: Vec<[f64; 2]>,
    },
    /// Box given by half extents, optionally posed.
    Box {
        half_extents: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pose: Option<Pose>,
    },
    Capsule {
        a: [f64; 3],
        b: [f64; 3],
        radius: f64,
    },
    /// Shape matrix rows; `{x : xᵀ A⁻¹ x ≤ 1}`.
    Ellipsoid {
        matrix: [[f64; 3]; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<[f64; 3]>,
    },
    /// Flat disk in the `z = 0` plane.
    Disk {
        radius: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<[f64; 2]>,
    },
    MinkowskiSum {
        a: Box<ShapeSpec>,
        b: Box<ShapeSpec>,
    },
    Transformed {
        shape: Box<ShapeSpec>,
        pose: Pose,
    },
}

fn centered(shape: ConvexShape, center: Option<[f64; 3]>) -> ConvexShape {
    match center {
        Some(c) => shape.transformed(Pose::from_translation(Vector3::from(c))),
        None => shape,
    }
}

impl TryFrom<ShapeSpec> for ConvexShape {
    type Error = Error;

    fn try_from(spec: ShapeSpec) -> Result<Self> {
        let shape = match spec {
            ShapeSpec::Sphere { radius, center } => centered(ConvexShape::sphere(radius)?, center),
            ShapeSpec::Polytope { vertices } => {
                ConvexShape::polytope(vertices.into_iter().map(Vector3::from).collect())?
            }
            ShapeSpec::Polygon { vertices } => ConvexShape::polygon(&vertices)?,
            ShapeSpec::Box { half_extents, pose } => {
                if half_extents.iter().any(|h| !(h.is_finite() && *h >= 0.0)) {
                    return Err(Error::InvalidShape("box half extents must be >= 0".into()));
                }
                ConvexShape::cuboid(Vector3::from(half_extents))
                    .transformed(pose.unwrap_or_default())
            }
            ShapeSpec::Capsule { a, b, radius } => {
                ConvexShape::capsule(Vector3::from(a), Vector3::from(b), radius)?
            }
            ShapeSpec::Ellipsoid { matrix, center } => {
                let m = Matrix3::from_fn(|i, j| matrix[i][j]);
                centered(ConvexShape::ellipsoid(m)?, center)
            }
            ShapeSpec::Disk { radius, center } => {
                if !(radius.is_finite() && radius >= 0.0) {
                    return Err(Error::InvalidShape(format!("disk radius {radius} < 0")));
                }
                centered(ConvexShape::disk(radius), center.map(|c| [c[0], c[1], 0.0]))
            }
            ShapeSpec::MinkowskiSum { a, b } => {
                ConvexShape::minkowski_sum((*a).try_into()?, (*b).try_into()?)
            }
            ShapeSpec::Transformed { shape, pose } => {
                ConvexShape::try_from(*shape)?.transformed(pose)
            }
        };
        shape.validate()?;
        Ok(shape)
    }
}

impl From<ConvexShape> for ShapeSpec {
    fn from(shape: ConvexShape) -> Self {
        match shape {
            ConvexShape::Polytope(v) => ShapeSpec::Polytope {
                vertices: v.into_iter().map(Into::into).collect(),
            },
            ConvexShape::Sphere(radius) => ShapeSpec::Sphere {
                radius,
                center: None,
            },
            ConvexShape::Capsule { a, b, radius } => ShapeSpec::Capsule {
                a: a.into(),
                b: b.into(),
                radius,
            },
            ConvexShape::Ellipsoid(m) => ShapeSpec::Ellipsoid {
                matrix: [
                    [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
                    [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
                    [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
                ],
                center: None,
            },
            ConvexShape::MinkowskiSum(a, b) => ShapeSpec::MinkowskiSum {
                a: Box::new((*a).into()),
                b: Box::new((*b).into()),
            },
            ConvexShape::Transformed(s, pose) => ShapeSpec::Transformed {
                shape: Box::new((*s).into()),
                pose,
            },
        }
    }
}
