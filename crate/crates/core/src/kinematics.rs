//! Robot models: a tree of joints carrying convex collision geometry.
//!
//! Each joint contributes 0 (fixed), 1 (revolute, prismatic) or 3 (planar base
//! `x, y, θ`) configuration coordinates, in declaration order.

use nalgebra::{DMatrix, Matrix3xX, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConvexShape, Pose};

#[derive(Clone, Debug, PartialEq)]
pub enum JointKind {
    /// Planar base: translation in the parent `xy` plane, then rotation about parent `z`.
    Planar,
    Revolute(Unit<Vector3<f64>>),
    Prismatic(Unit<Vector3<f64>>),
    Fixed,
}

impl JointKind {
    pub fn dof(&self) -> usize {
        match self {
            JointKind::Planar => 3,
            JointKind::Revolute(_) | JointKind::Prismatic(_) => 1,
            JointKind::Fixed => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub parent: Option<usize>,
    /// Placement of the joint frame in the parent frame before joint motion.
    pub origin: Pose,
    /// Per-coordinate `(lower, upper)`; infinite bounds mean unlimited.
    pub limits: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub name: String,
    /// Index of the joint whose frame carries this link.
    pub joint: usize,
    pub shape: ConvexShape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    joints: Vec<Joint>,
    links: Vec<Link>,
    coordinate_offsets: Vec<usize>,
    dof: usize,
}

/// How one configuration coordinate moves attached points, in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CoordinateMotion {
    Rotation {
        axis: Vector3<f64>,
        point: Vector3<f64>,
    },
    Translation {
        axis: Vector3<f64>,
    },
}

/// World pose of one link plus what is needed for point Jacobians.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkState {
    pub pose: Pose,
    /// `(coordinate index, motion)` for every coordinate on the link's chain.
    pub motions: Vec<(usize, CoordinateMotion)>,
    dof: usize,
}

impl LinkState {
    /// `3 × n` Jacobian of a world point rigidly attached to this link.
    pub fn point_jacobian(&self, world_point: &Vector3<f64>) -> Matrix3xX<f64> {
        let mut jac = Matrix3xX::zeros(self.dof);
        for (i, motion) in &self.motions {
            let col = match motion {
                CoordinateMotion::Rotation { axis, point } => axis.cross(&(world_point - point)),
                CoordinateMotion::Translation { axis } => *axis,
            };
            jac.set_column(*i, &col);
        }
        jac
    }
}

impl RobotModel {
    pub fn new(joints: Vec<Joint>, links: Vec<Link>) -> Result<Self> {
        let mut coordinate_offsets = Vec::with_capacity(joints.len());
        let mut dof = 0;
        for (i, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(Error::InvalidRobot(format!(
                        "joint `{}` must be declared after its parent",
                        j.name
                    )));
                }
            }
            if j.limits.len() != j.kind.dof() {
                return Err(Error::InvalidRobot(format!(
                    "joint `{}` has {} limit pairs for {} coordinates",
                    j.name,
                    j.limits.len(),
                    j.kind.dof()
                )));
            }
            if let Some((lo, hi)) = j.limits.iter().find(|(lo, hi)| !(lo <= hi)) {
                return Err(Error::InvalidRobot(format!(
                    "joint `{}` has lower limit {lo} above upper limit {hi}",
                    j.name
                )));
            }
            if joints[..i].iter().any(|o| o.name == j.name) {
                return Err(Error::InvalidRobot(format!("duplicate joint `{}`", j.name)));
            }
            coordinate_offsets.push(dof);
            dof += j.kind.dof();
        }
        for l in &links {
            if l.joint >= joints.len() {
                return Err(Error::InvalidRobot(format!(
                    "link `{}` refers to missing joint {}",
                    l.name, l.joint
                )));
            }
            l.shape.validate()?;
        }
        Ok(Self {
            joints,
            links,
            coordinate_offsets,
            dof,
        })
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    /// Per-coordinate limits in configuration order.
    pub fn limits(&self) -> Vec<(f64, f64)> {
        self.joints.iter().flat_map(|j| j.limits.iter().copied()).collect()
    }

    /// Coordinates that are angles without limits (interpolated on the shortest arc).
    pub fn wrapping_coordinates(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for (j, off) in self.joints.iter().zip(&self.coordinate_offsets) {
            let unlimited = |c: usize| j.limits[c].0.is_infinite() && j.limits[c].1.is_infinite();
            match j.kind {
                JointKind::Planar if unlimited(2) => out.push(off + 2),
                JointKind::Revolute(_) if unlimited(0) => out.push(*off),
                _ => {}
            }
        }
        out
    }

    pub fn forward_kinematics(&self, q: &[f64]) -> Result<Vec<LinkState>> {
        if q.len() != self.dof {
            return Err(Error::DimensionMismatch {
                expected: self.dof,
                got: q.len(),
            });
        }
        let mut frames: Vec<Pose> = Vec::with_capacity(self.joints.len());
        let mut motions: Vec<Vec<(usize, CoordinateMotion)>> =
            Vec::with_capacity(self.joints.len());
        for (j, off) in self.joints.iter().zip(&self.coordinate_offsets) {
            let (parent_pose, mut chain) = match j.parent {
                Some(p) => (frames[p], motions[p].clone()),
                None => (Pose::identity(), Vec::new()),
            };
            let base = parent_pose.compose(&j.origin);
            let frame = match &j.kind {
                JointKind::Planar => {
                    let (x, y, th) = (q[*off], q[off + 1], q[off + 2]);
                    let ex = base.transform_vector(&Vector3::x());
                    let ey = base.transform_vector(&Vector3::y());
                    let ez = base.transform_vector(&Vector3::z());
                    let f = base.compose(&Pose::planar(x, y, th));
                    chain.push((*off, CoordinateMotion::Translation { axis: ex }));
                    chain.push((off + 1, CoordinateMotion::Translation { axis: ey }));
                    chain.push((
                        off + 2,
                        CoordinateMotion::Rotation {
                            axis: ez,
                            point: f.translation,
                        },
                    ));
                    f
                }
                JointKind::Revolute(axis) => {
                    let motion = Pose {
                        rotation: Rotation3::from_axis_angle(axis, q[*off]),
                        translation: Vector3::zeros(),
                    };
                    chain.push((
                        *off,
                        CoordinateMotion::Rotation {
                            axis: base.transform_vector(axis),
                            point: base.translation,
                        },
                    ));
                    base.compose(&motion)
                }
                JointKind::Prismatic(axis) => {
                    chain.push((
                        *off,
                        CoordinateMotion::Translation {
                            axis: base.transform_vector(axis),
                        },
                    ));
                    base.compose(&Pose::from_translation(axis.into_inner() * q[*off]))
                }
                JointKind::Fixed => base,
            };
            frames.push(frame);
            motions.push(chain);
        }
        Ok(self
            .links
            .iter()
            .map(|l| LinkState {
                pose: frames[l.joint],
                motions: motions[l.joint].clone(),
                dof: self.dof,
            })
            .collect())
    }

    /// Jacobian (`3 × n`) of a world point attached to link `link_index` at configuration `q`.
    pub fn witness_jacobian(
        &self,
        q: &[f64],
        link_index: usize,
        world_point: &Vector3<f64>,
    ) -> Result<Matrix3xX<f64>> {
        if link_index >= self.links.len() {
            return Err(Error::InvalidLink(link_index));
        }
        let states = self.forward_kinematics(q)?;
        Ok(states[link_index].point_jacobian(world_point))
    }

    /// Two-coordinate point robot moving in the plane (`x`, `y`).
    pub fn point_2d(shape: ConvexShape) -> Self {
        let unlimited = vec![(f64::NEG_INFINITY, f64::INFINITY)];
        let joints = vec![
            Joint {
                name: "x".into(),
                kind: JointKind::Prismatic(Vector3::x_axis()),
                parent: None,
                origin: Pose::identity(),
                limits: unlimited.clone(),
            },
            Joint {
                name: "y".into(),
                kind: JointKind::Prismatic(Vector3::y_axis()),
                parent: Some(0),
                origin: Pose::identity(),
                limits: unlimited,
            },
        ];
        let links = vec![Link {
            name: "body".into(),
            joint: 1,
            shape,
        }];
        Self::new(joints, links).expect("static model is valid")
    }

    /// Three-coordinate point robot moving in space.
    pub fn point_3d(shape: ConvexShape) -> Self {
        let unlimited = vec![(f64::NEG_INFINITY, f64::INFINITY)];
        let joints = [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()]
            .into_iter()
            .enumerate()
            .map(|(i, axis)| Joint {
                name: ["x", "y", "z"][i].into(),
                kind: JointKind::Prismatic(axis),
                parent: i.checked_sub(1),
                origin: Pose::identity(),
                limits: unlimited.clone(),
            })
            .collect();
        let links = vec![Link {
            name: "body".into(),
            joint: 2,
            shape,
        }];
        Self::new(joints, links).expect("static model is valid")
    }

    /// Rigid planar body on a `(x, y, θ)` base, e.g. a car footprint.
    pub fn planar_body(shape: ConvexShape) -> Self {
        let joints = vec![Joint {
            name: "base".into(),
            kind: JointKind::Planar,
            parent: None,
            origin: Pose::identity(),
            limits: vec![(f64::NEG_INFINITY, f64::INFINITY); 3],
        }];
        let links = vec![Link {
            name: "body".into(),
            joint: 0,
            shape,
        }];
        Self::new(joints, links).expect("static model is valid")
    }

    /// Planar serial arm of revolute `z` joints with segment links of the given lengths.
    pub fn planar_arm(lengths: &[f64], radius: f64) -> Result<Self> {
        let mut joints = Vec::new();
        let mut links = Vec::new();
        let mut prev_len = 0.0;
        for (i, &len) in lengths.iter().enumerate() {
            joints.push(Joint {
                name: format!("j{}", i + 1),
                kind: JointKind::Revolute(Vector3::z_axis()),
                parent: i.checked_sub(1),
                origin: Pose::from_translation(Vector3::new(prev_len, 0.0, 0.0)),
                limits: vec![(f64::NEG_INFINITY, f64::INFINITY)],
            });
            links.push(Link {
                name: format!("l{}", i + 1),
                joint: i,
                shape: ConvexShape::capsule(Vector3::zeros(), Vector3::new(len, 0.0, 0.0), radius)?,
            });
            prev_len = len;
        }
        Self::new(joints, links)
    }
}

/// JSON form of a robot model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub joints: Vec<JointSpec>,
    pub links: Vec<LinkSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    /// `planar`, `revolute`, `prismatic` or `fixed`.
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub parent: Option<String>,
    #[serde(default)]
    pub axis: Option<[f64; 3]>,
    #[serde(default)]
    pub origin: Option<Pose>,
    /// One `[lower, upper]` pair per coordinate; `null` entries mean unlimited.
    #[serde(default)]
    pub limits: Option<Vec<[Option<f64>; 2]>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub name: String,
    pub joint: String,
    pub shape: ConvexShape,
}

impl RobotSpec {
    pub fn build(&self) -> Result<RobotModel> {
        let mut joints: Vec<Joint> = Vec::with_capacity(self.joints.len());
        for (i, js) in self.joints.iter().enumerate() {
            let path = format!("robot.joints[{i}]");
            let axis = || -> Result<Unit<Vector3<f64>>> {
                let a = js
                    .axis
                    .ok_or_else(|| Error::schema(format!("{path}.axis"), "axis is required"))?;
                let v = Vector3::from(a);
                if v.norm() < 1e-9 {
                    return Err(Error::schema(format!("{path}.axis"), "axis must be nonzero"));
                }
                Ok(Unit::new_normalize(v))
            };
            let kind = match js.kind.as_str() {
                "planar" => JointKind::Planar,
                "revolute" => JointKind::Revolute(axis()?),
                "prismatic" => JointKind::Prismatic(axis()?),
                "fixed" => JointKind::Fixed,
                other => {
                    return Err(Error::schema(
                        format!("{path}.type"),
                        format!("unknown joint type `{other}`"),
                    ))
                }
            };
            let parent = match &js.parent {
                None => None,
                Some(name) => Some(
                    joints
                        .iter()
                        .position(|j| &j.name == name)
                        .ok_or_else(|| {
                            Error::schema(
                                format!("{path}.parent"),
                                format!("parent `{name}` is not declared before this joint"),
                            )
                        })?,
                ),
            };
            let limits = match &js.limits {
                None => vec![(f64::NEG_INFINITY, f64::INFINITY); kind.dof()],
                Some(l) => l
                    .iter()
                    .map(|[lo, hi]| {
                        (lo.unwrap_or(f64::NEG_INFINITY), hi.unwrap_or(f64::INFINITY))
                    })
                    .collect(),
            };
            if limits.len() != kind.dof() {
                return Err(Error::schema(
                    format!("{path}.limits"),
                    format!("expected {} limit pairs", kind.dof()),
                ));
            }
            joints.push(Joint {
                name: js.name.clone(),
                kind,
                parent,
                origin: js.origin.unwrap_or_default(),
                limits,
            });
        }
        let mut links = Vec::with_capacity(self.links.len());
        for (i, ls) in self.links.iter().enumerate() {
            let joint = joints.iter().position(|j| j.name == ls.joint).ok_or_else(|| {
                Error::schema(
                    format!("robot.links[{i}].joint"),
                    format!("unknown joint `{}`", ls.joint),
                )
            })?;
            links.push(Link {
                name: ls.name.clone(),
                joint,
                shape: ls.shape.clone(),
            });
        }
        RobotModel::new(joints, links)
    }
}

/// Central finite-difference Jacobian of a world point, for tests and audits.
pub fn finite_difference_point_jacobian(
    robot: &RobotModel,
    q: &[f64],
    link_index: usize,
    local_point: &Vector3<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    let n = robot.dof();
    let mut jac = DMatrix::zeros(3, n);
    let mut qp = q.to_vec();
    for i in 0..n {
        qp[i] = q[i] + step;
        let plus = robot.forward_kinematics(&qp)?[link_index]
            .pose
            .transform_point(local_point);
        qp[i] = q[i] - step;
        let minus = robot.forward_kinematics(&qp)?[link_index]
            .pose
            .transform_point(local_point);
        qp[i] = q[i];
        jac.set_column(i, &((plus - minus) / (2.0 * step)));
    }
    Ok(jac)
}
