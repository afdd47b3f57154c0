//! Expanding-polytope penetration depth for overlapping shapes.

use nalgebra::{Vector2, Vector3};

use super::gjk::{closest_on_triangle, MinkowskiDifference, SupportPoint};
use crate::error::{Error, Result};

type V3 = Vector3<f64>;

#[derive(Clone, Copy, Debug)]
pub struct EpaSettings {
    /// Gap between the closest face and the support plane along its normal (m).
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for EpaSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-7,
            max_iterations: 128,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Penetration {
    pub depth: f64,
    /// Outward normal of `A − B` at the closest boundary point (points from A into B).
    pub normal: V3,
    pub witness_a: V3,
    pub witness_b: V3,
}

/// Perpendicular unit vectors spanning the plane orthogonal to `n`.
fn orthonormal_basis(n: &V3) -> (V3, V3) {
    let helper = if n.x.abs() < 0.6 {
        V3::x()
    } else if n.y.abs() < 0.6 {
        V3::y()
    } else {
        V3::z()
    };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    (u, v)
}

fn scale_of(points: &[SupportPoint]) -> f64 {
    points.iter().map(|p| p.w.norm()).fold(1.0, f64::max)
}

pub(crate) fn epa(
    m: &MinkowskiDifference<'_>,
    simplex: &[SupportPoint],
    settings: &EpaSettings,
) -> Result<Penetration> {
    let mut pts: Vec<SupportPoint> = Vec::with_capacity(8);
    for p in simplex {
        if pts.iter().all(|q| (q.w - p.w).norm_squared() > 1e-24) {
            pts.push(*p);
        }
    }
    let scale = scale_of(&pts);
    let lin_tol = 1e-10 * scale;

    // Grow to a non-degenerate segment.
    if pts.len() == 1 {
        let mut best: Option<(f64, SupportPoint)> = None;
        for d in [V3::x(), -V3::x(), V3::y(), -V3::y(), V3::z(), -V3::z()] {
            let s = m.support(&d);
            let dist = (s.w - pts[0].w).norm();
            if best.as_ref().map_or(true, |(bd, _)| dist > *bd) {
                best = Some((dist, s));
            }
        }
        let (dist, s) = best.unwrap();
        if dist <= lin_tol {
            // The difference is a single point at the origin.
            return Ok(Penetration {
                depth: 0.0,
                normal: V3::x(),
                witness_a: pts[0].a,
                witness_b: pts[0].b,
            });
        }
        pts.push(s);
    }
    // Collinear triples collapse to their extreme pair.
    if pts.len() == 3 {
        let n = (pts[1].w - pts[0].w).cross(&(pts[2].w - pts[0].w));
        if n.norm() <= lin_tol * scale {
            let dir = pts
                .iter()
                .skip(1)
                .map(|p| p.w - pts[0].w)
                .max_by(|a, b| a.norm().total_cmp(&b.norm()))
                .unwrap();
            let proj: Vec<f64> = pts.iter().map(|p| p.w.dot(&dir)).collect();
            let lo = (0..3).min_by(|&i, &j| proj[i].total_cmp(&proj[j])).unwrap();
            let hi = (0..3).max_by(|&i, &j| proj[i].total_cmp(&proj[j])).unwrap();
            pts = vec![pts[lo], pts[hi]];
        }
    }
    // Grow a segment to a triangle.
    if pts.len() == 2 {
        let axis = (pts[1].w - pts[0].w).normalize();
        let (u, v) = orthonormal_basis(&axis);
        let mut best: Option<(f64, SupportPoint)> = None;
        for k in 0..8 {
            let ang = k as f64 * std::f64::consts::FRAC_PI_4;
            let d = u * ang.cos() + v * ang.sin();
            let s = m.support(&d);
            let off = s.w - pts[0].w;
            let dist = (off - axis * off.dot(&axis)).norm();
            if best.as_ref().map_or(true, |(bd, _)| dist > *bd) {
                best = Some((dist, s));
            }
        }
        let (dist, s) = best.unwrap();
        if dist <= lin_tol {
            // Segment-shaped difference: zero depth in every perpendicular direction.
            let n = u;
            return Ok(Penetration {
                depth: 0.0,
                normal: n,
                witness_a: pts[0].a,
                witness_b: pts[0].b,
            });
        }
        pts.push(s);
    }
    if pts.len() == 3 {
        let n = (pts[1].w - pts[0].w)
            .cross(&(pts[2].w - pts[0].w))
            .normalize();
        let up = m.support(&n);
        let down = m.support(&-n);
        let h_up = (up.w - pts[0].w).dot(&n);
        let h_down = (pts[0].w - down.w).dot(&n);
        let flat_tol = 1e-10 * scale;
        if h_up <= flat_tol && h_down <= flat_tol {
            return epa_planar(m, &pts, &n, settings);
        }
        pts.push(if h_up >= h_down { up } else { down });
    }
    epa_3d(m, pts, settings)
}

#[derive(Clone, Copy, Debug)]
struct Face {
    v: [usize; 3],
    normal: V3,
    dist: f64,
    alive: bool,
}

fn make_face(pts: &[SupportPoint], interior: &V3, i: usize, j: usize, k: usize) -> Face {
    let a = pts[i].w;
    let mut n = (pts[j].w - a).cross(&(pts[k].w - a));
    let mut v = [i, j, k];
    let len = n.norm();
    if len <= 1e-300 {
        return Face {
            v,
            normal: V3::zeros(),
            dist: f64::INFINITY,
            alive: true,
        };
    }
    n /= len;
    if n.dot(&(a - interior)) < 0.0 {
        n = -n;
        v = [i, k, j];
    }
    Face {
        v,
        normal: n,
        dist: n.dot(&a),
        alive: true,
    }
}

fn epa_3d(
    m: &MinkowskiDifference<'_>,
    mut pts: Vec<SupportPoint>,
    settings: &EpaSettings,
) -> Result<Penetration> {
    let interior: V3 = pts.iter().map(|p| p.w).sum::<V3>() / pts.len() as f64;
    let mut faces: Vec<Face> = match pts.len() {
        4 => vec![
            make_face(&pts, &interior, 0, 1, 2),
            make_face(&pts, &interior, 0, 1, 3),
            make_face(&pts, &interior, 0, 2, 3),
            make_face(&pts, &interior, 1, 2, 3),
        ],
        n => {
            return Err(Error::NumericalFailure {
                what: "EPA initial polytope",
                iterations: 0,
                estimate: n as f64,
            })
        }
    };

    let mut best_gap = f64::INFINITY;
    let mut best_dist = 0.0;
    let mut best_normal = V3::zeros();
    for _ in 0..settings.max_iterations {
        let (fi, face) = faces
            .iter()
            .enumerate()
            .filter(|(_, f)| f.alive)
            .min_by(|a, b| a.1.dist.total_cmp(&b.1.dist))
            .map(|(i, f)| (i, *f))
            .ok_or(Error::NumericalFailure {
                what: "EPA",
                iterations: 0,
                estimate: 0.0,
            })?;
        let s = m.support(&face.normal);
        let gap = s.w.dot(&face.normal) - face.dist;
        if gap < best_gap {
            best_gap = gap;
            best_dist = face.dist;
            best_normal = face.normal;
        }
        let duplicate = pts.iter().any(|p| (p.w - s.w).norm_squared() <= 1e-24);
        if gap <= settings.tolerance || duplicate {
            return Ok(finish_face(&pts, &face));
        }
        let new_index = pts.len();
        pts.push(s);
        let mut horizon: Vec<(usize, usize)> = Vec::new();
        for f in faces.iter_mut().filter(|f| f.alive) {
            if f.normal.dot(&(s.w - pts[f.v[0]].w)) > 1e-14 * (1.0 + f.dist.abs()) {
                f.alive = false;
                for (x, y) in [(f.v[0], f.v[1]), (f.v[1], f.v[2]), (f.v[2], f.v[0])] {
                    if let Some(pos) = horizon.iter().position(|&(p, q)| p == y && q == x) {
                        horizon.swap_remove(pos);
                    } else {
                        horizon.push((x, y));
                    }
                }
            }
        }
        if faces[fi].alive {
            // Roundoff kept the selected face; nothing further to expand.
            return Ok(finish_face(&pts, &face));
        }
        for (x, y) in horizon {
            faces.push(make_face(&pts, &interior, x, y, new_index));
        }
        faces.retain(|f| f.alive);
    }
    if let Some(p) = refine_direction(m, best_normal, settings.tolerance) {
        return Ok(p);
    }
    Err(Error::NumericalFailure {
        what: "EPA",
        iterations: settings.max_iterations,
        estimate: -best_dist,
    })
}

fn finish_face(pts: &[SupportPoint], face: &Face) -> Penetration {
    let [i, j, k] = face.v;
    let p = face.normal * face.dist;
    // Barycentric weights of the projected origin on the face.
    let bary = closest_on_triangle(&(pts[i].w - p), &(pts[j].w - p), &(pts[k].w - p));
    let l = bary.0;
    Penetration {
        depth: face.dist.max(0.0),
        normal: face.normal,
        witness_a: pts[i].a * l[0] + pts[j].a * l[1] + pts[k].a * l[2],
        witness_b: pts[i].b * l[0] + pts[j].b * l[1] + pts[k].b * l[2],
    }
}

/// Local descent of the support function `h(n) = max_w n·w` over unit directions,
/// started from `n`. At a stationary direction the support point lies along `n`, so
/// `h(n)` is the penetration depth for that contact. Used when polytope expansion
/// is too slow, as for curved boundaries.
fn refine_direction(m: &MinkowskiDifference<'_>, n: V3, tolerance: f64) -> Option<Penetration> {
    let mut n = n.normalize();
    let mut s = m.support(&n);
    let mut h = s.w.dot(&n);
    let mut angle: f64 = 0.1;
    for _ in 0..400 {
        let tangent = s.w - n * h;
        let t = tangent.norm();
        if t <= tolerance || angle < 1e-13 {
            return Some(Penetration {
                depth: h.max(0.0),
                normal: n,
                witness_a: s.a,
                witness_b: s.b,
            });
        }
        let trial = (n - tangent * (angle.tan() / t)).normalize();
        let ts = m.support(&trial);
        let th = ts.w.dot(&trial);
        if th < h {
            n = trial;
            s = ts;
            h = th;
            angle = (angle * 2.0).min(0.5);
        } else {
            angle *= 0.5;
        }
    }
    None
}

/// EPA restricted to the plane with normal `plane_normal` for flat differences.
fn epa_planar(
    m: &MinkowskiDifference<'_>,
    tri: &[SupportPoint],
    plane_normal: &V3,
    settings: &EpaSettings,
) -> Result<Penetration> {
    let (e1, e2) = orthonormal_basis(plane_normal);
    let to2 = |w: &V3| Vector2::new(w.dot(&e1), w.dot(&e2));
    let mut pts: Vec<SupportPoint> = tri.to_vec();
    let centroid: Vector2<f64> =
        pts.iter().map(|p| to2(&p.w)).sum::<Vector2<f64>>() / pts.len() as f64;
    // Counter-clockwise order around the centroid.
    let mut ring: Vec<usize> = (0..pts.len()).collect();
    ring.sort_by(|&i, &j| {
        let a = to2(&pts[i].w) - centroid;
        let b = to2(&pts[j].w) - centroid;
        a.y.atan2(a.x).total_cmp(&b.y.atan2(b.x))
    });

    let edge = |pts: &[SupportPoint], i: usize, j: usize| -> (Vector2<f64>, f64) {
        let a = to2(&pts[i].w);
        let b = to2(&pts[j].w);
        let d = b - a;
        let len = d.norm();
        if len <= 1e-300 {
            return (Vector2::zeros(), f64::INFINITY);
        }
        let n = Vector2::new(d.y, -d.x) / len;
        (n, n.dot(&a))
    };

    let mut best_dist = 0.0;
    let mut best_upper = (f64::INFINITY, V3::zeros());
    for _ in 0..settings.max_iterations {
        let count = ring.len();
        let (e, (n2, dist)) = (0..count)
            .map(|e| (e, edge(&pts, ring[e], ring[(e + 1) % count])))
            .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
            .unwrap();
        best_dist = dist;
        let dir = e1 * n2.x + e2 * n2.y;
        let s = m.support(&dir);
        let gap = s.w.dot(&dir) - dist;
        if s.w.dot(&dir) < best_upper.0 {
            best_upper = (s.w.dot(&dir), dir);
        }
        let duplicate = pts.iter().any(|p| (p.w - s.w).norm_squared() <= 1e-24);
        if gap <= settings.tolerance || duplicate {
            let (i, j) = (ring[e], ring[(e + 1) % count]);
            let a = pts[i].w;
            let b = pts[j].w;
            let ab = b - a;
            let t = if ab.norm_squared() > 0.0 {
                ((dir * dist - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0)
            } else {
                0.0
            };
            return Ok(Penetration {
                depth: dist.max(0.0),
                normal: dir,
                witness_a: pts[i].a * (1.0 - t) + pts[j].a * t,
                witness_b: pts[i].b * (1.0 - t) + pts[j].b * t,
            });
        }
        let new_index = pts.len();
        pts.push(s);
        let w2 = to2(&s.w);
        let visible: Vec<bool> = (0..count)
            .map(|k| {
                let (nk, dk) = edge(&pts, ring[k], ring[(k + 1) % count]);
                nk.dot(&w2) - dk > 1e-14 * (1.0 + dk.abs())
            })
            .collect();
        // Visible edges form one cyclic run; replace its interior vertices with the new point.
        let start = (0..count)
            .find(|&k| visible[k] && !visible[(k + count - 1) % count])
            .unwrap_or(e);
        let mut next = Vec::with_capacity(count + 1);
        let mut k = (start + 1) % count;
        // Skip vertices strictly inside the visible run.
        while visible[k] && k != start {
            k = (k + 1) % count;
        }
        next.push(ring[start]);
        next.push(new_index);
        let stop = start;
        loop {
            next.push(ring[k]);
            k = (k + 1) % count;
            if k == stop {
                break;
            }
        }
        ring = next;
    }
    if let Some(p) = refine_direction(m, best_upper.1, settings.tolerance) {
        return Ok(p);
    }
    Err(Error::NumericalFailure {
        what: "EPA (planar)",
        iterations: settings.max_iterations,
        estimate: -best_dist,
    })
}
