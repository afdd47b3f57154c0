//! GJK distance on the Minkowski difference `A − B`.

use nalgebra::Vector3;

use super::{ConvexShape, Pose};
use crate::error::{Error, Result};

type V3 = Vector3<f64>;

/// A vertex of the Minkowski difference together with the support points it came from.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SupportPoint {
    pub w: V3,
    pub a: V3,
    pub b: V3,
}

/// Support mapping of `A(pose_a) − B(pose_b)`.
pub(crate) struct MinkowskiDifference<'a> {
    pub a: &'a ConvexShape,
    pub pose_a: &'a Pose,
    pub b: &'a ConvexShape,
    pub pose_b: &'a Pose,
}

impl MinkowskiDifference<'_> {
    pub fn support(&self, d: &V3) -> SupportPoint {
        let a = self
            .pose_a
            .transform_point(&self.a.support_point(&self.pose_a.inverse_transform_vector(d)));
        let b = self
            .pose_b
            .transform_point(&self.b.support_point(&self.pose_b.inverse_transform_vector(&-d)));
        SupportPoint { w: a - b, a, b }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GjkSettings {
    /// Stop once the distance upper and lower bounds are this close (m).
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for GjkSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 128,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum GjkOutcome {
    Separated {
        distance: f64,
        witness_a: V3,
        witness_b: V3,
        /// Unit vector from B toward A.
        normal: V3,
    },
    /// The origin lies in (or on) the difference; `simplex` encloses or touches it.
    Overlapping { simplex: Vec<SupportPoint> },
}

#[derive(Clone, Debug)]
pub(crate) struct Simplex {
    pts: [SupportPoint; 4],
    lambda: [f64; 4],
    len: usize,
}

impl Simplex {
    fn new(p: SupportPoint) -> Self {
        Self {
            pts: [p; 4],
            lambda: [1.0, 0.0, 0.0, 0.0],
            len: 1,
        }
    }

    pub fn points(&self) -> &[SupportPoint] {
        &self.pts[..self.len]
    }

    fn push(&mut self, p: SupportPoint) {
        debug_assert!(self.len < 4);
        self.pts[self.len] = p;
        self.len += 1;
    }

    fn closest(&self) -> V3 {
        (0..self.len).map(|i| self.pts[i].w * self.lambda[i]).sum()
    }

    fn witnesses(&self) -> (V3, V3) {
        let mut a = V3::zeros();
        let mut b = V3::zeros();
        for i in 0..self.len {
            a += self.pts[i].a * self.lambda[i];
            b += self.pts[i].b * self.lambda[i];
        }
        (a, b)
    }

    /// Replaces the simplex by the smallest face carrying the point closest to the
    /// origin. Returns `true` when the origin is enclosed by a full tetrahedron.
    fn reduce(&mut self) -> bool {
        let w: Vec<V3> = self.points().iter().map(|p| p.w).collect();
        let weights = match self.len {
            1 => Barycentric::full(&[1.0]),
            2 => closest_on_segment(&w[0], &w[1]),
            3 => closest_on_triangle(&w[0], &w[1], &w[2]),
            4 => match closest_on_tetrahedron(&w[0], &w[1], &w[2], &w[3]) {
                Some(b) => b,
                None => return true,
            },
            _ => unreachable!(),
        };
        let mut kept = 0;
        let old = self.pts;
        for i in 0..self.len {
            if weights.0[i] > 0.0 {
                self.pts[kept] = old[i];
                self.lambda[kept] = weights.0[i];
                kept += 1;
            }
        }
        if kept == 0 {
            // Fully degenerate; keep the first vertex.
            self.pts[0] = old[0];
            self.lambda[0] = 1.0;
            kept = 1;
        }
        self.len = kept;
        false
    }
}

/// Barycentric weights over up to four simplex vertices.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Barycentric(pub [f64; 4]);

impl Barycentric {
    fn full(w: &[f64]) -> Self {
        let mut out = [0.0; 4];
        out[..w.len()].copy_from_slice(w);
        Barycentric(out)
    }

    fn point(&self, pts: &[V3]) -> V3 {
        pts.iter().zip(self.0.iter()).map(|(p, l)| p * *l).sum()
    }
}

pub(crate) fn closest_on_segment(a: &V3, b: &V3) -> Barycentric {
    let ab = b - a;
    let denom = ab.norm_squared();
    if denom <= f64::MIN_POSITIVE {
        return Barycentric::full(&[1.0]);
    }
    let t = -a.dot(&ab) / denom;
    if t <= 0.0 {
        Barycentric::full(&[1.0, 0.0])
    } else if t >= 1.0 {
        Barycentric::full(&[0.0, 1.0])
    } else {
        Barycentric::full(&[1.0 - t, t])
    }
}

/// Closest point of triangle `abc` to the origin (Voronoi-region walk).
pub(crate) fn closest_on_triangle(a: &V3, b: &V3, c: &V3) -> Barycentric {
    let ab = b - a;
    let ac = c - a;
    let d1 = -ab.dot(a);
    let d2 = -ac.dot(a);
    if d1 <= 0.0 && d2 <= 0.0 {
        return Barycentric::full(&[1.0, 0.0, 0.0]);
    }
    let d3 = -ab.dot(b);
    let d4 = -ac.dot(b);
    if d3 >= 0.0 && d4 <= d3 {
        return Barycentric::full(&[0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return Barycentric::full(&[1.0 - v, v, 0.0]);
    }
    let d5 = -ab.dot(c);
    let d6 = -ac.dot(c);
    if d6 >= 0.0 && d5 <= d6 {
        return Barycentric::full(&[0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return Barycentric::full(&[1.0 - w, 0.0, w]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return Barycentric::full(&[0.0, 1.0 - w, w]);
    }
    let sum = va + vb + vc;
    if sum.abs() <= 1e-300 || !sum.is_finite() {
        // Collinear vertices: best of the three edges.
        return best_of_edges(a, b, c);
    }
    let denom = 1.0 / sum;
    let v = vb * denom;
    let w = vc * denom;
    Barycentric::full(&[1.0 - v - w, v, w])
}

fn best_of_edges(a: &V3, b: &V3, c: &V3) -> Barycentric {
    let pts = [*a, *b, *c];
    let mut best = Barycentric::full(&[1.0, 0.0, 0.0]);
    let mut best_d = f64::INFINITY;
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        let seg = closest_on_segment(&pts[i], &pts[j]);
        let mut full = [0.0; 4];
        full[i] = seg.0[0];
        full[j] = seg.0[1];
        let bary = Barycentric(full);
        let d = bary.point(&pts).norm_squared();
        if d < best_d {
            best_d = d;
            best = bary;
        }
    }
    best
}

/// `None` when the origin is inside the tetrahedron.
fn closest_on_tetrahedron(a: &V3, b: &V3, c: &V3, d: &V3) -> Option<Barycentric> {
    let pts = [*a, *b, *c, *d];
    let faces = [(0, 1, 2, 3), (0, 2, 3, 1), (0, 3, 1, 2), (1, 3, 2, 0)];
    let scale = pts.iter().map(|p| p.norm()).fold(0.0, f64::max).max(1e-300);
    let volume = (b - a).cross(&(c - a)).dot(&(d - a));
    let degenerate = volume.abs() <= 1e-14 * scale * scale * scale;
    let mut best: Option<(f64, Barycentric)> = None;
    for (i, j, k, opp) in faces {
        let n = (pts[j] - pts[i]).cross(&(pts[k] - pts[i]));
        let origin_side = -n.dot(&pts[i]);
        let opp_side = n.dot(&(pts[opp] - pts[i]));
        let outside = degenerate || origin_side * opp_side < 0.0;
        if !outside {
            continue;
        }
        let tri = closest_on_triangle(&pts[i], &pts[j], &pts[k]);
        let mut full = [0.0; 4];
        full[i] = tri.0[0];
        full[j] = tri.0[1];
        full[k] = tri.0[2];
        let bary = Barycentric(full);
        let dist = bary.point(&pts).norm_squared();
        if best.as_ref().map_or(true, |(bd, _)| dist < *bd) {
            best = Some((dist, bary));
        }
    }
    best.map(|(_, b)| b)
}

const TOUCH_TOL_SQ: f64 = 1e-24;

/// GJK distance query.
pub(crate) fn gjk(m: &MinkowskiDifference<'_>, settings: &GjkSettings) -> Result<GjkOutcome> {
    let initial = m.support(&V3::x());
    let mut simplex = Simplex::new(initial);
    let mut v = initial.w;
    for _ in 0..settings.max_iterations {
        let vv = v.norm_squared();
        if vv <= TOUCH_TOL_SQ {
            return Ok(GjkOutcome::Overlapping {
                simplex: simplex.points().to_vec(),
            });
        }
        let s = m.support(&-v);
        let vw = v.dot(&s.w);
        let norm = vv.sqrt();
        let duplicate = simplex
            .points()
            .iter()
            .any(|p| (p.w - s.w).norm_squared() <= 1e-26 * (1.0 + vv));
        if vv - vw <= settings.tolerance * norm || duplicate {
            return Ok(separated(&simplex, v));
        }
        let prev = simplex.clone();
        simplex.push(s);
        if simplex.reduce() {
            return Ok(GjkOutcome::Overlapping {
                simplex: simplex.points().to_vec(),
            });
        }
        let next = simplex.closest();
        if next.norm_squared() >= vv {
            // Roundoff stall: the previous simplex is the best we have.
            return Ok(separated(&prev, v));
        }
        v = next;
    }
    let (lower, upper) = bounds(m, &v);
    if upper - lower <= 1e3 * settings.tolerance.max(1e-12) {
        return Ok(separated(&simplex, v));
    }
    Err(Error::NumericalFailure {
        what: "GJK",
        iterations: settings.max_iterations,
        estimate: upper,
    })
}

fn bounds(m: &MinkowskiDifference<'_>, v: &V3) -> (f64, f64) {
    let norm = v.norm();
    let s = m.support(&-v);
    (v.dot(&s.w) / norm, norm)
}

fn separated(simplex: &Simplex, v: V3) -> GjkOutcome {
    let (witness_a, witness_b) = simplex.witnesses();
    let distance = v.norm();
    GjkOutcome::Separated {
        distance,
        witness_a,
        witness_b,
        normal: v / distance,
    }
}

/// Boolean GJK with separating-axis early exit. Touching counts as not intersecting.
pub(crate) fn gjk_intersects(m: &MinkowskiDifference<'_>, max_iterations: usize) -> bool {
    let initial = m.support(&V3::x());
    let mut simplex = Simplex::new(initial);
    let mut v = initial.w;
    for _ in 0..max_iterations {
        let vv = v.norm_squared();
        if vv <= TOUCH_TOL_SQ {
            return true;
        }
        let s = m.support(&-v);
        let vw = v.dot(&s.w);
        if vw > 0.0 {
            return false;
        }
        if vv - vw <= 1e-12 * vv.sqrt() {
            // Converged to a point on the boundary within roundoff.
            return vv <= 1e-20;
        }
        simplex.push(s);
        if simplex.reduce() {
            return true;
        }
        let next = simplex.closest();
        if next.norm_squared() >= vv {
            return false;
        }
        v = next;
    }
    v.norm_squared() <= 1e-20
}
