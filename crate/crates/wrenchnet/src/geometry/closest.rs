//! Exact closest-point queries between triangles.
//!
//! The triangle-triangle query enumerates a fixed candidate list: piercing
//! edge-triangle intersections first (distance zero), then the 9 edge-edge
//! pairs, then the 6 vertex-triangle projections. For non-intersecting
//! triangles the minimum over edge-edge and vertex-face candidates is the
//! global minimum; ties keep the earliest candidate in enumeration order.

use nalgebra::Vector3;

use super::{triangle_area, MIN_FACE_AREA};
use crate::{Error, Result};

/// Closest point to `p` on triangle `abc` (Voronoi-region walk).
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Closest points between segments `p1q1` and `p2q2`.
pub fn closest_point_segments(
    p1: &Vector3<f64>,
    q1: &Vector3<f64>,
    p2: &Vector3<f64>,
    q2: &Vector3<f64>,
) -> (Vector3<f64>, Vector3<f64>) {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let eps = 1e-30;

    let (s, t);
    if a <= eps && e <= eps {
        return (*p1, *p2);
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s_ = if denom != 0.0 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t_ = (b * s_ + f) / e;
            if t_ < 0.0 {
                t_ = 0.0;
                s_ = (-c / a).clamp(0.0, 1.0);
            } else if t_ > 1.0 {
                t_ = 1.0;
                s_ = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s_;
            t = t_;
        }
    }
    (p1 + d1 * s, p2 + d2 * t)
}

/// Intersection point of segment `pq` with the interior (boundary included)
/// of triangle `abc`, or `None` when the segment misses or runs parallel.
/// Parallel touching cases are recovered by edge-edge distances instead.
fn segment_triangle_intersection(
    p: &Vector3<f64>,
    q: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    let ab = b - a;
    let ac = c - a;
    let n = ab.cross(&ac);
    let d = q - p;
    let denom = d.dot(&n);
    if denom.abs() <= 1e-14 * d.norm() * n.norm() {
        return None;
    }
    let t = (a - p).dot(&n) / denom;
    if !(0.0..=1.0).contains(&t) {
        return None;
    }
    let x = p + d * t;
    // Barycentric inside test.
    let v0 = ab;
    let v1 = ac;
    let v2 = x - a;
    let d00 = v0.dot(&v0);
    let d01 = v0.dot(&v1);
    let d11 = v1.dot(&v1);
    let d20 = v2.dot(&v0);
    let d21 = v2.dot(&v1);
    let det = d00 * d11 - d01 * d01;
    if det <= 0.0 {
        return None;
    }
    let v = (d11 * d20 - d01 * d21) / det;
    let w = (d00 * d21 - d01 * d20) / det;
    if v >= 0.0 && w >= 0.0 && v + w <= 1.0 {
        Some(x)
    } else {
        None
    }
}

/// Result of a triangle-triangle closest-point query.
///
/// Points are stored relative to `origin` (the first vertex of `tri_a`),
/// keeping every internal operation a difference of inputs. Translating
/// both triangles by an exactly representable vector therefore reproduces
/// `rel_a`, `rel_b`, and `distance` bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriTriClosest {
    pub origin: Vector3<f64>,
    pub rel_a: Vector3<f64>,
    pub rel_b: Vector3<f64>,
    pub distance: f64,
}

impl TriTriClosest {
    /// Absolute closest point on the first triangle.
    pub fn point_a(&self) -> Vector3<f64> {
        self.origin + self.rel_a
    }

    /// Absolute closest point on the second triangle.
    pub fn point_b(&self) -> Vector3<f64> {
        self.origin + self.rel_b
    }
}

/// Globally closest points between two triangles; intersecting triangles
/// return the shared point twice with distance zero.
pub fn closest_point_triangles(
    tri_a: &[Vector3<f64>; 3],
    tri_b: &[Vector3<f64>; 3],
) -> Result<TriTriClosest> {
    for tri in [tri_a, tri_b] {
        if triangle_area(&tri[0], &tri[1], &tri[2]) <= MIN_FACE_AREA {
            return Err(Error::InvalidGeometry(
                "degenerate triangle in closest-point query".into(),
            ));
        }
    }

    // Rebase both triangles at tri_a[0]; everything below only ever sees
    // vertex differences.
    let origin = tri_a[0];
    let a: [Vector3<f64>; 3] = [Vector3::zeros(), tri_a[1] - origin, tri_a[2] - origin];
    let b: [Vector3<f64>; 3] =
        [tri_b[0] - origin, tri_b[1] - origin, tri_b[2] - origin];

    let done = |rel_a: Vector3<f64>, rel_b: Vector3<f64>, distance: f64| TriTriClosest {
        origin,
        rel_a,
        rel_b,
        distance,
    };

    // Piercing edges give an exact zero that edge-edge/vertex-face
    // candidates cannot reach.
    for i in 0..3 {
        let (p, q) = (&a[i], &a[(i + 1) % 3]);
        if let Some(x) = segment_triangle_intersection(p, q, &b[0], &b[1], &b[2]) {
            return Ok(done(x, x, 0.0));
        }
    }
    for i in 0..3 {
        let (p, q) = (&b[i], &b[(i + 1) % 3]);
        if let Some(x) = segment_triangle_intersection(p, q, &a[0], &a[1], &a[2]) {
            return Ok(done(x, x, 0.0));
        }
    }

    let mut best: Option<(Vector3<f64>, Vector3<f64>, f64)> = None;
    let mut consider = |pa: Vector3<f64>, pb: Vector3<f64>| {
        let d2 = (pb - pa).norm_squared();
        if best.map_or(true, |(_, _, b)| d2 < b) {
            best = Some((pa, pb, d2));
        }
    };

    for i in 0..3 {
        for j in 0..3 {
            let (pa, pb) =
                closest_point_segments(&a[i], &a[(i + 1) % 3], &b[j], &b[(j + 1) % 3]);
            consider(pa, pb);
        }
    }
    for v in &a {
        let q = closest_point_on_triangle(v, &b[0], &b[1], &b[2]);
        consider(*v, q);
    }
    for v in &b {
        let q = closest_point_on_triangle(v, &a[0], &a[1], &a[2]);
        consider(q, *v);
    }

    let (pa, pb, d2) = best.expect("candidate list is never empty");
    Ok(done(pa, pb, d2.sqrt()))
}
