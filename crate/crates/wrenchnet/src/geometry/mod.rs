//! Triangle meshes, rigid bodies, and face-pair proximity queries.
//!
//! Bodies are unions of convex triangle-mesh pieces. Vertex indexing is
//! global across a scene: body 0's vertices come first, then body 1's, in
//! authored order, so every downstream consumer (graph construction,
//! collision pairs, learned-model outputs) agrees on vertex identity.

mod closest;
mod collide;
mod scene;

pub use closest::{closest_point_on_triangle, closest_point_segments, closest_point_triangles};
pub use collide::{detect_collisions, Aabb};
pub use scene::{fnv1a64, Scene};

use nalgebra::{Matrix3, Vector3};

use crate::state::Pose;
use crate::{Error, Result};

/// Faces with area at or below this are rejected as degenerate.
pub const MIN_FACE_AREA: f64 = 1e-12;

/// Triangle mesh in body frame. Faces are zero-based vertex-index triplets
/// wound counterclockwise when seen from outside (right-hand-rule normals
/// point outward).
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vector3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::InvalidGeometry("mesh has no faces".into()));
        }
        for (fi, f) in faces.iter().enumerate() {
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidGeometry(format!(
                    "face {fi} repeats a vertex index"
                )));
            }
            for &v in f {
                if v >= vertices.len() {
                    return Err(Error::InvalidGeometry(format!(
                        "face {fi} references vertex {v} of {}",
                        vertices.len()
                    )));
                }
            }
            let area = triangle_area(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]]);
            if !(area > MIN_FACE_AREA) {
                return Err(Error::InvalidGeometry(format!(
                    "face {fi} is degenerate (area {area:e})"
                )));
            }
        }
        Ok(Self { vertices, faces })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Parses the `v x y z` / `f i j k` text format. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let tag = it.next().unwrap();
            let fields: Vec<&str> = it.collect();
            match tag {
                "v" => {
                    if fields.len() != 3 {
                        return Err(Error::Parse(format!("line {}: expected v x y z", ln + 1)));
                    }
                    let mut c = [0.0; 3];
                    for (i, s) in fields.iter().enumerate() {
                        c[i] = s.parse::<f64>().map_err(|e| {
                            Error::Parse(format!("line {}: bad coordinate {s:?}: {e}", ln + 1))
                        })?;
                    }
                    vertices.push(Vector3::new(c[0], c[1], c[2]));
                }
                "f" => {
                    if fields.len() != 3 {
                        return Err(Error::Parse(format!("line {}: expected f i j k", ln + 1)));
                    }
                    let mut idx = [0usize; 3];
                    for (i, s) in fields.iter().enumerate() {
                        idx[i] = s.parse::<usize>().map_err(|e| {
                            Error::Parse(format!("line {}: bad index {s:?}: {e}", ln + 1))
                        })?;
                    }
                    faces.push(idx);
                }
                other => {
                    return Err(Error::Parse(format!(
                        "line {}: unknown record {other:?}",
                        ln + 1
                    )));
                }
            }
        }
        Self::new(vertices, faces)
    }
}

/// A rigid body: mesh pieces plus physical parameters. The inertia tensor is
/// only consulted by the reference integrator; the learned model sees just
/// mass, friction, and the dynamic flag.
#[derive(Debug, Clone, PartialEq)]
pub struct BodySpec {
    pub name: String,
    pub meshes: Vec<TriMesh>,
    pub mass: f64,
    pub friction: f64,
    pub dynamic: bool,
    /// Center of mass, body frame.
    pub com: Vector3<f64>,
    /// Body-frame inertia about the CoM; symmetric positive-definite.
    pub inertia: Matrix3<f64>,
    /// Tool-tip offset in the body frame (task-space reference point).
    pub tip: Vector3<f64>,
}

impl BodySpec {
    pub fn validate(&self) -> Result<()> {
        if self.meshes.is_empty() {
            return Err(Error::InvalidScene(format!("body {}: no meshes", self.name)));
        }
        if !(self.mass > 0.0) || !self.mass.is_finite() {
            return Err(Error::InvalidScene(format!(
                "body {}: mass must be positive, got {}",
                self.name, self.mass
            )));
        }
        if !(self.friction >= 0.0) || !self.friction.is_finite() {
            return Err(Error::InvalidScene(format!(
                "body {}: friction must be >= 0, got {}",
                self.name, self.friction
            )));
        }
        let sym_err = (self.inertia - self.inertia.transpose()).norm();
        if sym_err > 1e-9 * self.inertia.norm().max(1.0) {
            return Err(Error::InvalidScene(format!(
                "body {}: inertia not symmetric",
                self.name
            )));
        }
        if nalgebra::Cholesky::new(self.inertia).is_none() {
            return Err(Error::InvalidScene(format!(
                "body {}: inertia not positive-definite",
                self.name
            )));
        }
        Ok(())
    }

    pub fn vertex_count(&self) -> usize {
        self.meshes.iter().map(|m| m.vertices().len()).sum()
    }

    pub fn face_count(&self) -> usize {
        self.meshes.iter().map(|m| m.faces().len()).sum()
    }

    /// Body-frame vertices of all mesh pieces, concatenated in mesh order.
    pub fn vertices(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.meshes.iter().flat_map(|m| m.vertices().iter())
    }
}

/// One near-contact face pair. Direction is fixed: the sender face belongs
/// to the body with the lower id.
///
/// Closest points are stored relative to `origin` (first vertex of the
/// sender face in world frame) so that downstream features built from them
/// stay bit-identical under exact scene translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactPair {
    /// Global face id on the sender (lower-id) body.
    pub sender_face: usize,
    /// Global face id on the receiver body.
    pub receiver_face: usize,
    /// World anchor the relative closest points refer to.
    pub origin: Vector3<f64>,
    /// Closest point on the sender face, relative to `origin`.
    pub rel_s: Vector3<f64>,
    /// Closest point on the receiver face, relative to `origin`.
    pub rel_r: Vector3<f64>,
    /// Unit normal of the sender face, world frame.
    pub n_s: Vector3<f64>,
    /// Unit normal of the receiver face, world frame.
    pub n_r: Vector3<f64>,
    /// Closest-point distance in meters; zero when intersecting.
    pub distance: f64,
}

impl ContactPair {
    /// Absolute closest point on the sender face, world frame.
    pub fn p_s(&self) -> Vector3<f64> {
        self.origin + self.rel_s
    }

    /// Absolute closest point on the receiver face, world frame.
    pub fn p_r(&self) -> Vector3<f64> {
        self.origin + self.rel_r
    }
}

/// Poses body-frame points into the world frame.
pub fn transform_points(pose: &Pose, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    points.iter().map(|p| pose.transform_point(p)).collect()
}

pub fn triangle_area(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Unit normal of a triangle by winding order (right-hand rule).
pub fn face_normal(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Result<Vector3<f64>> {
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len <= 2.0 * MIN_FACE_AREA {
        return Err(Error::InvalidGeometry(format!(
            "degenerate triangle (area {:e})",
            0.5 * len
        )));
    }
    Ok(n / len)
}
