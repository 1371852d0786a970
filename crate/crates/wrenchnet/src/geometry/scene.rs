//! Scene assembly and the scene description file format.
//!
//! A scene is an ordered list of bodies with rest poses. Body order matters
//! twice: vertex/face ids are global in body order, and contact pairs are
//! directed from the lower body id, so scene files should list static
//! environment bodies before the dynamic tool (the tool then receives
//! contact messages directly).

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{BodySpec, TriMesh};
use crate::state::Pose;
use crate::{Error, Result};

/// FNV-1a 64-bit hash; content fingerprint for scene/dataset headers.
pub fn fnv1a64(chunks: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for chunk in chunks {
        for &b in *chunk {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// An ordered set of bodies with rest poses and precomputed global
/// vertex/face tables.
#[derive(Debug, Clone)]
pub struct Scene {
    bodies: Vec<BodySpec>,
    rest_poses: Vec<Pose>,
    /// First global vertex id of each body.
    vertex_offset: Vec<usize>,
    /// Per global face: owning body.
    face_body: Vec<usize>,
    /// Per global face: global vertex ids.
    face_verts: Vec<[usize; 3]>,
    content_hash: u64,
}

impl Scene {
    pub fn new(bodies: Vec<BodySpec>, rest_poses: Vec<Pose>) -> Result<Self> {
        if bodies.len() != rest_poses.len() {
            return Err(Error::InvalidScene(format!(
                "{} bodies but {} rest poses",
                bodies.len(),
                rest_poses.len()
            )));
        }
        for b in &bodies {
            b.validate()?;
        }
        let mut vertex_offset = Vec::with_capacity(bodies.len());
        let mut face_body = Vec::new();
        let mut face_verts = Vec::new();
        let mut base = 0usize;
        for (bi, b) in bodies.iter().enumerate() {
            vertex_offset.push(base);
            let mut mesh_base = base;
            for mesh in &b.meshes {
                for f in mesh.faces() {
                    face_body.push(bi);
                    face_verts.push([mesh_base + f[0], mesh_base + f[1], mesh_base + f[2]]);
                }
                mesh_base += mesh.vertices().len();
            }
            base = mesh_base;
        }
        let mut scene = Self {
            bodies,
            rest_poses,
            vertex_offset,
            face_body,
            face_verts,
            content_hash: 0,
        };
        scene.content_hash = scene.structural_hash();
        Ok(scene)
    }

    /// Hash over the full structural content (bodies, meshes, poses),
    /// via the canonical text rendering.
    fn structural_hash(&self) -> u64 {
        let text = self.canonical_text();
        fnv1a64(&[text.as_bytes()])
    }

    /// Canonical text dump used for hashing and debug output.
    pub fn canonical_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        for (b, pose) in self.bodies.iter().zip(&self.rest_poses) {
            let (p, q) = pose.to_parts();
            writeln!(
                s,
                "body {} mass {:e} friction {:e} dynamic {} com {:e} {:e} {:e} tip {:e} {:e} {:e}",
                b.name, b.mass, b.friction, b.dynamic, b.com.x, b.com.y, b.com.z,
                b.tip.x, b.tip.y, b.tip.z
            )
            .unwrap();
            writeln!(
                s,
                "pose {:e} {:e} {:e} {:e} {:e} {:e} {:e}",
                p[0], p[1], p[2], q[0], q[1], q[2], q[3]
            )
            .unwrap();
            for r in 0..3 {
                writeln!(
                    s,
                    "inertia {:e} {:e} {:e}",
                    b.inertia[(r, 0)],
                    b.inertia[(r, 1)],
                    b.inertia[(r, 2)]
                )
                .unwrap();
            }
            for m in &b.meshes {
                for v in m.vertices() {
                    writeln!(s, "v {:e} {:e} {:e}", v.x, v.y, v.z).unwrap();
                }
                for f in m.faces() {
                    writeln!(s, "f {} {} {}", f[0], f[1], f[2]).unwrap();
                }
            }
        }
        s
    }

    pub fn n_bodies(&self) -> usize {
        self.bodies.len()
    }

    pub fn bodies(&self) -> &[BodySpec] {
        &self.bodies
    }

    pub fn body(&self, i: usize) -> &BodySpec {
        &self.bodies[i]
    }

    pub fn rest_poses(&self) -> &[Pose] {
        &self.rest_poses
    }

    pub fn content_hash(&self) -> u64 {
        self.content_hash
    }

    pub fn n_vertices(&self) -> usize {
        self.vertex_offset.last().map_or(0, |&off| {
            off + self.bodies.last().map_or(0, |b| b.vertex_count())
        })
    }

    pub fn n_faces(&self) -> usize {
        self.face_verts.len()
    }

    /// First global vertex id of body `i`.
    pub fn vertex_offset(&self, i: usize) -> usize {
        self.vertex_offset[i]
    }

    pub fn body_of_vertex(&self, v: usize) -> usize {
        match self.vertex_offset.binary_search(&v) {
            Ok(mut i) => {
                // Offsets repeat when a body has zero vertices; take the last.
                while i + 1 < self.vertex_offset.len() && self.vertex_offset[i + 1] == v {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        }
    }

    pub fn face_body(&self, f: usize) -> usize {
        self.face_body[f]
    }

    /// Global vertex ids of face `f`, in authored winding order.
    pub fn face_vertices(&self, f: usize) -> [usize; 3] {
        self.face_verts[f]
    }

    /// Body-frame coordinates of every vertex, in global id order.
    pub fn body_frame_vertices(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.n_vertices());
        for b in &self.bodies {
            out.extend(b.vertices().copied());
        }
        out
    }

    /// World coordinates of every vertex under `poses`, in global id order.
    pub fn world_vertices(&self, poses: &[Pose]) -> Vec<Vector3<f64>> {
        assert_eq!(poses.len(), self.bodies.len());
        let mut out = Vec::with_capacity(self.n_vertices());
        for (b, pose) in self.bodies.iter().zip(poses) {
            out.extend(b.vertices().map(|v| pose.transform_point(v)));
        }
        out
    }

    /// Index of the unique dynamic body.
    pub fn tool(&self) -> Result<usize> {
        let dynamic: Vec<usize> = self
            .bodies
            .iter()
            .enumerate()
            .filter(|(_, b)| b.dynamic)
            .map(|(i, _)| i)
            .collect();
        match dynamic.as_slice() {
            [i] => Ok(*i),
            [] => Err(Error::InvalidScene("scene has no dynamic body".into())),
            _ => Err(Error::InvalidScene(format!(
                "scene has {} dynamic bodies, expected exactly one",
                dynamic.len()
            ))),
        }
    }

    /// Loads a scene description file; mesh paths resolve relative to the
    /// scene file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir)
    }

    /// Parses the scene text format:
    ///
    /// ```text
    /// body <name>
    ///   mesh <relative path>        # repeatable
    ///   mass <kg>
    ///   friction <coefficient>
    ///   dynamic <true|false>
    ///   com <x y z>                 # optional, default 0 0 0
    ///   inertia <ixx iyy izz>       # diagonal; required for dynamic bodies
    ///   tip <x y z>                 # optional, default 0 0 0
    ///   position <x y z>            # optional rest pose, default origin
    ///   orientation <w x y z>       # optional rest pose, default identity
    /// ```
    pub fn parse(text: &str, mesh_dir: &Path) -> Result<Self> {
        struct Draft {
            name: String,
            meshes: Vec<TriMesh>,
            mass: Option<f64>,
            friction: Option<f64>,
            dynamic: Option<bool>,
            com: Vector3<f64>,
            inertia: Option<Vector3<f64>>,
            tip: Vector3<f64>,
            position: Vector3<f64>,
            orientation: [f64; 4],
        }
        impl Draft {
            fn finish(self) -> Result<(BodySpec, Pose)> {
                let mass = self
                    .mass
                    .ok_or_else(|| Error::Parse(format!("body {}: missing mass", self.name)))?;
                let friction = self.friction.ok_or_else(|| {
                    Error::Parse(format!("body {}: missing friction", self.name))
                })?;
                let dynamic = self
                    .dynamic
                    .ok_or_else(|| Error::Parse(format!("body {}: missing dynamic", self.name)))?;
                let inertia = match self.inertia {
                    Some(d) => Matrix3::from_diagonal(&d),
                    None if !dynamic => Matrix3::identity(),
                    None => {
                        return Err(Error::Parse(format!(
                            "body {}: dynamic body needs inertia",
                            self.name
                        )))
                    }
                };
                let pose = Pose::from_parts(
                    [self.position.x, self.position.y, self.position.z],
                    self.orientation,
                )?;
                Ok((
                    BodySpec {
                        name: self.name,
                        meshes: self.meshes,
                        mass,
                        friction,
                        dynamic,
                        com: self.com,
                        inertia,
                        tip: self.tip,
                    },
                    pose,
                ))
            }
        }

        let mut bodies = Vec::new();
        let mut poses = Vec::new();
        let mut current: Option<Draft> = None;

        let parse_vec3 = |fields: &[&str], ln: usize| -> Result<Vector3<f64>> {
            if fields.len() != 3 {
                return Err(Error::Parse(format!("line {ln}: expected 3 numbers")));
            }
            let mut c = [0.0; 3];
            for (i, s) in fields.iter().enumerate() {
                c[i] = s
                    .parse()
                    .map_err(|e| Error::Parse(format!("line {ln}: bad number {s:?}: {e}")))?;
            }
            Ok(Vector3::new(c[0], c[1], c[2]))
        };

        for (ln0, raw) in text.lines().enumerate() {
            let ln = ln0 + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let key = it.next().unwrap();
            let fields: Vec<&str> = it.collect();

            if key == "body" {
                if let Some(d) = current.take() {
                    let (b, p) = d.finish()?;
                    bodies.push(b);
                    poses.push(p);
                }
                if fields.len() != 1 {
                    return Err(Error::Parse(format!("line {ln}: expected body <name>")));
                }
                current = Some(Draft {
                    name: fields[0].to_string(),
                    meshes: Vec::new(),
                    mass: None,
                    friction: None,
                    dynamic: None,
                    com: Vector3::zeros(),
                    inertia: None,
                    tip: Vector3::zeros(),
                    position: Vector3::zeros(),
                    orientation: [1.0, 0.0, 0.0, 0.0],
                });
                continue;
            }

            let d = current
                .as_mut()
                .ok_or_else(|| Error::Parse(format!("line {ln}: {key:?} outside a body block")))?;
            match key {
                "mesh" => {
                    if fields.len() != 1 {
                        return Err(Error::Parse(format!("line {ln}: expected mesh <path>")));
                    }
                    let mesh_path = mesh_dir.join(fields[0]);
                    let mesh_text = std::fs::read_to_string(&mesh_path).map_err(|e| {
                        Error::Parse(format!("line {ln}: cannot read {}: {e}", mesh_path.display()))
                    })?;
                    d.meshes.push(TriMesh::parse(&mesh_text)?);
                }
                "mass" => {
                    d.mass = Some(fields.first().and_then(|s| s.parse().ok()).ok_or_else(
                        || Error::Parse(format!("line {ln}: expected mass <kg>")),
                    )?)
                }
                "friction" => {
                    d.friction = Some(fields.first().and_then(|s| s.parse().ok()).ok_or_else(
                        || Error::Parse(format!("line {ln}: expected friction <mu>")),
                    )?)
                }
                "dynamic" => {
                    d.dynamic = match fields.first() {
                        Some(&"true") => Some(true),
                        Some(&"false") => Some(false),
                        _ => {
                            return Err(Error::Parse(format!(
                                "line {ln}: expected dynamic true|false"
                            )))
                        }
                    }
                }
                "com" => d.com = parse_vec3(&fields, ln)?,
                "inertia" => d.inertia = Some(parse_vec3(&fields, ln)?),
                "tip" => d.tip = parse_vec3(&fields, ln)?,
                "position" => d.position = parse_vec3(&fields, ln)?,
                "orientation" => {
                    if fields.len() != 4 {
                        return Err(Error::Parse(format!(
                            "line {ln}: expected orientation w x y z"
                        )));
                    }
                    for (i, s) in fields.iter().enumerate() {
                        d.orientation[i] = s.parse().map_err(|e| {
                            Error::Parse(format!("line {ln}: bad number {s:?}: {e}"))
                        })?;
                    }
                }
                other => return Err(Error::Parse(format!("line {ln}: unknown key {other:?}"))),
            }
        }
        if let Some(d) = current.take() {
            let (b, p) = d.finish()?;
            bodies.push(b);
            poses.push(p);
        }
        Self::new(bodies, poses)
    }
}
