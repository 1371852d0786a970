//! Heterogeneous input-graph construction from state history, action, and
//! scene.
//!
//! Three node populations (mesh vertices, object CoMs, world wrench nodes)
//! and seven directed edge relations connect them. All features are built
//! from relative quantities (position differences, offsets from closest
//! points), so the graph is translation-invariant and rotation-equivariant
//! by construction. Construction order is fixed: bodies ascending, vertices
//! ascending, contacts in detection order, so identical inputs produce
//! identical graphs down to edge ordering.

use nalgebra::Vector3;

use crate::geometry::{detect_collisions, ContactPair, Scene};
use crate::state::{Action, StateHistory};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// World nodes per body: one force-type, one torque-type.
pub const WORLD_NODES_PER_BODY: usize = 2;

/// Feature width of a mesh or object node for history length `h`.
pub fn node_feature_width(h: usize) -> usize {
    3 * h + 3
}

/// World-node one-hot width.
pub const WORLD_FEATURE_WIDTH: usize = 2;

/// The seven edge relations, in the fixed order used everywhere
/// (aggregation slots, normalization groups, checkpoint layout).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    MeshMesh,
    ObjectToMesh,
    MeshToObject,
    WorldForceToMesh,
    WorldTorqueToMesh,
    MeshToWorldForce,
    MeshToWorldTorque,
}

impl Relation {
    pub const ALL: [Relation; 7] = [
        Relation::MeshMesh,
        Relation::ObjectToMesh,
        Relation::MeshToObject,
        Relation::WorldForceToMesh,
        Relation::WorldTorqueToMesh,
        Relation::MeshToWorldForce,
        Relation::MeshToWorldTorque,
    ];

    pub fn feature_width(self) -> usize {
        match self {
            Relation::MeshMesh => 27,
            Relation::ObjectToMesh | Relation::MeshToObject => 4,
            Relation::WorldForceToMesh | Relation::MeshToWorldForce => 4,
            Relation::WorldTorqueToMesh | Relation::MeshToWorldTorque => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::MeshMesh => "mesh_mesh",
            Relation::ObjectToMesh => "object_to_mesh",
            Relation::MeshToObject => "mesh_to_object",
            Relation::WorldForceToMesh => "world_force_to_mesh",
            Relation::WorldTorqueToMesh => "world_torque_to_mesh",
            Relation::MeshToWorldForce => "mesh_to_world_force",
            Relation::MeshToWorldTorque => "mesh_to_world_torque",
        }
    }

    /// Position in [`Relation::ALL`].
    pub fn slot(self) -> usize {
        Relation::ALL.iter().position(|&r| r == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldNodeKind {
    Force,
    Torque,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldEdgeDir {
    WorldToMesh,
    MeshToWorld,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectEdgeDir {
    ObjectToMesh,
    MeshToObject,
}

/// Single-index edge list with per-edge features.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSet {
    pub sender: Vec<u32>,
    pub receiver: Vec<u32>,
    pub features: Tensor<f64>,
}

impl EdgeSet {
    pub fn empty(width: usize) -> Self {
        Self {
            sender: Vec::new(),
            receiver: Vec::new(),
            features: Tensor::zeros(0, width),
        }
    }

    pub fn len(&self) -> usize {
        self.sender.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sender.is_empty()
    }
}

/// Mesh-mesh edges carry ordered vertex triplets on both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshMeshEdgeSet {
    pub sender: Vec<[u32; 3]>,
    pub receiver: Vec<[u32; 3]>,
    pub features: Tensor<f64>,
}

impl MeshMeshEdgeSet {
    pub fn empty() -> Self {
        Self {
            sender: Vec::new(),
            receiver: Vec::new(),
            features: Tensor::zeros(0, Relation::MeshMesh.feature_width()),
        }
    }

    pub fn len(&self) -> usize {
        self.sender.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sender.is_empty()
    }
}

/// The assembled input graph.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    pub h: usize,
    /// `[N_M x (3h+3)]`
    pub mesh_nodes: Tensor<f64>,
    /// `[N_O x (3h+3)]`, one object node per body.
    pub object_nodes: Tensor<f64>,
    /// `[N_W x 2]`, `N_W = 2 x bodies`; body `b` owns rows `2b` (force)
    /// and `2b + 1` (torque).
    pub world_nodes: Tensor<f64>,
    /// Owning body per mesh node.
    pub mesh_body: Vec<u32>,
    /// Whether the owning body is dynamic, per mesh node.
    pub mesh_dynamic: Vec<bool>,
    pub mm: MeshMeshEdgeSet,
    pub o2m: EdgeSet,
    pub m2o: EdgeSet,
    pub wf2m: EdgeSet,
    pub wt2m: EdgeSet,
    pub m2wf: EdgeSet,
    pub m2wt: EdgeSet,
}

impl HeteroGraph {
    pub fn n_mesh_nodes(&self) -> usize {
        self.mesh_nodes.rows()
    }

    pub fn n_object_nodes(&self) -> usize {
        self.object_nodes.rows()
    }

    pub fn n_world_nodes(&self) -> usize {
        self.world_nodes.rows()
    }

    pub fn edge_features(&self, r: Relation) -> &Tensor<f64> {
        match r {
            Relation::MeshMesh => &self.mm.features,
            Relation::ObjectToMesh => &self.o2m.features,
            Relation::MeshToObject => &self.m2o.features,
            Relation::WorldForceToMesh => &self.wf2m.features,
            Relation::WorldTorqueToMesh => &self.wt2m.features,
            Relation::MeshToWorldForce => &self.m2wf.features,
            Relation::MeshToWorldTorque => &self.m2wt.features,
        }
    }

    pub fn edge_features_mut(&mut self, r: Relation) -> &mut Tensor<f64> {
        match r {
            Relation::MeshMesh => &mut self.mm.features,
            Relation::ObjectToMesh => &mut self.o2m.features,
            Relation::MeshToObject => &mut self.m2o.features,
            Relation::WorldForceToMesh => &mut self.wf2m.features,
            Relation::WorldTorqueToMesh => &mut self.wt2m.features,
            Relation::MeshToWorldForce => &mut self.m2wf.features,
            Relation::MeshToWorldTorque => &mut self.m2wt.features,
        }
    }

    /// Structural validation: index bounds, world-node count, feature
    /// widths, and object-mesh edges pairing a vertex with its own body.
    pub fn validate(&self) -> Result<()> {
        let nm = self.n_mesh_nodes() as u32;
        let no = self.n_object_nodes() as u32;
        let nw = self.n_world_nodes() as u32;
        if self.n_world_nodes() != WORLD_NODES_PER_BODY * self.n_object_nodes() {
            return Err(Error::InvalidEdge(format!(
                "{} world nodes for {} bodies",
                nw, no
            )));
        }
        if self.mesh_body.len() != nm as usize || self.mesh_dynamic.len() != nm as usize {
            return Err(Error::InvalidEdge("mesh metadata length mismatch".into()));
        }
        if self.mesh_nodes.cols() != node_feature_width(self.h) {
            return Err(Error::Shape("mesh node feature width".into()));
        }
        for r in Relation::ALL {
            if self.edge_features(r).cols() != r.feature_width() {
                return Err(Error::Shape(format!("{} feature width", r.name())));
            }
        }

        let check = |edges: &EdgeSet, smax: u32, rmax: u32, name: &str| -> Result<()> {
            if edges.sender.len() != edges.receiver.len()
                || edges.sender.len() != edges.features.rows()
            {
                return Err(Error::InvalidEdge(format!("{name}: ragged edge set")));
            }
            for (&s, &r) in edges.sender.iter().zip(&edges.receiver) {
                if s >= smax || r >= rmax {
                    return Err(Error::InvalidEdge(format!(
                        "{name}: endpoint ({s}, {r}) out of range"
                    )));
                }
            }
            Ok(())
        };
        check(&self.o2m, no, nm, "object_to_mesh")?;
        check(&self.m2o, nm, no, "mesh_to_object")?;
        check(&self.wf2m, nw, nm, "world_force_to_mesh")?;
        check(&self.wt2m, nw, nm, "world_torque_to_mesh")?;
        check(&self.m2wf, nm, nw, "mesh_to_world_force")?;
        check(&self.m2wt, nm, nw, "mesh_to_world_torque")?;
        for (tri_s, tri_r) in self.mm.sender.iter().zip(&self.mm.receiver) {
            for &v in tri_s.iter().chain(tri_r.iter()) {
                if v >= nm {
                    return Err(Error::InvalidEdge(format!(
                        "mesh_mesh vertex {v} out of range"
                    )));
                }
            }
        }

        // Object-mesh pairing must stay within one body.
        for (&obj, &vert) in self.o2m.sender.iter().zip(&self.o2m.receiver) {
            if self.mesh_body[vert as usize] != obj {
                return Err(Error::InvalidEdge(format!(
                    "object {obj} paired with vertex {vert} of body {}",
                    self.mesh_body[vert as usize]
                )));
            }
        }
        for (&vert, &obj) in self.m2o.sender.iter().zip(&self.m2o.receiver) {
            if self.mesh_body[vert as usize] != obj {
                return Err(Error::InvalidEdge(format!(
                    "vertex {vert} of body {} paired with object {obj}",
                    self.mesh_body[vert as usize]
                )));
            }
        }
        Ok(())
    }

    /// Compact structured-text dump for debugging.
    pub fn dump_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(
            s,
            "graph h={} mesh={} object={} world={}",
            self.h,
            self.n_mesh_nodes(),
            self.n_object_nodes(),
            self.n_world_nodes()
        )
        .unwrap();
        writeln!(s, "mesh_mesh edges={} width=27", self.mm.len()).unwrap();
        for (r, e) in [
            (Relation::ObjectToMesh, &self.o2m),
            (Relation::MeshToObject, &self.m2o),
            (Relation::WorldForceToMesh, &self.wf2m),
            (Relation::WorldTorqueToMesh, &self.wt2m),
            (Relation::MeshToWorldForce, &self.m2wf),
            (Relation::MeshToWorldTorque, &self.m2wt),
        ] {
            writeln!(s, "{} edges={} width={}", r.name(), e.len(), r.feature_width()).unwrap();
        }
        s
    }
}

/// Mesh-node features: `h` backward position differences (newest first)
/// followed by `[m, mu, b]` with `b = 1` for dynamic bodies.
pub fn mesh_node_features(
    positions: &[Vector3<f64>],
    mass: f64,
    friction: f64,
    dynamic: bool,
) -> Result<Vec<f64>> {
    if positions.len() < 2 {
        return Err(Error::Shape(format!(
            "need h+1 >= 2 position frames, got {}",
            positions.len()
        )));
    }
    let h = positions.len() - 1;
    let mut out = Vec::with_capacity(3 * h + 3);
    for i in 0..h {
        let d = positions[i] - positions[i + 1];
        out.extend_from_slice(&[d.x, d.y, d.z]);
    }
    out.extend_from_slice(&[mass, friction, if dynamic { 1.0 } else { 0.0 }]);
    Ok(out)
}

/// Object-node features: the mesh-node formula applied to CoM positions.
pub fn object_node_features(
    com_positions: &[Vector3<f64>],
    mass: f64,
    friction: f64,
    dynamic: bool,
) -> Result<Vec<f64>> {
    mesh_node_features(com_positions, mass, friction, dynamic)
}

pub fn world_node_features(kind: WorldNodeKind) -> [f64; WORLD_FEATURE_WIDTH] {
    match kind {
        WorldNodeKind::Force => [1.0, 0.0],
        WorldNodeKind::Torque => [0.0, 1.0],
    }
}

/// World-mesh edge features.
///
/// Force edges: `[f, |f|]` (4). Torque edges: `[tau, |tau|, p, |p|]` (8)
/// with `p = vertex - com` in world frame. The mesh-to-world direction
/// negates vector parts, keeping norms. Static bodies get all zeros.
pub fn world_mesh_edge_features(
    action: &Action,
    vertex: &Vector3<f64>,
    com: &Vector3<f64>,
    body_dynamic: bool,
    kind: WorldNodeKind,
    direction: WorldEdgeDir,
) -> Vec<f64> {
    let width = match kind {
        WorldNodeKind::Force => 4,
        WorldNodeKind::Torque => 8,
    };
    if !body_dynamic {
        return vec![0.0; width];
    }
    let sign = match direction {
        WorldEdgeDir::WorldToMesh => 1.0,
        WorldEdgeDir::MeshToWorld => -1.0,
    };
    match kind {
        WorldNodeKind::Force => {
            let f = action.force;
            vec![sign * f.x, sign * f.y, sign * f.z, f.norm()]
        }
        WorldNodeKind::Torque => {
            let t = action.torque;
            let p = vertex - com;
            vec![
                sign * t.x,
                sign * t.y,
                sign * t.z,
                t.norm(),
                sign * p.x,
                sign * p.y,
                sign * p.z,
                p.norm(),
            ]
        }
    }
}

/// Object-mesh edge features: `[vertex - com, |vertex - com|]`, vector part
/// negated in the mesh-to-object direction.
pub fn object_mesh_edge_features(
    com: &Vector3<f64>,
    vertex: &Vector3<f64>,
    direction: ObjectEdgeDir,
) -> [f64; 4] {
    let d = vertex - com;
    let n = d.norm();
    match direction {
        ObjectEdgeDir::ObjectToMesh => [d.x, d.y, d.z, n],
        ObjectEdgeDir::MeshToObject => [-d.x, -d.y, -d.z, n],
    }
}

/// Ranks a face's vertices by ascending distance to the face's closest
/// point; exact ties fall back to ascending vertex index. Positions and
/// the closest point must share one frame (anchor-relative in practice).
fn rank_face_vertices(
    ids: [u32; 3],
    pos: [Vector3<f64>; 3],
    closest: &Vector3<f64>,
) -> [(u32, Vector3<f64>); 3] {
    let mut ranked: Vec<(u32, Vector3<f64>)> = ids.into_iter().zip(pos).collect();
    ranked.sort_by(|a, b| {
        let da = (a.1 - closest).norm();
        let db = (b.1 - closest).norm();
        da.partial_cmp(&db)
            .expect("finite distances")
            .then(a.0.cmp(&b.0))
    });
    [ranked[0], ranked[1], ranked[2]]
}

/// Collision edge features for one contact pair.
///
/// Returns the ranked sender/receiver vertex triplets and the 27-vector
/// `[d_rs, d_s1..3, d_r1..3, n_s, n_r]` where `d_rs = p_r - p_s`,
/// `d_si = vertex_si - p_s`, `d_ri = vertex_ri - p_r`. All arithmetic runs
/// relative to the pair's anchor, so an exactly translated scene yields bit
/// identical features and ranking.
pub fn mesh_mesh_edge_features(
    pair: &ContactPair,
    sender_ids: [u32; 3],
    sender_pos: [Vector3<f64>; 3],
    receiver_ids: [u32; 3],
    receiver_pos: [Vector3<f64>; 3],
) -> ([u32; 3], [u32; 3], [f64; 27]) {
    let s_rel = sender_pos.map(|p| p - pair.origin);
    let r_rel = receiver_pos.map(|p| p - pair.origin);
    let s = rank_face_vertices(sender_ids, s_rel, &pair.rel_s);
    let r = rank_face_vertices(receiver_ids, r_rel, &pair.rel_r);
    let mut feat = [0.0; 27];
    let d_rs = pair.rel_r - pair.rel_s;
    feat[0..3].copy_from_slice(&[d_rs.x, d_rs.y, d_rs.z]);
    for i in 0..3 {
        let d = s[i].1 - pair.rel_s;
        feat[3 + 3 * i..6 + 3 * i].copy_from_slice(&[d.x, d.y, d.z]);
    }
    for i in 0..3 {
        let d = r[i].1 - pair.rel_r;
        feat[12 + 3 * i..15 + 3 * i].copy_from_slice(&[d.x, d.y, d.z]);
    }
    feat[21..24].copy_from_slice(&[pair.n_s.x, pair.n_s.y, pair.n_s.z]);
    feat[24..27].copy_from_slice(&[pair.n_r.x, pair.n_r.y, pair.n_r.z]);
    ([s[0].0, s[1].0, s[2].0], [r[0].0, r[1].0, r[2].0], feat)
}

/// Builds the input graph, detecting collisions at the newest frame.
pub fn build_graph(
    scene: &Scene,
    tool_history: &StateHistory,
    action: &Action,
    radius: f64,
) -> Result<HeteroGraph> {
    let poses = scene_poses_at(scene, tool_history, 0)?;
    let contacts = detect_collisions(scene, &poses, radius)?;
    build_graph_with_contacts(scene, tool_history, action, &contacts)
}

/// Poses of every body at history frame `k` (0 = newest); static bodies sit
/// at their rest pose.
fn scene_poses_at(
    scene: &Scene,
    tool_history: &StateHistory,
    k: usize,
) -> Result<Vec<crate::state::Pose>> {
    let tool = scene.tool()?;
    let tool_poses = tool_history.poses();
    Ok((0..scene.n_bodies())
        .map(|b| {
            if b == tool {
                tool_poses[k]
            } else {
                scene.rest_poses()[b]
            }
        })
        .collect())
}

/// Builds the input graph from precomputed contact pairs (training-time
/// path, where collisions are cached ahead of the loop).
pub fn build_graph_with_contacts(
    scene: &Scene,
    tool_history: &StateHistory,
    action: &Action,
    contacts: &[ContactPair],
) -> Result<HeteroGraph> {
    let h = tool_history.h();
    let n_bodies = scene.n_bodies();

    // World-frame vertex and CoM positions for each of the h+1 frames.
    let mut frame_verts: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(h + 1);
    let mut frame_coms: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(h + 1);
    for k in 0..=h {
        let poses = scene_poses_at(scene, tool_history, k)?;
        frame_verts.push(scene.world_vertices(&poses));
        frame_coms.push(
            (0..n_bodies)
                .map(|b| poses[b].transform_point(&scene.body(b).com))
                .collect(),
        );
    }
    build_graph_from_frames(scene, &frame_verts, &frame_coms, action, contacts)
}

/// Builds the input graph directly from world-frame vertex and CoM positions
/// per history frame (index 0 = newest). This is the lowest-level entry:
/// training feeds it positions that carry data augmentation (a global
/// rotation, per-vertex noise) which pose-level builders cannot express.
/// `contacts` must have been detected on the same geometry the features
/// should describe — pair fields are used as-is.
pub fn build_graph_from_frames(
    scene: &Scene,
    frame_verts: &[Vec<Vector3<f64>>],
    frame_coms: &[Vec<Vector3<f64>>],
    action: &Action,
    contacts: &[ContactPair],
) -> Result<HeteroGraph> {
    let n_bodies = scene.n_bodies();
    let n_mesh = scene.n_vertices();
    if frame_verts.is_empty() || frame_verts.len() != frame_coms.len() {
        return Err(Error::Shape(format!(
            "frame count mismatch: {} vertex frames, {} com frames",
            frame_verts.len(),
            frame_coms.len()
        )));
    }
    let h = frame_verts.len() - 1;
    for k in 0..=h {
        if frame_verts[k].len() != n_mesh || frame_coms[k].len() != n_bodies {
            return Err(Error::Shape(format!(
                "frame {k}: {} vertices / {} coms, scene has {n_mesh} / {n_bodies}",
                frame_verts[k].len(),
                frame_coms[k].len()
            )));
        }
    }
    let current_verts = &frame_verts[0];
    let current_coms = &frame_coms[0];

    // Node features.
    let node_w = node_feature_width(h);
    let mut mesh_nodes = Tensor::zeros(n_mesh, node_w);
    let mut mesh_body = Vec::with_capacity(n_mesh);
    let mut mesh_dynamic = Vec::with_capacity(n_mesh);
    let mut positions = vec![Vector3::zeros(); h + 1];
    for v in 0..n_mesh {
        let b = scene.body_of_vertex(v);
        let spec = scene.body(b);
        for k in 0..=h {
            positions[k] = frame_verts[k][v];
        }
        let feat = mesh_node_features(&positions, spec.mass, spec.friction, spec.dynamic)?;
        mesh_nodes.data_mut()[v * node_w..(v + 1) * node_w].copy_from_slice(&feat);
        mesh_body.push(b as u32);
        mesh_dynamic.push(spec.dynamic);
    }

    let mut object_nodes = Tensor::zeros(n_bodies, node_w);
    for b in 0..n_bodies {
        let spec = scene.body(b);
        for k in 0..=h {
            positions[k] = frame_coms[k][b];
        }
        let feat = object_node_features(&positions, spec.mass, spec.friction, spec.dynamic)?;
        object_nodes.data_mut()[b * node_w..(b + 1) * node_w].copy_from_slice(&feat);
    }

    let mut world_nodes = Tensor::zeros(WORLD_NODES_PER_BODY * n_bodies, WORLD_FEATURE_WIDTH);
    for b in 0..n_bodies {
        world_nodes.data_mut()[b * 2 * WORLD_FEATURE_WIDTH..(b * 2 + 1) * WORLD_FEATURE_WIDTH]
            .copy_from_slice(&world_node_features(WorldNodeKind::Force));
        world_nodes.data_mut()[(b * 2 + 1) * WORLD_FEATURE_WIDTH..(b * 2 + 2) * WORLD_FEATURE_WIDTH]
            .copy_from_slice(&world_node_features(WorldNodeKind::Torque));
    }

    // Object-mesh edges, both directions, vertices ascending.
    let mut o2m = EdgeSet::empty(4);
    let mut m2o = EdgeSet::empty(4);
    let mut o2m_feats: Vec<f64> = Vec::with_capacity(n_mesh * 4);
    let mut m2o_feats: Vec<f64> = Vec::with_capacity(n_mesh * 4);
    for v in 0..n_mesh {
        let b = scene.body_of_vertex(v);
        o2m.sender.push(b as u32);
        o2m.receiver.push(v as u32);
        o2m_feats.extend_from_slice(&object_mesh_edge_features(
            &current_coms[b],
            &current_verts[v],
            ObjectEdgeDir::ObjectToMesh,
        ));
        m2o.sender.push(v as u32);
        m2o.receiver.push(b as u32);
        m2o_feats.extend_from_slice(&object_mesh_edge_features(
            &current_coms[b],
            &current_verts[v],
            ObjectEdgeDir::MeshToObject,
        ));
    }
    o2m.features = Tensor::from_vec(n_mesh, 4, o2m_feats);
    m2o.features = Tensor::from_vec(n_mesh, 4, m2o_feats);

    // World-mesh edges, both kinds and directions, vertices ascending.
    let mut wf2m = EdgeSet::empty(4);
    let mut wt2m = EdgeSet::empty(8);
    let mut m2wf = EdgeSet::empty(4);
    let mut m2wt = EdgeSet::empty(8);
    let mut wf2m_feats = Vec::with_capacity(n_mesh * 4);
    let mut wt2m_feats = Vec::with_capacity(n_mesh * 8);
    let mut m2wf_feats = Vec::with_capacity(n_mesh * 4);
    let mut m2wt_feats = Vec::with_capacity(n_mesh * 8);
    for v in 0..n_mesh {
        let b = scene.body_of_vertex(v);
        let dynamic = scene.body(b).dynamic;
        let force_node = (b * 2) as u32;
        let torque_node = (b * 2 + 1) as u32;
        let vert = &current_verts[v];
        let com = &current_coms[b];

        wf2m.sender.push(force_node);
        wf2m.receiver.push(v as u32);
        wf2m_feats.extend_from_slice(&world_mesh_edge_features(
            action,
            vert,
            com,
            dynamic,
            WorldNodeKind::Force,
            WorldEdgeDir::WorldToMesh,
        ));

        wt2m.sender.push(torque_node);
        wt2m.receiver.push(v as u32);
        wt2m_feats.extend_from_slice(&world_mesh_edge_features(
            action,
            vert,
            com,
            dynamic,
            WorldNodeKind::Torque,
            WorldEdgeDir::WorldToMesh,
        ));

        m2wf.sender.push(v as u32);
        m2wf.receiver.push(force_node);
        m2wf_feats.extend_from_slice(&world_mesh_edge_features(
            action,
            vert,
            com,
            dynamic,
            WorldNodeKind::Force,
            WorldEdgeDir::MeshToWorld,
        ));

        m2wt.sender.push(v as u32);
        m2wt.receiver.push(torque_node);
        m2wt_feats.extend_from_slice(&world_mesh_edge_features(
            action,
            vert,
            com,
            dynamic,
            WorldNodeKind::Torque,
            WorldEdgeDir::MeshToWorld,
        ));
    }
    wf2m.features = Tensor::from_vec(n_mesh, 4, wf2m_feats);
    wt2m.features = Tensor::from_vec(n_mesh, 8, wt2m_feats);
    m2wf.features = Tensor::from_vec(n_mesh, 4, m2wf_feats);
    m2wt.features = Tensor::from_vec(n_mesh, 8, m2wt_feats);

    // Mesh-mesh collision edges, one per contact pair, detection order.
    let mut mm = MeshMeshEdgeSet::empty();
    let mut mm_feats = Vec::with_capacity(contacts.len() * 27);
    for pair in contacts {
        let sv = scene.face_vertices(pair.sender_face);
        let rv = scene.face_vertices(pair.receiver_face);
        let sender_ids = [sv[0] as u32, sv[1] as u32, sv[2] as u32];
        let receiver_ids = [rv[0] as u32, rv[1] as u32, rv[2] as u32];
        let sender_pos = [current_verts[sv[0]], current_verts[sv[1]], current_verts[sv[2]]];
        let receiver_pos = [current_verts[rv[0]], current_verts[rv[1]], current_verts[rv[2]]];
        let (s_ranked, r_ranked, feat) =
            mesh_mesh_edge_features(pair, sender_ids, sender_pos, receiver_ids, receiver_pos);
        mm.sender.push(s_ranked);
        mm.receiver.push(r_ranked);
        mm_feats.extend_from_slice(&feat);
    }
    mm.features = Tensor::from_vec(contacts.len(), 27, mm_feats);

    let graph = HeteroGraph {
        h,
        mesh_nodes,
        object_nodes,
        world_nodes,
        mesh_body,
        mesh_dynamic,
        mm,
        o2m,
        m2o,
        wf2m,
        wt2m,
        m2wf,
        m2wt,
    };
    debug_assert!(graph.validate().is_ok());
    Ok(graph)
}

/// Disjoint union of graphs with index offsets, plus the row bookkeeping the
/// network's decoders need: which mesh rows are dynamic-body (tool) vertices
/// and which mesh-to-world edge rows they own, each tagged with its sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub graph: HeteroGraph,
    pub n_samples: usize,
    /// Mesh node ids of dynamic-body vertices, ascending within each sample.
    pub dynamic_rows: Vec<u32>,
    /// Sample owning each entry of `dynamic_rows`.
    pub dynamic_sample: Vec<u32>,
    /// Row indices into the mesh-to-world-force edge list sent by dynamic
    /// vertices, and the owning sample per row.
    pub wf_rows: Vec<u32>,
    pub wf_sample: Vec<u32>,
    /// Same for the mesh-to-world-torque edge list.
    pub wt_rows: Vec<u32>,
    pub wt_sample: Vec<u32>,
}

impl GraphBatch {
    pub fn single(graph: HeteroGraph) -> Result<Self> {
        Self::merge(std::slice::from_ref(&graph))
    }

    /// Merges graphs by concatenating node and edge sets, shifting indices.
    /// Every sample must contain at least one dynamic-body vertex (the
    /// wrench decoders average over them).
    pub fn merge(graphs: &[HeteroGraph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::InvalidScene("empty graph batch".into()));
        }
        let h = graphs[0].h;
        if graphs.iter().any(|g| g.h != h) {
            return Err(Error::Shape("mixed history lengths in batch".into()));
        }
        for (s, g) in graphs.iter().enumerate() {
            if !g.mesh_dynamic.iter().any(|&d| d) {
                return Err(Error::InvalidScene(format!(
                    "batch sample {s} has no dynamic-body vertices"
                )));
            }
        }

        let cat_tensors = |pick: &dyn Fn(&HeteroGraph) -> &Tensor<f64>| {
            let cols = pick(&graphs[0]).cols();
            let rows = graphs.iter().map(|g| pick(g).rows()).sum();
            let mut out = Tensor::zeros(rows, cols);
            let mut at = 0;
            for g in graphs {
                let t = pick(g);
                out.data_mut()[at..at + t.data().len()].copy_from_slice(t.data());
                at += t.data().len();
            }
            out
        };

        let mut mesh_off = 0u32;
        let mut obj_off = 0u32;
        let mut world_off = 0u32;
        let mut wf_row_off = 0u32;
        let mut wt_row_off = 0u32;

        let mut mesh_body = Vec::new();
        let mut mesh_dynamic = Vec::new();
        let mut mm = MeshMeshEdgeSet {
            sender: Vec::new(),
            receiver: Vec::new(),
            features: cat_tensors(&|g| &g.mm.features),
        };
        let mut sets: [EdgeSet; 6] = [
            EdgeSet::empty(4),
            EdgeSet::empty(4),
            EdgeSet::empty(4),
            EdgeSet::empty(8),
            EdgeSet::empty(4),
            EdgeSet::empty(8),
        ];
        sets[0].features = cat_tensors(&|g| &g.o2m.features);
        sets[1].features = cat_tensors(&|g| &g.m2o.features);
        sets[2].features = cat_tensors(&|g| &g.wf2m.features);
        sets[3].features = cat_tensors(&|g| &g.wt2m.features);
        sets[4].features = cat_tensors(&|g| &g.m2wf.features);
        sets[5].features = cat_tensors(&|g| &g.m2wt.features);

        let mut dynamic_rows = Vec::new();
        let mut dynamic_sample = Vec::new();
        let mut wf_rows = Vec::new();
        let mut wf_sample = Vec::new();
        let mut wt_rows = Vec::new();
        let mut wt_sample = Vec::new();

        for (s, g) in graphs.iter().enumerate() {
            let s32 = s as u32;
            for (v, (&b, &dy)) in g.mesh_body.iter().zip(&g.mesh_dynamic).enumerate() {
                mesh_body.push(b + obj_off);
                mesh_dynamic.push(dy);
                if dy {
                    dynamic_rows.push(v as u32 + mesh_off);
                    dynamic_sample.push(s32);
                }
            }
            for (tri_s, tri_r) in g.mm.sender.iter().zip(&g.mm.receiver) {
                mm.sender.push(tri_s.map(|v| v + mesh_off));
                mm.receiver.push(tri_r.map(|v| v + mesh_off));
            }
            let shift = |set: &mut EdgeSet, src: &EdgeSet, s_off: u32, r_off: u32| {
                set.sender.extend(src.sender.iter().map(|&v| v + s_off));
                set.receiver.extend(src.receiver.iter().map(|&v| v + r_off));
            };
            shift(&mut sets[0], &g.o2m, obj_off, mesh_off);
            shift(&mut sets[1], &g.m2o, mesh_off, obj_off);
            shift(&mut sets[2], &g.wf2m, world_off, mesh_off);
            shift(&mut sets[3], &g.wt2m, world_off, mesh_off);
            shift(&mut sets[4], &g.m2wf, mesh_off, world_off);
            shift(&mut sets[5], &g.m2wt, mesh_off, world_off);

            for (row, &v) in g.m2wf.sender.iter().enumerate() {
                if g.mesh_dynamic[v as usize] {
                    wf_rows.push(row as u32 + wf_row_off);
                    wf_sample.push(s32);
                }
            }
            for (row, &v) in g.m2wt.sender.iter().enumerate() {
                if g.mesh_dynamic[v as usize] {
                    wt_rows.push(row as u32 + wt_row_off);
                    wt_sample.push(s32);
                }
            }

            mesh_off += g.n_mesh_nodes() as u32;
            obj_off += g.n_object_nodes() as u32;
            world_off += g.n_world_nodes() as u32;
            wf_row_off += g.m2wf.len() as u32;
            wt_row_off += g.m2wt.len() as u32;
        }

        let [o2m, m2o, wf2m, wt2m, m2wf, m2wt] = sets;
        let graph = HeteroGraph {
            h,
            mesh_nodes: cat_tensors(&|g| &g.mesh_nodes),
            object_nodes: cat_tensors(&|g| &g.object_nodes),
            world_nodes: cat_tensors(&|g| &g.world_nodes),
            mesh_body,
            mesh_dynamic,
            mm,
            o2m,
            m2o,
            wf2m,
            wt2m,
            m2wf,
            m2wt,
        };
        graph.validate()?;
        Ok(GraphBatch {
            graph,
            n_samples: graphs.len(),
            dynamic_rows,
            dynamic_sample,
            wf_rows,
            wf_sample,
            wt_rows,
            wt_sample,
        })
    }
}
