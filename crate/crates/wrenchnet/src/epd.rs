//! Encode-process-decode network over the heterogeneous contact graph.
//!
//! Per-type encoders lift node and edge features to latent vectors, a stack
//! of unshared message-passing layers updates edges then nodes with residual
//! connections, and two decoders read out per-vertex accelerations and the
//! reaction wrench. Collision edges carry a triple-width latent that is
//! split into one message per ranked receiver vertex.
//!
//! All compute runs on a [`Tape`], so the same forward pass serves training
//! (backward through the tape) and inference (read the values, drop the
//! tape).

use rand::Rng;

use crate::graph::{GraphBatch, Relation};
use crate::tensor::{
    read_blocks, write_blocks, Mlp, MlpIds, NodeId, Scalar, Tape, Tensor,
};
use crate::{Error, Result};

/// Network shape. Defaults follow the reference configuration; smaller
/// widths are used by fast tests and desk-scale training runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpdConfig {
    /// Message-passing layers, unshared parameters per layer.
    pub layers: usize,
    /// Latent width of node vectors and single-receiver edge vectors.
    pub latent: usize,
    /// Hidden width of every MLP.
    pub hidden: usize,
    /// History length the mesh/object node features were built with.
    pub history: usize,
}

impl Default for EpdConfig {
    fn default() -> Self {
        Self {
            layers: 10,
            latent: 128,
            hidden: 128,
            history: 3,
        }
    }
}

impl EpdConfig {
    pub fn node_input_width(&self) -> usize {
        3 * self.history + 3
    }

    /// Latent width of an edge relation. Collision edges hold three vectors
    /// (one per ranked receiver vertex) in one row.
    pub fn edge_latent_width(&self, r: Relation) -> usize {
        match r {
            Relation::MeshMesh => 3 * self.latent,
            _ => self.latent,
        }
    }

    fn edge_update_input_width(&self, r: Relation) -> usize {
        match r {
            // Edge latent plus six node latents.
            Relation::MeshMesh => 9 * self.latent,
            // Edge latent plus sender and receiver latents.
            _ => 3 * self.latent,
        }
    }
}

/// One message-passing layer: an update MLP per edge relation and per node
/// population.
#[derive(Debug, Clone, PartialEq)]
pub struct EpdLayer<S: Scalar> {
    pub edge: Vec<Mlp<S>>,
    pub node_mesh: Mlp<S>,
    pub node_object: Mlp<S>,
    pub node_world: Mlp<S>,
}

/// Full parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct EpdParams<S: Scalar> {
    pub config: EpdConfig,
    pub enc_mesh: Mlp<S>,
    pub enc_object: Mlp<S>,
    pub enc_world: Mlp<S>,
    /// Edge encoders in [`Relation::ALL`] order.
    pub enc_edge: Vec<Mlp<S>>,
    pub layers: Vec<EpdLayer<S>>,
    /// Vertex-acceleration decoder, no LayerNorm.
    pub dec_accel: Mlp<S>,
    /// Shared decoder for mesh-to-world force and torque edges, no
    /// LayerNorm.
    pub dec_wrench: Mlp<S>,
}

impl<S: Scalar> EpdParams<S> {
    pub fn init(config: EpdConfig, rng: &mut impl Rng) -> Self {
        Self::build(config, &mut |inp, hid, out, ln| {
            Mlp::init(inp, hid, out, ln, rng)
        })
    }

    /// All-zero parameters (checkpoint loading fills them in).
    fn zeros(config: EpdConfig) -> Self {
        Self::build(config, &mut |inp, hid, out, ln| {
            let mut m = Mlp::init(inp, hid, out, ln, &mut rand::rng());
            m.w1 = Tensor::zeros(inp, hid);
            m.w2 = Tensor::zeros(hid, out);
            m
        })
    }

    fn build(
        config: EpdConfig,
        mk: &mut dyn FnMut(usize, usize, usize, bool) -> Mlp<S>,
    ) -> Self {
        let l = config.latent;
        let h = config.hidden;
        let node_in = config.node_input_width();
        let enc_edge = Relation::ALL
            .iter()
            .map(|&r| mk(r.feature_width(), h, config.edge_latent_width(r), true))
            .collect();
        let layers = (0..config.layers)
            .map(|_| EpdLayer {
                edge: Relation::ALL
                    .iter()
                    .map(|&r| {
                        mk(
                            config.edge_update_input_width(r),
                            h,
                            config.edge_latent_width(r),
                            true,
                        )
                    })
                    .collect(),
                // Mesh nodes aggregate four relations, objects one, worlds
                // two; each update input is [self, sums...].
                node_mesh: mk(5 * l, h, l, true),
                node_object: mk(2 * l, h, l, true),
                node_world: mk(3 * l, h, l, true),
            })
            .collect();
        Self {
            config,
            enc_mesh: mk(node_in, h, l, true),
            enc_object: mk(node_in, h, l, true),
            enc_world: mk(crate::graph::WORLD_FEATURE_WIDTH, h, l, true),
            enc_edge,
            layers,
            dec_accel: mk(l, h, 3, false),
            dec_wrench: mk(l, h, 3, false),
        }
    }

    /// Walks every parameter block with a stable name, in a fixed order
    /// shared with [`EpdParams::insert`].
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.enc_mesh.visit("enc.mesh", f);
        self.enc_object.visit("enc.object", f);
        self.enc_world.visit("enc.world", f);
        for (r, m) in Relation::ALL.iter().zip(&self.enc_edge) {
            m.visit(&format!("enc.edge.{}", r.name()), f);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (r, m) in Relation::ALL.iter().zip(&layer.edge) {
                m.visit(&format!("layer{i:02}.edge.{}", r.name()), f);
            }
            layer.node_mesh.visit(&format!("layer{i:02}.node.mesh"), f);
            layer
                .node_object
                .visit(&format!("layer{i:02}.node.object"), f);
            layer.node_world.visit(&format!("layer{i:02}.node.world"), f);
        }
        self.dec_accel.visit("dec.accel", f);
        self.dec_wrench.visit("dec.wrench", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.enc_mesh.visit_mut("enc.mesh", f);
        self.enc_object.visit_mut("enc.object", f);
        self.enc_world.visit_mut("enc.world", f);
        for (r, m) in Relation::ALL.iter().zip(self.enc_edge.iter_mut()) {
            m.visit_mut(&format!("enc.edge.{}", r.name()), f);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (r, m) in Relation::ALL.iter().zip(layer.edge.iter_mut()) {
                m.visit_mut(&format!("layer{i:02}.edge.{}", r.name()), f);
            }
            layer
                .node_mesh
                .visit_mut(&format!("layer{i:02}.node.mesh"), f);
            layer
                .node_object
                .visit_mut(&format!("layer{i:02}.node.object"), f);
            layer
                .node_world
                .visit_mut(&format!("layer{i:02}.node.world"), f);
        }
        self.dec_accel.visit_mut("dec.accel", f);
        self.dec_wrench.visit_mut("dec.wrench", f);
    }

    pub fn n_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.data().len());
        n
    }

    /// Registers all parameters on a tape. The flattened id order equals
    /// the [`EpdParams::visit`] block order.
    pub fn insert(&self, tape: &mut Tape<S>) -> EpdIds {
        EpdIds {
            enc_mesh: self.enc_mesh.insert(tape),
            enc_object: self.enc_object.insert(tape),
            enc_world: self.enc_world.insert(tape),
            enc_edge: self.enc_edge.iter().map(|m| m.insert(tape)).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| EpdLayerIds {
                    edge: l.edge.iter().map(|m| m.insert(tape)).collect(),
                    node_mesh: l.node_mesh.insert(tape),
                    node_object: l.node_object.insert(tape),
                    node_world: l.node_world.insert(tape),
                })
                .collect(),
            dec_accel: self.dec_accel.insert(tape),
            dec_wrench: self.dec_wrench.insert(tape),
        }
    }

    /// Casts every parameter block (f32 checkpoints to f64 shadow and back).
    pub fn cast<T: Scalar>(&self) -> EpdParams<T> {
        let mut blocks: Vec<Tensor<T>> = Vec::new();
        self.visit(&mut |_, t| blocks.push(t.cast()));
        let mut out = EpdParams::<T>::zeros(self.config);
        let mut it = blocks.into_iter();
        out.visit_mut(&mut |_, t| *t = it.next().expect("same block count"));
        out
    }
}

#[derive(Debug, Clone)]
pub struct EpdLayerIds {
    pub edge: Vec<MlpIds>,
    pub node_mesh: MlpIds,
    pub node_object: MlpIds,
    pub node_world: MlpIds,
}

#[derive(Debug, Clone)]
pub struct EpdIds {
    pub enc_mesh: MlpIds,
    pub enc_object: MlpIds,
    pub enc_world: MlpIds,
    pub enc_edge: Vec<MlpIds>,
    pub layers: Vec<EpdLayerIds>,
    pub dec_accel: MlpIds,
    pub dec_wrench: MlpIds,
}

impl EpdIds {
    /// Parameter ids flattened in [`EpdParams::visit`] order.
    pub fn flat_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        out.extend(self.enc_mesh.ids());
        out.extend(self.enc_object.ids());
        out.extend(self.enc_world.ids());
        for m in &self.enc_edge {
            out.extend(m.ids());
        }
        for l in &self.layers {
            for m in &l.edge {
                out.extend(m.ids());
            }
            out.extend(l.node_mesh.ids());
            out.extend(l.node_object.ids());
            out.extend(l.node_world.ids());
        }
        out.extend(self.dec_accel.ids());
        out.extend(self.dec_wrench.ids());
        out
    }
}

/// Latent state of one graph batch on the tape.
#[derive(Debug, Clone)]
pub struct LatentGraph {
    pub mesh: NodeId,
    pub object: NodeId,
    pub world: NodeId,
    /// Edge latents in [`Relation::ALL`] order.
    pub edges: [NodeId; 7],
}

/// Decoded predictions, still on the tape.
#[derive(Debug, Clone, Copy)]
pub struct EpdOutput {
    /// `[n_dynamic_vertices x 3]`, rows aligned with `batch.dynamic_rows`.
    pub accel: NodeId,
    /// `[n_samples x 3]` mean-decoded force.
    pub force: NodeId,
    /// `[n_samples x 3]` mean-decoded torque.
    pub torque: NodeId,
}

fn check_widths(config: &EpdConfig, batch: &GraphBatch) -> Result<()> {
    let g = &batch.graph;
    let node_w = config.node_input_width();
    if g.mesh_nodes.cols() != node_w || g.object_nodes.cols() != node_w {
        return Err(Error::Shape(format!(
            "node feature width {} does not match configured history {}",
            g.mesh_nodes.cols(),
            config.history
        )));
    }
    if g.world_nodes.cols() != crate::graph::WORLD_FEATURE_WIDTH {
        return Err(Error::Shape("world node feature width".into()));
    }
    for r in Relation::ALL {
        if g.edge_features(r).cols() != r.feature_width() {
            return Err(Error::Shape(format!("{} feature width", r.name())));
        }
    }
    Ok(())
}

/// Lifts the batch's raw features into latent space.
pub fn encode<S: Scalar>(
    tape: &mut Tape<S>,
    ids: &EpdIds,
    config: &EpdConfig,
    batch: &GraphBatch,
) -> Result<LatentGraph> {
    check_widths(config, batch)?;
    let g = &batch.graph;
    let mesh_x = tape.leaf(g.mesh_nodes.cast());
    let object_x = tape.leaf(g.object_nodes.cast());
    let world_x = tape.leaf(g.world_nodes.cast());
    let mesh = ids.enc_mesh.forward(tape, mesh_x);
    let object = ids.enc_object.forward(tape, object_x);
    let world = ids.enc_world.forward(tape, world_x);
    let mut edges = [mesh; 7];
    for (slot, &r) in Relation::ALL.iter().enumerate() {
        let x = tape.leaf(g.edge_features(r).cast());
        edges[slot] = ids.enc_edge[slot].forward(tape, x);
    }
    Ok(LatentGraph {
        mesh,
        object,
        world,
        edges,
    })
}

/// Sender and receiver populations of a single-index relation.
fn relation_endpoints(
    lat: &LatentGraph,
    r: Relation,
) -> Option<(NodeId, NodeId)> {
    match r {
        Relation::MeshMesh => None,
        Relation::ObjectToMesh => Some((lat.object, lat.mesh)),
        Relation::MeshToObject => Some((lat.mesh, lat.object)),
        Relation::WorldForceToMesh | Relation::WorldTorqueToMesh => {
            Some((lat.world, lat.mesh))
        }
        Relation::MeshToWorldForce | Relation::MeshToWorldTorque => {
            Some((lat.mesh, lat.world))
        }
    }
}

fn edge_index_lists(batch: &GraphBatch, r: Relation) -> (&[u32], &[u32]) {
    let g = &batch.graph;
    match r {
        Relation::MeshMesh => unreachable!("collision edges use triplets"),
        Relation::ObjectToMesh => (&g.o2m.sender, &g.o2m.receiver),
        Relation::MeshToObject => (&g.m2o.sender, &g.m2o.receiver),
        Relation::WorldForceToMesh => (&g.wf2m.sender, &g.wf2m.receiver),
        Relation::WorldTorqueToMesh => (&g.wt2m.sender, &g.wt2m.receiver),
        Relation::MeshToWorldForce => (&g.m2wf.sender, &g.m2wf.receiver),
        Relation::MeshToWorldTorque => (&g.m2wt.sender, &g.m2wt.receiver),
    }
}

/// One message-passing layer: every edge latent is updated from its endpoint
/// node latents (residual), then every node latent from its per-relation
/// aggregated sums (residual). Collision edges see all six ranked vertices
/// and their updated latent is split into one message per receiver vertex.
pub fn process_layer<S: Scalar>(
    tape: &mut Tape<S>,
    layer: &EpdLayerIds,
    config: &EpdConfig,
    batch: &GraphBatch,
    lat: &LatentGraph,
) -> LatentGraph {
    let g = &batch.graph;
    let l = config.latent;
    let n_mesh = g.n_mesh_nodes();
    let mut new_edges = lat.edges;

    // Collision edges: concat [edge, three senders, three receivers].
    {
        let slot = Relation::MeshMesh.slot();
        let mut parts = vec![lat.edges[slot]];
        for k in 0..3 {
            let idx: Vec<u32> = g.mm.sender.iter().map(|t| t[k]).collect();
            parts.push(tape.gather_rows(lat.mesh, idx));
        }
        for k in 0..3 {
            let idx: Vec<u32> = g.mm.receiver.iter().map(|t| t[k]).collect();
            parts.push(tape.gather_rows(lat.mesh, idx));
        }
        let x = tape.concat_cols(&parts);
        let delta = layer.edge[slot].forward(tape, x);
        new_edges[slot] = tape.add(lat.edges[slot], delta);
    }

    for (slot, &r) in Relation::ALL.iter().enumerate() {
        let Some((send_pop, recv_pop)) = relation_endpoints(lat, r) else {
            continue;
        };
        let (senders, receivers) = edge_index_lists(batch, r);
        let vs = tape.gather_rows(send_pop, senders.to_vec());
        let vr = tape.gather_rows(recv_pop, receivers.to_vec());
        let x = tape.concat_cols(&[lat.edges[slot], vs, vr]);
        let delta = layer.edge[slot].forward(tape, x);
        new_edges[slot] = tape.add(lat.edges[slot], delta);
    }

    // Mesh nodes: [self, sum_mm, sum_o2m, sum_wf2m, sum_wt2m].
    let sum_mm = {
        let slot = Relation::MeshMesh.slot();
        let mut total = None;
        for k in 0..3 {
            let msg = tape.slice_cols(new_edges[slot], k * l, l);
            let idx: Vec<u32> = g.mm.receiver.iter().map(|t| t[k]).collect();
            let s = tape.scatter_sum_rows(msg, idx, n_mesh);
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s),
            });
        }
        total.expect("three receiver slots")
    };
    let scatter = |tape: &mut Tape<S>, edges: &[NodeId; 7], r: Relation, rows: usize| {
        let (_, receivers) = edge_index_lists(batch, r);
        tape.scatter_sum_rows(edges[r.slot()], receivers.to_vec(), rows)
    };
    let sum_o2m = scatter(tape, &new_edges, Relation::ObjectToMesh, n_mesh);
    let sum_wf2m = scatter(tape, &new_edges, Relation::WorldForceToMesh, n_mesh);
    let sum_wt2m = scatter(tape, &new_edges, Relation::WorldTorqueToMesh, n_mesh);
    let x = tape.concat_cols(&[lat.mesh, sum_mm, sum_o2m, sum_wf2m, sum_wt2m]);
    let delta = layer.node_mesh.forward(tape, x);
    let mesh = tape.add(lat.mesh, delta);

    // Object nodes: [self, sum_m2o].
    let sum_m2o = scatter(tape, &new_edges, Relation::MeshToObject, g.n_object_nodes());
    let x = tape.concat_cols(&[lat.object, sum_m2o]);
    let delta = layer.node_object.forward(tape, x);
    let object = tape.add(lat.object, delta);

    // World nodes: [self, sum_m2wf, sum_m2wt].
    let sum_m2wf = scatter(tape, &new_edges, Relation::MeshToWorldForce, g.n_world_nodes());
    let sum_m2wt = scatter(tape, &new_edges, Relation::MeshToWorldTorque, g.n_world_nodes());
    let x = tape.concat_cols(&[lat.world, sum_m2wf, sum_m2wt]);
    let delta = layer.node_world.forward(tape, x);
    let world = tape.add(lat.world, delta);

    LatentGraph {
        mesh,
        object,
        world,
        edges: new_edges,
    }
}

/// Reads out accelerations for dynamic-body vertices (static vertices are
/// masked before decoding) and the wrench as per-sample means over the
/// tool's mesh-to-world edge latents, one shared decoder for both kinds.
pub fn decode<S: Scalar>(
    tape: &mut Tape<S>,
    ids: &EpdIds,
    batch: &GraphBatch,
    lat: &LatentGraph,
) -> Result<EpdOutput> {
    if batch.dynamic_rows.is_empty() {
        return Err(Error::InvalidScene(
            "decode needs at least one dynamic-body vertex".into(),
        ));
    }
    let picked = tape.gather_rows(lat.mesh, batch.dynamic_rows.clone());
    let accel = ids.dec_accel.forward(tape, picked);

    let ef = tape.gather_rows(
        lat.edges[Relation::MeshToWorldForce.slot()],
        batch.wf_rows.clone(),
    );
    let df = ids.dec_wrench.forward(tape, ef);
    let force = tape.segment_mean(df, batch.wf_sample.clone(), batch.n_samples);

    let et = tape.gather_rows(
        lat.edges[Relation::MeshToWorldTorque.slot()],
        batch.wt_rows.clone(),
    );
    let dt = ids.dec_wrench.forward(tape, et);
    let torque = tape.segment_mean(dt, batch.wt_sample.clone(), batch.n_samples);

    Ok(EpdOutput {
        accel,
        force,
        torque,
    })
}

/// Full network pass; returns the decoded heads and the final latents.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    ids: &EpdIds,
    config: &EpdConfig,
    batch: &GraphBatch,
) -> Result<(EpdOutput, LatentGraph)> {
    let mut lat = encode(tape, ids, config, batch)?;
    for layer in &ids.layers {
        lat = process_layer(tape, layer, config, batch, &lat);
    }
    let out = decode(tape, ids, batch, &lat)?;
    Ok((out, lat))
}

/// Inference convenience: one forward pass, values copied off the tape.
pub fn predict(
    params: &EpdParams<f32>,
    batch: &GraphBatch,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let mut tape = Tape::new();
    let ids = params.insert(&mut tape);
    let (out, _) = forward(&mut tape, &ids, &params.config, batch)?;
    Ok((
        tape.value(out.accel).clone(),
        tape.value(out.force).clone(),
        tape.value(out.torque).clone(),
    ))
}

/// Writes parameters (plus caller blocks such as normalization statistics)
/// into the shared block-file format.
pub fn save_checkpoint(
    path: &std::path::Path,
    params: &EpdParams<f32>,
    extra_header: &[(String, String)],
    extra_blocks: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let c = params.config;
    let mut header = vec![
        ("format".to_string(), "epd-checkpoint-1".to_string()),
        ("layers".to_string(), c.layers.to_string()),
        ("latent".to_string(), c.latent.to_string()),
        ("hidden".to_string(), c.hidden.to_string()),
        ("history".to_string(), c.history.to_string()),
    ];
    header.extend_from_slice(extra_header);
    let mut blocks: Vec<(String, &Tensor<f32>)> = Vec::new();
    params.visit(&mut |name, t| blocks.push((name, t)));
    blocks.extend_from_slice(extra_blocks);
    let file = std::fs::File::create(path)?;
    write_blocks(std::io::BufWriter::new(file), &header, &blocks)
}

/// A checkpoint pulled back into parameters, keeping unrecognized header
/// entries and blocks available to the caller.
pub struct LoadedCheckpoint {
    pub params: EpdParams<f32>,
    pub header: Vec<(String, String)>,
    pub extra_blocks: Vec<(String, Tensor<f32>)>,
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<LoadedCheckpoint> {
    let file = read_blocks(std::fs::File::open(path)?)?;
    let get = |key: &str| -> Result<usize> {
        file.header_value(key)
            .ok_or_else(|| Error::Format(format!("checkpoint missing header key {key}")))?
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint header {key} is not a number")))
    };
    if file.header_value("format") != Some("epd-checkpoint-1") {
        return Err(Error::Format("not an epd checkpoint".into()));
    }
    let config = EpdConfig {
        layers: get("layers")?,
        latent: get("latent")?,
        hidden: get("hidden")?,
        history: get("history")?,
    };
    let mut params = EpdParams::<f32>::zeros(config);
    let mut used = std::collections::HashSet::new();
    let mut missing = Vec::new();
    params.visit_mut(&mut |name, t| {
        match file.block(&name) {
            Some(b) if b.shape() == t.shape() => {
                *t = b.clone();
                used.insert(name);
            }
            Some(_) => missing.push(format!("{name} (shape mismatch)")),
            None => missing.push(name),
        }
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint incomplete: {}",
            missing.join(", ")
        )));
    }
    let extra_blocks = file
        .blocks
        .into_iter()
        .filter(|(n, _)| !used.contains(n))
        .collect();
    Ok(LoadedCheckpoint {
        params,
        header: file.header,
        extra_blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BodySpec, Scene, TriMesh};
    use crate::graph::{build_graph, HeteroGraph};
    use crate::state::{Action, Pose, State, StateHistory};
    use crate::tensor::{mlp_forward, LN_EPS};
    use nalgebra::{Matrix3, UnitQuaternion, Vector3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EpdConfig {
        EpdConfig {
            layers: 2,
            latent: 8,
            hidden: 8,
            history: 3,
        }
    }

    fn tetra(scale: f64) -> TriMesh {
        TriMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0) * scale,
                Vector3::new(1.0, 0.0, 0.0) * scale,
                Vector3::new(0.0, 1.0, 0.0) * scale,
                Vector3::new(0.0, 0.0, 1.0) * scale,
            ],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        )
        .unwrap()
    }

    fn body(name: &str, dynamic: bool) -> BodySpec {
        BodySpec {
            name: name.into(),
            meshes: vec![tetra(0.1)],
            mass: if dynamic { 0.5 } else { 2.0 },
            friction: 0.4,
            dynamic,
            com: Vector3::new(0.02, 0.03, 0.025),
            inertia: Matrix3::identity() * 0.001,
            tip: Vector3::zeros(),
        }
    }

    fn contact_batch() -> GraphBatch {
        let scene = Scene::new(
            vec![body("plate", false), body("tool", true)],
            vec![
                Pose::identity(),
                Pose::new(Vector3::new(0.104, 0.0, 0.0), UnitQuaternion::identity()),
            ],
        )
        .unwrap();
        let hist = StateHistory::constant(State::at_rest(scene.rest_poses()[1]), 3);
        let action = Action {
            force: Vector3::new(0.5, -0.25, 1.0),
            torque: Vector3::new(0.1, 0.2, -0.3),
        };
        let g = build_graph(&scene, &hist, &action, 0.01).unwrap();
        assert!(!g.mm.is_empty());
        GraphBatch::single(g).unwrap()
    }

    fn far_batch() -> GraphBatch {
        let scene = Scene::new(
            vec![body("plate", false), body("tool", true)],
            vec![
                Pose::identity(),
                Pose::new(Vector3::new(1.0, 0.0, 0.0), UnitQuaternion::identity()),
            ],
        )
        .unwrap();
        let hist = StateHistory::constant(State::at_rest(scene.rest_poses()[1]), 3);
        let g = build_graph(&scene, &hist, &Action::zero(), 0.01).unwrap();
        assert!(g.mm.is_empty());
        GraphBatch::single(g).unwrap()
    }

    #[test]
    fn latent_shapes_match_reference_widths() {
        let config = EpdConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = EpdParams::<f32>::init(config, &mut rng);
        let batch = contact_batch();
        let mut tape = Tape::new();
        let ids = params.insert(&mut tape);
        let (out, lat) = forward(&mut tape, &ids, &config, &batch).unwrap();

        let g = &batch.graph;
        assert_eq!(tape.value(lat.mesh).shape(), (g.n_mesh_nodes(), 128));
        assert_eq!(tape.value(lat.object).shape(), (g.n_object_nodes(), 128));
        assert_eq!(tape.value(lat.world).shape(), (g.n_world_nodes(), 128));
        for r in Relation::ALL {
            let expect_w = if r == Relation::MeshMesh { 384 } else { 128 };
            assert_eq!(
                tape.value(lat.edges[r.slot()]).shape(),
                (g.edge_features(r).rows(), expect_w),
                "{}",
                r.name()
            );
        }
        // Output rows equal the dynamic vertex count; wrench is per sample.
        assert_eq!(tape.value(out.accel).shape(), (4, 3));
        assert_eq!(tape.value(out.force).shape(), (1, 3));
        assert_eq!(tape.value(out.torque).shape(), (1, 3));
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let params = EpdParams::<f32>::init(config, &mut rng);
        let batch = contact_batch();
        let (a1, f1, t1) = predict(&params, &batch).unwrap();
        let (a2, f2, t2) = predict(&params, &batch).unwrap();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(f1.data(), f2.data());
        assert_eq!(t1.data(), t2.data());
    }

    #[test]
    fn empty_collision_edge_set_flows_through() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let params = EpdParams::<f32>::init(config, &mut rng);
        let batch = far_batch();
        let mut tape = Tape::new();
        let ids = params.insert(&mut tape);
        let (out, lat) = forward(&mut tape, &ids, &config, &batch).unwrap();
        assert_eq!(
            tape.value(lat.edges[Relation::MeshMesh.slot()]).rows(),
            0
        );
        assert!(tape.value(out.accel).all_finite());
        assert!(tape.value(out.force).all_finite());
    }

    #[test]
    fn residual_stack_with_zeroed_processors_is_identity() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut params = EpdParams::<f32>::init(config, &mut rng);
        // Zero every processor's second layer and LayerNorm offset: the MLP
        // output becomes exactly zero, so residual adds must be identity.
        for layer in &mut params.layers {
            let zero = |m: &mut Mlp<f32>| {
                m.w2 = Tensor::zeros(m.w2.rows(), m.w2.cols());
                m.b2 = Tensor::zeros(1, m.b2.cols());
                if let Some(ln) = &mut m.ln {
                    ln.beta = Tensor::zeros(1, ln.beta.cols());
                }
            };
            for m in &mut layer.edge {
                zero(m);
            }
            zero(&mut layer.node_mesh);
            zero(&mut layer.node_object);
            zero(&mut layer.node_world);
        }

        let batch = contact_batch();
        let mut tape = Tape::new();
        let ids = params.insert(&mut tape);
        let enc = encode(&mut tape, &ids, &config, &batch).unwrap();
        let mut lat = enc.clone();
        for layer in &ids.layers {
            lat = process_layer(&mut tape, layer, &config, &batch, &lat);
        }
        assert_eq!(tape.value(lat.mesh).data(), tape.value(enc.mesh).data());
        assert_eq!(tape.value(lat.object).data(), tape.value(enc.object).data());
        assert_eq!(tape.value(lat.world).data(), tape.value(enc.world).data());
        for slot in 0..7 {
            assert_eq!(
                tape.value(lat.edges[slot]).data(),
                tape.value(enc.edges[slot]).data()
            );
        }
    }

    #[test]
    fn zero_decoders_give_zero_outputs() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let mut params = EpdParams::<f32>::init(config, &mut rng);
        for m in [&mut params.dec_accel, &mut params.dec_wrench] {
            m.w2 = Tensor::zeros(m.w2.rows(), m.w2.cols());
            m.b2 = Tensor::zeros(1, m.b2.cols());
        }
        let batch = contact_batch();
        let (a, f, t) = predict(&params, &batch).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrench_mean_matches_per_edge_recompute() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let params = EpdParams::<f64>::init(config, &mut rng);
        let batch = contact_batch();
        let mut tape = Tape::new();
        let ids = params.insert(&mut tape);
        let (out, lat) = forward(&mut tape, &ids, &config, &batch).unwrap();

        // Independent mean: plain per-edge decodes, summed by hand.
        let ef = tape.value(lat.edges[Relation::MeshToWorldForce.slot()]);
        let mut mean = [0.0f64; 3];
        for &row in &batch.wf_rows {
            let row_t = Tensor::from_vec(1, config.latent, ef.row(row as usize).to_vec());
            let dec = mlp_forward(&params.dec_wrench, &row_t).unwrap();
            for c in 0..3 {
                mean[c] += dec.get(0, c);
            }
        }
        for v in &mut mean {
            *v /= batch.wf_rows.len() as f64;
        }
        let got = tape.value(out.force);
        for c in 0..3 {
            assert!(
                (got.get(0, c) - mean[c]).abs() < 1e-6,
                "col {c}: {} vs {}",
                got.get(0, c),
                mean[c]
            );
        }
    }

    #[test]
    fn history_mismatch_is_a_shape_error() {
        let config = small_config(); // expects h = 3
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let params = EpdParams::<f32>::init(config, &mut rng);
        let scene = Scene::new(
            vec![body("plate", false), body("tool", true)],
            vec![
                Pose::identity(),
                Pose::new(Vector3::new(0.104, 0.0, 0.0), UnitQuaternion::identity()),
            ],
        )
        .unwrap();
        let hist = StateHistory::constant(State::at_rest(scene.rest_poses()[1]), 2);
        let g = build_graph(&scene, &hist, &Action::zero(), 0.01).unwrap();
        let batch = GraphBatch::single(g).unwrap();
        let mut tape = Tape::new();
        let ids = params.insert(&mut tape);
        assert!(matches!(
            encode(&mut tape, &ids, &config, &batch),
            Err(Error::Shape(_))
        ));
    }

    /// Hand-built two-mesh-node graph, identity-like MLPs: every update is
    /// recomputed with test-local scalar arithmetic.
    #[test]
    fn process_layer_matches_hand_computation() {
        let l = 2usize;
        let config = EpdConfig {
            layers: 1,
            latent: l,
            hidden: 2,
            history: 1,
        };

        // phi(x) = LayerNorm([relu(sum a_i x_i), relu(sum b_i x_i), 0...]):
        // both hidden units mix the entire input row, so every concatenated
        // slot (gathered latents, aggregation sums) influences the output.
        let wa = |i: usize| 0.2 * ((i % 3) as f64 + 1.0);
        let wb = |i: usize| 0.1 * ((i % 5) as f64 + 1.0);
        let mix = |input: usize, output: usize| -> Mlp<f64> {
            let mut m = Mlp {
                w1: Tensor::zeros(input, 2),
                b1: Tensor::zeros(1, 2),
                w2: Tensor::zeros(2, output),
                b2: Tensor::zeros(1, output),
                ln: Some(crate::tensor::LayerNormParams {
                    gamma: Tensor::from_fn(1, output, |_, _| 1.0),
                    beta: Tensor::zeros(1, output),
                }),
            };
            for i in 0..input {
                m.w1.set(i, 0, wa(i));
                m.w1.set(i, 1, wb(i));
            }
            m.w2.set(0, 0, 1.0);
            m.w2.set(1, 1, 1.0);
            m
        };
        let mut params = EpdParams::<f64>::zeros(config);
        params.enc_mesh = mix(6, l);
        params.enc_object = mix(6, l);
        params.enc_world = mix(2, l);
        for (slot, &r) in Relation::ALL.iter().enumerate() {
            params.enc_edge[slot] =
                mix(r.feature_width(), config.edge_latent_width(r));
        }
        params.layers[0].edge = Relation::ALL
            .iter()
            .map(|&r| mix(config.edge_update_input_width(r), config.edge_latent_width(r)))
            .collect();
        params.layers[0].node_mesh = mix(5 * l, l);
        params.layers[0].node_object = mix(2 * l, l);
        params.layers[0].node_world = mix(3 * l, l);

        // Two mesh nodes, one object, two world nodes; one collision edge
        // whose sender triplet repeats node 0 and receiver triplet node 1.
        let mesh_feats = vec![
            vec![0.3, 0.2, 0.1, 1.0, 0.5, 1.0],
            vec![0.6, 0.1, 0.4, 1.0, 0.5, 1.0],
        ];
        let object_feats = vec![vec![0.45, 0.15, 0.25, 1.0, 0.5, 1.0]];
        let world_feats = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let o2m_feats = vec![vec![0.1, 0.2, 0.3, 0.374], vec![0.4, 0.3, 0.2, 0.538]];
        let m2o_feats = vec![vec![0.2, 0.1, 0.3, 0.374], vec![0.3, 0.4, 0.2, 0.538]];
        let wf2m_feats = vec![vec![0.5, 0.25, 1.0, 1.15], vec![0.5, 0.25, 1.0, 1.15]];
        let wt2m_feats = vec![
            vec![0.1, 0.2, 0.3, 0.374, 0.4, 0.5, 0.6, 0.877],
            vec![0.2, 0.3, 0.1, 0.374, 0.5, 0.6, 0.4, 0.877],
        ];
        let m2wf_feats = wf2m_feats.clone();
        let m2wt_feats = wt2m_feats.clone();
        let mm_feats = vec![(0..27).map(|i| 0.05 + 0.01 * i as f64).collect::<Vec<_>>()];

        let to_tensor = |rows: &[Vec<f64>], w: usize| {
            Tensor::from_vec(
                rows.len(),
                w,
                rows.iter().flatten().copied().collect(),
            )
        };
        let mk_edges = |s: Vec<u32>, r: Vec<u32>, feats: &[Vec<f64>], w: usize| {
            crate::graph::EdgeSet {
                sender: s,
                receiver: r,
                features: to_tensor(feats, w),
            }
        };
        let graph = HeteroGraph {
            h: 1,
            mesh_nodes: to_tensor(&mesh_feats, 6),
            object_nodes: to_tensor(&object_feats, 6),
            world_nodes: to_tensor(&world_feats, 2),
            mesh_body: vec![0, 0],
            mesh_dynamic: vec![true, true],
            mm: crate::graph::MeshMeshEdgeSet {
                sender: vec![[0, 0, 0]],
                receiver: vec![[1, 1, 1]],
                features: to_tensor(&mm_feats, 27),
            },
            o2m: mk_edges(vec![0, 0], vec![0, 1], &o2m_feats, 4),
            m2o: mk_edges(vec![0, 1], vec![0, 0], &m2o_feats, 4),
            wf2m: mk_edges(vec![0, 0], vec![0, 1], &wf2m_feats, 4),
            wt2m: mk_edges(vec![1, 1], vec![0, 1], &wt2m_feats, 8),
            m2wf: mk_edges(vec![0, 1], vec![0, 0], &m2wf_feats, 4),
            m2wt: mk_edges(vec![0, 1], vec![1, 1], &m2wt_feats, 8),
        };
        graph.validate().unwrap();
        let batch = GraphBatch::single(graph).unwrap();

        let mut tape = Tape::new();
        let ids = params.insert(&mut tape);
        let enc = encode(&mut tape, &ids, &config, &batch).unwrap();
        let lat = process_layer(&mut tape, &ids.layers[0], &config, &batch, &enc);

        // Test-local scalar recompute.
        let ln = |v: &[f64]| -> Vec<f64> {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            v.iter().map(|x| (x - mean) * rstd).collect()
        };
        let phi = |x: &[f64], out: usize| -> Vec<f64> {
            let mut y = vec![0.0; out];
            let h0: f64 = x.iter().enumerate().map(|(i, v)| wa(i) * v).sum();
            let h1: f64 = x.iter().enumerate().map(|(i, v)| wb(i) * v).sum();
            y[0] = h0.max(0.0);
            y[1] = h1.max(0.0);
            ln(&y)
        };
        let enc1 = |rows: &[Vec<f64>], out: usize| -> Vec<Vec<f64>> {
            rows.iter().map(|r| phi(r, out)).collect()
        };
        let vm = enc1(&mesh_feats, l);
        let vo = enc1(&object_feats, l);
        let vw = enc1(&world_feats, l);
        let e_mm = enc1(&mm_feats, 3 * l);
        let e_o2m = enc1(&o2m_feats, l);
        let e_m2o = enc1(&m2o_feats, l);
        let e_wf2m = enc1(&wf2m_feats, l);
        let e_wt2m = enc1(&wt2m_feats, l);
        let e_m2wf = enc1(&m2wf_feats, l);
        let e_m2wt = enc1(&m2wt_feats, l);

        let cat = |parts: &[&[f64]]| -> Vec<f64> {
            parts.iter().flat_map(|p| p.iter().copied()).collect()
        };
        let addv = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + y).collect()
        };

        // Edge updates.
        let upd_edge = |e: &[f64], vs: &[f64], vr: &[f64], out: usize| -> Vec<f64> {
            addv(e, &phi(&cat(&[e, vs, vr]), out))
        };
        let e_mm1 = {
            let x = cat(&[
                &e_mm[0], &vm[0], &vm[0], &vm[0], &vm[1], &vm[1], &vm[1],
            ]);
            addv(&e_mm[0], &phi(&x, 3 * l))
        };
        let e_o2m1 = [
            upd_edge(&e_o2m[0], &vo[0], &vm[0], l),
            upd_edge(&e_o2m[1], &vo[0], &vm[1], l),
        ];
        let e_m2o1 = [
            upd_edge(&e_m2o[0], &vm[0], &vo[0], l),
            upd_edge(&e_m2o[1], &vm[1], &vo[0], l),
        ];
        let e_wf2m1 = [
            upd_edge(&e_wf2m[0], &vw[0], &vm[0], l),
            upd_edge(&e_wf2m[1], &vw[0], &vm[1], l),
        ];
        let e_wt2m1 = [
            upd_edge(&e_wt2m[0], &vw[1], &vm[0], l),
            upd_edge(&e_wt2m[1], &vw[1], &vm[1], l),
        ];
        let e_m2wf1 = [
            upd_edge(&e_m2wf[0], &vm[0], &vw[0], l),
            upd_edge(&e_m2wf[1], &vm[1], &vw[0], l),
        ];
        let e_m2wt1 = [
            upd_edge(&e_m2wt[0], &vm[0], &vw[1], l),
            upd_edge(&e_m2wt[1], &vm[1], &vw[1], l),
        ];

        // Node updates. Collision messages: all three slices go to node 1.
        let zero2 = vec![0.0; l];
        let mm_node1 = {
            let s0 = &e_mm1[0..l];
            let s1 = &e_mm1[l..2 * l];
            let s2 = &e_mm1[2 * l..3 * l];
            addv(&addv(s0, s1), s2)
        };
        let vm1 = {
            let x0 = cat(&[&vm[0], &zero2, &e_o2m1[0], &e_wf2m1[0], &e_wt2m1[0]]);
            let x1 = cat(&[&vm[1], &mm_node1, &e_o2m1[1], &e_wf2m1[1], &e_wt2m1[1]]);
            [
                addv(&vm[0], &phi(&x0, l)),
                addv(&vm[1], &phi(&x1, l)),
            ]
        };
        let vo1 = {
            let s = addv(&e_m2o1[0], &e_m2o1[1]);
            [addv(&vo[0], &phi(&cat(&[&vo[0], &s]), l))]
        };
        let vw1 = {
            let swf0 = addv(&e_m2wf1[0], &e_m2wf1[1]);
            let x0 = cat(&[&vw[0], &swf0, &zero2]);
            let swt1 = addv(&e_m2wt1[0], &e_m2wt1[1]);
            let x1 = cat(&[&vw[1], &zero2, &swt1]);
            [
                addv(&vw[0], &phi(&x0, l)),
                addv(&vw[1], &phi(&x1, l)),
            ]
        };

        let check = |got: &Tensor<f64>, want: &[Vec<f64>]| {
            assert_eq!(got.rows(), want.len());
            for (r, row) in want.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    assert!(
                        (got.get(r, c) - v).abs() < 1e-12,
                        "({r},{c}): {} vs {v}",
                        got.get(r, c)
                    );
                }
            }
        };
        check(tape.value(lat.mesh), &vm1);
        check(tape.value(lat.object), &vo1);
        check(tape.value(lat.world), &vw1);
        check(tape.value(lat.edges[Relation::MeshMesh.slot()]), &[e_mm1]);
        check(
            tape.value(lat.edges[Relation::ObjectToMesh.slot()]),
            &e_o2m1,
        );
        check(
            tape.value(lat.edges[Relation::MeshToWorldTorque.slot()]),
            &e_m2wt1,
        );
    }

    #[test]
    fn translation_invariant_outputs() {
        // Shift scene, history, and rest poses; f32 outputs must agree.
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let params = EpdParams::<f32>::init(config, &mut rng);

        let irregular = TriMesh::new(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(0.11, 0.013, 0.007),
                Vector3::new(0.021, 0.094, 0.017),
                Vector3::new(0.008, 0.023, 0.102),
            ],
            vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]],
        )
        .unwrap();
        let mk_body = |name: &str, dynamic: bool| BodySpec {
            name: name.into(),
            meshes: vec![irregular.clone()],
            mass: if dynamic { 0.5 } else { 2.0 },
            friction: 0.4,
            dynamic,
            com: Vector3::new(0.02, 0.03, 0.025),
            inertia: Matrix3::identity() * 0.001,
            tip: Vector3::zeros(),
        };
        let action = Action {
            force: Vector3::new(0.5, -0.25, 1.0),
            torque: Vector3::new(0.1, 0.2, -0.3),
        };
        let build = |shift: Vector3<f64>| {
            let scene = Scene::new(
                vec![mk_body("plate", false), mk_body("tool", true)],
                vec![
                    Pose::new(shift, UnitQuaternion::identity()),
                    Pose::new(
                        Vector3::new(0.115, 0.013, 0.007) + shift,
                        UnitQuaternion::identity(),
                    ),
                ],
            )
            .unwrap();
            let hist =
                StateHistory::constant(State::at_rest(scene.rest_poses()[1]), 3);
            let g = build_graph(&scene, &hist, &action, 0.01).unwrap();
            assert!(!g.mm.is_empty());
            GraphBatch::single(g).unwrap()
        };

        let (a0, f0, t0) = predict(&params, &build(Vector3::zeros())).unwrap();
        let shifted = build(Vector3::new(7.25, -3.5, 2.125));
        let (a1, f1, t1) = predict(&params, &shifted).unwrap();
        for (x, y) in a0.data().iter().zip(a1.data()) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
        for (x, y) in f0.data().iter().zip(f1.data()) {
            assert!((x - y).abs() < 1e-5);
        }
        for (x, y) in t0.data().iter().zip(t1.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn permuting_edge_rows_changes_little() {
        // Permutation invariance of sum aggregation, up to float
        // associativity (f64 keeps that far below 1e-9).
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let params = EpdParams::<f64>::init(config, &mut rng);
        let batch = contact_batch();
        let mut permuted = batch.clone();
        {
            let o2m = &mut permuted.graph.o2m;
            let n = o2m.len();
            let perm: Vec<usize> = (0..n).rev().collect();
            o2m.sender = perm.iter().map(|&i| o2m.sender[i]).collect();
            o2m.receiver = perm.iter().map(|&i| o2m.receiver[i]).collect();
            let w = o2m.features.cols();
            let old = o2m.features.clone();
            for (new_r, &old_r) in perm.iter().enumerate() {
                for c in 0..w {
                    o2m.features.set(new_r, c, old.get(old_r, c));
                }
            }
        }

        let run = |b: &GraphBatch| {
            let mut tape = Tape::new();
            let ids = params.insert(&mut tape);
            let (out, _) = forward(&mut tape, &ids, &config, b).unwrap();
            (
                tape.value(out.accel).clone(),
                tape.value(out.force).clone(),
            )
        };
        let (a0, f0) = run(&batch);
        let (a1, f1) = run(&permuted);
        for (x, y) in a0.data().iter().zip(a1.data()) {
            assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in f0.data().iter().zip(f1.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn batched_forward_equals_stacked_singles() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let params = EpdParams::<f32>::init(config, &mut rng);

        let b1 = contact_batch();
        let b2 = far_batch();
        let merged =
            GraphBatch::merge(&[b1.graph.clone(), b2.graph.clone()]).unwrap();

        let (a1, f1, t1) = predict(&params, &b1).unwrap();
        let (a2, f2, t2) = predict(&params, &b2).unwrap();
        let (am, fm, tm) = predict(&params, &merged).unwrap();

        assert_eq!(am.rows(), a1.rows() + a2.rows());
        assert_eq!(fm.rows(), 2);
        let close = |x: f32, y: f32| (x - y).abs() < 1e-5;
        for r in 0..a1.rows() {
            for c in 0..3 {
                assert!(close(am.get(r, c), a1.get(r, c)));
            }
        }
        for r in 0..a2.rows() {
            for c in 0..3 {
                assert!(close(am.get(a1.rows() + r, c), a2.get(r, c)));
            }
        }
        for c in 0..3 {
            assert!(close(fm.get(0, c), f1.get(0, c)));
            assert!(close(fm.get(1, c), f2.get(0, c)));
            assert!(close(tm.get(0, c), t1.get(0, c)));
            assert!(close(tm.get(1, c), t2.get(0, c)));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Full network gradient on a toy graph, f64, central differences.
        let config = EpdConfig {
            layers: 2,
            latent: 4,
            hidden: 4,
            history: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = EpdParams::<f64>::init(config, &mut rng);
        let batch = contact_batch();

        let target_a = Tensor::<f64>::from_fn(4, 3, |r, c| 0.1 * (r + c) as f64);
        let target_f = Tensor::<f64>::from_fn(1, 3, |_, c| 0.2 - 0.1 * c as f64);

        let loss_of = |p: &EpdParams<f64>| -> f64 {
            let mut tape = Tape::new();
            let ids = p.insert(&mut tape);
            let (out, _) = forward(&mut tape, &ids, &config, &batch).unwrap();
            let la = tape.mse_loss(out.accel, target_a.clone()).unwrap();
            let lf = tape.mse_loss(out.force, target_f.clone()).unwrap();
            let total = tape.weighted_sum(&[(la, 1.0), (lf, 0.1)]).unwrap();
            tape.value(total).item()
        };

        // Analytic gradients once.
        let mut tape = Tape::new();
        let ids = params.insert(&mut tape);
        let (out, _) = forward(&mut tape, &ids, &config, &batch).unwrap();
        let la = tape.mse_loss(out.accel, target_a.clone()).unwrap();
        let lf = tape.mse_loss(out.force, target_f.clone()).unwrap();
        let total = tape.weighted_sum(&[(la, 1.0), (lf, 0.1)]).unwrap();
        let grads = tape.backward(total).unwrap();

        // Probe a few scalars in every kind of block.
        let flat = ids.flat_ids();
        let mut names = Vec::new();
        params.visit(&mut |name, _| names.push(name));
        assert_eq!(names.len(), flat.len());

        let mut checked = 0;
        for (bi, name) in names.iter().enumerate() {
            if !(name.contains("enc.mesh")
                || name.contains("edge.mesh_mesh")
                || name.contains("node.world")
                || name.contains("dec."))
            {
                continue;
            }
            let Some(g) = grads.get(flat[bi]) else { continue };
            if g.data().is_empty() {
                continue;
            }
            let probe = (bi * 7) % g.data().len();
            let analytic = g.data()[probe];

            let step = 1e-5;
            let mut plus = params.clone();
            let mut minus = params.clone();
            let mut i = 0;
            plus.visit_mut(&mut |_, t| {
                if i == bi {
                    t.data_mut()[probe] += step;
                }
                i += 1;
            });
            i = 0;
            minus.visit_mut(&mut |_, t| {
                if i == bi {
                    t.data_mut()[probe] -= step;
                }
                i += 1;
            });
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
            let tol = 1e-4 * fd.abs().max(analytic.abs()).max(1e-4);
            assert!(
                (fd - analytic).abs() < tol,
                "{name}[{probe}]: fd {fd} vs analytic {analytic}"
            );
            checked += 1;
        }
        assert!(checked >= 8, "only {checked} blocks probed");
    }

    #[test]
    fn checkpoint_round_trip_preserves_params() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = EpdParams::<f32>::init(config, &mut rng);
        let extra = Tensor::<f32>::from_fn(2, 3, |r, c| (r * 3 + c) as f32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(
            &path,
            &params,
            &[("note".into(), "fixture".into())],
            &[("norm.example".into(), &extra)],
        )
        .unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, params);
        assert_eq!(
            loaded.header.iter().find(|(k, _)| k == "note").unwrap().1,
            "fixture"
        );
        assert_eq!(loaded.extra_blocks.len(), 1);
        assert_eq!(loaded.extra_blocks[0].0, "norm.example");
        assert_eq!(loaded.extra_blocks[0].1.data(), extra.data());

        // Truncated checkpoint (a block removed) must fail loudly.
        let bad = dir.path().join("bad.ckpt");
        let file = read_blocks(std::fs::File::open(&path).unwrap()).unwrap();
        let blocks: Vec<(String, &Tensor<f32>)> = file
            .blocks
            .iter()
            .filter(|(n, _)| n != "dec.wrench.w2")
            .map(|(n, t)| (n.clone(), t))
            .collect();
        write_blocks(
            std::io::BufWriter::new(std::fs::File::create(&bad).unwrap()),
            &file.header,
            &blocks,
        )
        .unwrap();
        assert!(matches!(load_checkpoint(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn visit_matches_insert_order() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let params = EpdParams::<f32>::init(config, &mut rng);
        let mut tape = Tape::new();
        let ids = params.insert(&mut tape);
        let flat = ids.flat_ids();
        let mut k = 0;
        params.visit(&mut |name, t| {
            assert_eq!(
                tape.value(flat[k]).data(),
                t.data(),
                "block {k} ({name}) out of order"
            );
            k += 1;
        });
        assert_eq!(k, flat.len());
        assert!(params.n_scalars() > 0);
    }

    #[test]
    fn translated_grid_scene_has_identical_latents() {
        // Exact binary-fraction scene: encoder latents must be bit-equal.
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let params = EpdParams::<f32>::init(config, &mut rng);

        let grid_tetra = tetra(0.125);
        let mk_scene = |shift: Vector3<f64>| {
            Scene::new(
                vec![
                    BodySpec {
                        name: "plate".into(),
                        meshes: vec![grid_tetra.clone()],
                        mass: 2.0,
                        friction: 0.4,
                        dynamic: false,
                        com: Vector3::repeat(0.03125),
                        inertia: Matrix3::identity() * 0.001,
                        tip: Vector3::zeros(),
                    },
                    BodySpec {
                        name: "tool".into(),
                        meshes: vec![grid_tetra.clone()],
                        mass: 0.5,
                        friction: 0.4,
                        dynamic: true,
                        com: Vector3::repeat(0.03125),
                        inertia: Matrix3::identity() * 0.001,
                        tip: Vector3::zeros(),
                    },
                ],
                vec![
                    Pose::new(shift, UnitQuaternion::identity()),
                    Pose::new(
                        Vector3::new(0.12890625, 0.0, 0.0) + shift,
                        UnitQuaternion::identity(),
                    ),
                ],
            )
            .unwrap()
        };
        let build = |shift: Vector3<f64>| {
            let scene = mk_scene(shift);
            let hist =
                StateHistory::constant(State::at_rest(scene.rest_poses()[1]), 3);
            let g = build_graph(&scene, &hist, &Action::zero(), 0.01).unwrap();
            GraphBatch::single(g).unwrap()
        };
        let b0 = build(Vector3::zeros());
        let b1 = build(Vector3::new(5.25, -3.5, 2.125));

        let run = |b: &GraphBatch| {
            let mut tape = Tape::new();
            let ids = params.insert(&mut tape);
            let lat = encode(&mut tape, &ids, &config, b).unwrap();
            (
                tape.value(lat.mesh).clone(),
                tape.value(lat.edges[Relation::MeshMesh.slot()]).clone(),
            )
        };
        let (m0, e0) = run(&b0);
        let (m1, e1) = run(&b1);
        assert_eq!(m0.data(), m1.data());
        assert!(e0.rows() > 0);
        assert_eq!(e0.data(), e1.data());
    }
}
