//! Model training: z-score normalization statistics, rotation and noise data
//! augmentation, training-sample assembly, the weighted multi-task loss, and
//! the Adam optimization loop with checkpoint/resume support.
//!
//! The target the network regresses for motion is the per-vertex discrete
//! acceleration `a* = p[t+1] - 2 p[t] + p[t-1]`. With the current and
//! previous positions held fixed, the advanced position differs from the
//! true one by exactly the acceleration error, so a mean-squared error on
//! accelerations equals a mean-squared error on next-step positions.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{Dataset, Record};
use crate::epd::{self, EpdConfig, EpdOutput, EpdParams};
use crate::geometry::{detect_collisions, ContactPair, Scene};
use crate::graph::{build_graph_from_frames, GraphBatch, HeteroGraph, Relation};
use crate::state::{Action, Pose};
use crate::tensor::{lr_schedule, AdamState, NodeId, Scalar, Tape, Tensor};
use crate::{Error, Result};

/// Smallest deviation a z-score group may use; constant columns divide by
/// this instead of zero. Quantized to f32 so checkpointed statistics round
/// trip bit-exactly.
pub const STD_FLOOR: f64 = 1e-8f32 as f64;

/// Episodes whose index satisfies `episode % VAL_EPISODE_MODULO ==
/// VAL_EPISODE_MODULO - 1` form the validation split.
pub const VAL_EPISODE_MODULO: u32 = 20;

// ---------------------------------------------------------------------------
// Normalization statistics
// ---------------------------------------------------------------------------

/// Single-pass mean/variance accumulator over feature rows (population
/// variance from running sum and sum of squares).
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    count: u64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(width: usize) -> Self {
        Self {
            count: 0,
            sum: vec![0.0; width],
            sumsq: vec![0.0; width],
            min: vec![f64::INFINITY; width],
            max: vec![f64::NEG_INFINITY; width],
        }
    }

    pub fn width(&self) -> usize {
        self.sum.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn add_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.sum.len(), "accumulator row width");
        for (i, &x) in row.iter().enumerate() {
            self.sum[i] += x;
            self.sumsq[i] += x * x;
            self.min[i] = self.min[i].min(x);
            self.max[i] = self.max[i].max(x);
        }
        self.count += 1;
    }

    pub fn add_rows(&mut self, rows: &Tensor<f64>) {
        for r in 0..rows.rows() {
            self.add_row(rows.row(r));
        }
    }

    /// Mean and floored deviation per column. Values are rounded through
    /// f32 so that checkpoints carry them without loss; a group that never
    /// saw a row keeps raw units (mean 0, deviation 1).
    pub fn finish(&self) -> GroupStats {
        if self.count == 0 {
            return GroupStats::identity(self.width());
        }
        let n = self.count as f64;
        let mut mean = Vec::with_capacity(self.width());
        let mut std = Vec::with_capacity(self.width());
        for i in 0..self.width() {
            let m = self.sum[i] / n;
            // A constant column's variance is exactly zero; the running
            // sums alone would leave cancellation residue there.
            let var = if self.min[i] == self.max[i] {
                0.0
            } else {
                (self.sumsq[i] / n - m * m).max(0.0)
            };
            mean.push(m as f32 as f64);
            std.push(var.sqrt().max(STD_FLOOR) as f32 as f64);
        }
        GroupStats { mean, std }
    }
}

/// Column means and deviations for one z-score group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GroupStats {
    /// Mean 0, deviation 1: normalization is the identity map.
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize_rows(&self, t: &mut Tensor<f64>) -> Result<()> {
        if t.cols() != self.width() {
            return Err(Error::Shape(format!(
                "normalize: {} columns, stats cover {}",
                t.cols(),
                self.width()
            )));
        }
        let w = self.width();
        for r in 0..t.rows() {
            let row = &mut t.data_mut()[r * w..(r + 1) * w];
            for i in 0..w {
                row[i] = (row[i] - self.mean[i]) / self.std[i];
            }
        }
        Ok(())
    }

    pub fn denormalize_rows(&self, t: &mut Tensor<f32>) -> Result<()> {
        if t.cols() != self.width() {
            return Err(Error::Shape(format!(
                "denormalize: {} columns, stats cover {}",
                t.cols(),
                self.width()
            )));
        }
        let w = self.width();
        for r in 0..t.rows() {
            let row = &mut t.data_mut()[r * w..(r + 1) * w];
            for i in 0..w {
                row[i] = (row[i] as f64 * self.std[i] + self.mean[i]) as f32;
            }
        }
        Ok(())
    }

    fn to_tensors(&self) -> (Tensor<f32>, Tensor<f32>) {
        let w = self.width();
        (
            Tensor::from_vec(1, w, self.mean.iter().map(|&x| x as f32).collect()),
            Tensor::from_vec(1, w, self.std.iter().map(|&x| x as f32).collect()),
        )
    }

    fn from_tensors(mean: &Tensor<f32>, std: &Tensor<f32>) -> Result<Self> {
        if mean.rows() != 1 || std.rows() != 1 || mean.cols() != std.cols() {
            return Err(Error::Format("stats block shape".into()));
        }
        Ok(Self {
            mean: mean.data().iter().map(|&x| x as f64).collect(),
            std: std.data().iter().map(|&x| x as f64).collect(),
        })
    }
}

/// Normalization statistics for every feature and target group. Mesh and
/// object node rows share one group (they have the same layout and units);
/// each edge relation gets its own; world node features are one-hot rows and
/// stay raw.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub node: GroupStats,
    /// One group per relation, in [`Relation::ALL`] order.
    pub edge: Vec<GroupStats>,
    pub accel: GroupStats,
    pub force: GroupStats,
    pub torque: GroupStats,
}

impl NormStats {
    /// Fits statistics over the listed records, assembling each one's clean
    /// (un-augmented) sample.
    pub fn fit(
        scene: &Scene,
        dataset: &Dataset,
        contacts: &[Vec<ContactPair>],
        indices: &[usize],
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("no records to fit statistics on".into()));
        }
        let node_w = 3 * dataset.h + 3;
        let mut node = StatsAccumulator::new(node_w);
        let mut edge: Vec<StatsAccumulator> = Relation::ALL
            .iter()
            .map(|r| StatsAccumulator::new(r.feature_width()))
            .collect();
        let mut accel = StatsAccumulator::new(3);
        let mut force = StatsAccumulator::new(3);
        let mut torque = StatsAccumulator::new(3);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &i in indices {
            let s = build_sample(
                scene,
                &dataset.records[i],
                &contacts[i],
                SampleOptions::default(),
                &mut rng,
            )?;
            node.add_rows(&s.graph.mesh_nodes);
            node.add_rows(&s.graph.object_nodes);
            for (k, r) in Relation::ALL.iter().enumerate() {
                edge[k].add_rows(s.graph.edge_features(*r));
            }
            accel.add_rows(&s.accel);
            force.add_rows(&s.force);
            torque.add_rows(&s.torque);
        }
        Ok(Self {
            node: node.finish(),
            edge: edge.iter().map(StatsAccumulator::finish).collect(),
            accel: accel.finish(),
            force: force.finish(),
            torque: torque.finish(),
        })
    }

    /// Z-scores the graph's mesh/object node rows and every edge relation in
    /// place. World node rows are one-hot selectors and stay raw.
    pub fn normalize_graph(&self, g: &mut HeteroGraph) -> Result<()> {
        self.node.normalize_rows(&mut g.mesh_nodes)?;
        self.node.normalize_rows(&mut g.object_nodes)?;
        for (k, r) in Relation::ALL.iter().enumerate() {
            self.edge[k].normalize_rows(g.edge_features_mut(*r))?;
        }
        Ok(())
    }

    /// Normalizes the sample's graph and its targets in place.
    pub fn normalize_sample(&self, s: &mut TrainSample) -> Result<()> {
        self.normalize_graph(&mut s.graph)?;
        self.accel.normalize_rows(&mut s.accel)?;
        self.force.normalize_rows(&mut s.force)?;
        self.torque.normalize_rows(&mut s.torque)?;
        Ok(())
    }

    /// Maps normalized model outputs back to raw units in place.
    pub fn denormalize_predictions(
        &self,
        accel: &mut Tensor<f32>,
        force: &mut Tensor<f32>,
        torque: &mut Tensor<f32>,
    ) -> Result<()> {
        self.accel.denormalize_rows(accel)?;
        self.force.denormalize_rows(force)?;
        self.torque.denormalize_rows(torque)?;
        Ok(())
    }

    /// Serializes every group as `norm.<group>.mean` / `.std` tensor blocks
    /// for embedding in checkpoints.
    pub fn to_blocks(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        let mut push = |name: &str, g: &GroupStats| {
            let (m, s) = g.to_tensors();
            out.push((format!("norm.{name}.mean"), m));
            out.push((format!("norm.{name}.std"), s));
        };
        push("node", &self.node);
        for (k, r) in Relation::ALL.iter().enumerate() {
            push(&format!("edge.{}", r.name()), &self.edge[k]);
        }
        push("accel", &self.accel);
        push("force", &self.force);
        push("torque", &self.torque);
        out
    }

    pub fn from_blocks(blocks: &[(String, Tensor<f32>)]) -> Result<Self> {
        let find = |name: String| -> Result<&Tensor<f32>> {
            blocks
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or(Error::Format(format!("checkpoint missing block {name}")))
        };
        let group = |name: &str| -> Result<GroupStats> {
            GroupStats::from_tensors(
                find(format!("norm.{name}.mean"))?,
                find(format!("norm.{name}.std"))?,
            )
        };
        Ok(Self {
            node: group("node")?,
            edge: Relation::ALL
                .iter()
                .map(|r| group(&format!("edge.{}", r.name())))
                .collect::<Result<Vec<_>>>()?,
            accel: group("accel")?,
            force: group("force")?,
            torque: group("torque")?,
        })
    }
}

// ---------------------------------------------------------------------------
// Data augmentation
// ---------------------------------------------------------------------------

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniformly distributed random rotation: a 4-component standard Gaussian
/// normalized onto the unit quaternion sphere.
pub fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    loop {
        let q = Quaternion::new(gaussian(rng), gaussian(rng), gaussian(rng), gaussian(rng));
        if q.norm() > 1e-6 {
            return UnitQuaternion::from_quaternion(q);
        }
    }
}

fn rotate_pose(p: &Pose, r: &UnitQuaternion<f64>) -> Pose {
    Pose::new(r * p.position, r * p.orientation)
}

/// Applies one world-frame rotation to every pose, twist, wrench, and
/// observation of a record. Used to augment training data; the result is a
/// physically consistent record of the rotated scene.
pub fn rotate_record(record: &Record, r: &UnitQuaternion<f64>) -> Record {
    let rot_v = |v: &Vector3<f64>| r * v;
    Record {
        episode: record.episode,
        step: record.step,
        poses: record.poses.iter().map(|p| rotate_pose(p, r)).collect(),
        twist: crate::state::Twist {
            linear: rot_v(&record.twist.linear),
            angular: rot_v(&record.twist.angular),
        },
        action: Action {
            force: rot_v(&record.action.force),
            torque: rot_v(&record.action.torque),
        },
        observation: crate::state::Observation {
            force: rot_v(&record.observation.force),
            torque: rot_v(&record.observation.torque),
        },
        next_pose: rotate_pose(&record.next_pose, r),
        next_twist: crate::state::Twist {
            linear: rot_v(&record.next_twist.linear),
            angular: rot_v(&record.next_twist.angular),
        },
    }
}

/// Adds i.i.d. Gaussian noise to every vertex of every frame. Draw order is
/// frames outer, vertices inner, components x/y/z, so a seeded generator
/// reproduces the corruption exactly. `sigma == 0` draws nothing.
pub fn corrupt_positions(frames: &mut [Vec<Vector3<f64>>], sigma: f64, rng: &mut impl Rng) {
    if sigma == 0.0 {
        return;
    }
    for frame in frames {
        for v in frame.iter_mut() {
            v.x += sigma * gaussian(rng);
            v.y += sigma * gaussian(rng);
            v.z += sigma * gaussian(rng);
        }
    }
}

fn rotate_contact_pair(p: &ContactPair, r: &UnitQuaternion<f64>) -> ContactPair {
    ContactPair {
        sender_face: p.sender_face,
        receiver_face: p.receiver_face,
        origin: r * p.origin,
        rel_s: r * p.rel_s,
        rel_r: r * p.rel_r,
        n_s: r * p.n_s,
        n_r: r * p.n_r,
        distance: p.distance,
    }
}

// ---------------------------------------------------------------------------
// Sample assembly
// ---------------------------------------------------------------------------

/// One training example: the input graph plus raw-unit regression targets.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub graph: HeteroGraph,
    /// `[n_dynamic_vertices x 3]` discrete vertex accelerations, rows in
    /// mesh-node order over dynamic vertices.
    pub accel: Tensor<f64>,
    /// `[1 x 3]` sensed force target.
    pub force: Tensor<f64>,
    /// `[1 x 3]` sensed torque target.
    pub torque: Tensor<f64>,
}

/// Augmentation applied while assembling a sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleOptions {
    /// World-frame rotation applied to all inputs and targets.
    pub rotation: Option<UnitQuaternion<f64>>,
    /// Vertex position noise deviation, applied to input frames only;
    /// targets always come from clean positions.
    pub noise_sigma: f64,
}

/// Detects contact pairs for every record at its newest (clean) frame.
/// Detection runs once here; augmented sample builds reuse these pairs, so
/// vertex noise never flips which faces exchange messages.
pub fn precompute_contacts(
    scene: &Scene,
    dataset: &Dataset,
    radius: f64,
) -> Result<Vec<Vec<ContactPair>>> {
    let tool = scene.tool()?;
    let mut out = Vec::with_capacity(dataset.records.len());
    for record in &dataset.records {
        let poses: Vec<Pose> = (0..scene.n_bodies())
            .map(|b| {
                if b == tool {
                    record.poses[0]
                } else {
                    scene.rest_poses()[b]
                }
            })
            .collect();
        out.push(detect_collisions(scene, &poses, radius)?);
    }
    Ok(out)
}

/// Assembles the input graph and regression targets for one record.
///
/// Rotation is applied consistently to input positions, contact geometry,
/// the action, and all targets. Noise is drawn in the unrotated frame (an
/// isotropic Gaussian, so the distribution is unchanged) and perturbs input
/// frames only.
pub fn build_sample(
    scene: &Scene,
    record: &Record,
    contacts: &[ContactPair],
    opts: SampleOptions,
    rng: &mut impl Rng,
) -> Result<TrainSample> {
    let tool = scene.tool()?;
    let h = record.h();
    if h == 0 {
        return Err(Error::Config(
            "records need at least one history frame for acceleration targets".into(),
        ));
    }
    if !(opts.noise_sigma >= 0.0) || !opts.noise_sigma.is_finite() {
        return Err(Error::Config(format!(
            "noise deviation must be finite and non-negative, got {}",
            opts.noise_sigma
        )));
    }
    let n_bodies = scene.n_bodies();

    // Clean world-frame frames, newest first.
    let mut frame_verts: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(h + 1);
    let mut frame_coms: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(h + 1);
    for k in 0..=h {
        let poses: Vec<Pose> = (0..n_bodies)
            .map(|b| {
                if b == tool {
                    record.poses[k]
                } else {
                    scene.rest_poses()[b]
                }
            })
            .collect();
        frame_verts.push(scene.world_vertices(&poses));
        frame_coms.push(
            (0..n_bodies)
                .map(|b| poses[b].transform_point(&scene.body(b).com))
                .collect(),
        );
    }

    // Targets from clean positions (rotated if requested).
    let rot = opts.rotation.unwrap_or_else(UnitQuaternion::identity);
    let body_frame = scene.body_frame_vertices();
    let mut accel_rows: Vec<f64> = Vec::new();
    let mut n_dynamic = 0;
    for v in 0..scene.n_vertices() {
        if !scene.body(scene.body_of_vertex(v)).dynamic {
            continue;
        }
        let p_next = rot * record.next_pose.transform_point(&body_frame[v]);
        let p_t = rot * frame_verts[0][v];
        let p_prev = rot * frame_verts[1][v];
        let a = p_next - 2.0 * p_t + p_prev;
        accel_rows.extend_from_slice(&[a.x, a.y, a.z]);
        n_dynamic += 1;
    }
    let f = rot * record.observation.force;
    let t = rot * record.observation.torque;

    // Inputs: noise first (clean copies already consumed), then rotation.
    corrupt_positions(&mut frame_verts, opts.noise_sigma, rng);
    let action = Action {
        force: rot * record.action.force,
        torque: rot * record.action.torque,
    };
    let rotated_contacts: Vec<ContactPair>;
    let pairs: &[ContactPair] = if opts.rotation.is_some() {
        for frame in &mut frame_verts {
            for v in frame.iter_mut() {
                *v = rot * *v;
            }
        }
        for frame in &mut frame_coms {
            for c in frame.iter_mut() {
                *c = rot * *c;
            }
        }
        rotated_contacts = contacts
            .iter()
            .map(|p| rotate_contact_pair(p, &rot))
            .collect();
        &rotated_contacts
    } else {
        contacts
    };

    let graph = build_graph_from_frames(scene, &frame_verts, &frame_coms, &action, pairs)?;
    Ok(TrainSample {
        graph,
        accel: Tensor::from_vec(n_dynamic, 3, accel_rows),
        force: Tensor::from_vec(1, 3, vec![f.x, f.y, f.z]),
        torque: Tensor::from_vec(1, 3, vec![t.x, t.y, t.z]),
    })
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Weights of the three mean-squared-error terms. Position error (via the
/// acceleration identity above) carries weight 1; the sensed force and
/// torque terms carry 0.1 each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub position: f64,
    pub force: f64,
    pub torque: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            position: 1.0,
            force: 0.1,
            torque: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("position", self.position),
            ("force", self.force),
            ("torque", self.torque),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {w}")));
            }
        }
        Ok(())
    }
}

/// Scalar training loss: weighted sum of the three MSE terms, all computed
/// in normalized units.
pub fn loss<S: Scalar>(
    tape: &mut Tape<S>,
    out: &EpdOutput,
    accel_target: Tensor<S>,
    force_target: Tensor<S>,
    torque_target: Tensor<S>,
    w: &LossWeights,
) -> Result<NodeId> {
    let la = tape.mse_loss(out.accel, accel_target)?;
    let lf = tape.mse_loss(out.force, force_target)?;
    let lt = tape.mse_loss(out.torque, torque_target)?;
    tape.weighted_sum(&[
        (la, S::from_f64(w.position)),
        (lf, S::from_f64(w.force)),
        (lt, S::from_f64(w.torque)),
    ])
}

// ---------------------------------------------------------------------------
// Train/validation split
// ---------------------------------------------------------------------------

/// Record indices split into (train, validation) by episode id: every
/// twentieth episode validates, the rest train.
pub fn split_records(dataset: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, r) in dataset.records.iter().enumerate() {
        if r.episode % VAL_EPISODE_MODULO == VAL_EPISODE_MODULO - 1 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epd: EpdConfig,
    /// Total optimization steps; also the learning-rate schedule horizon.
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Vertex position noise deviation in meters.
    pub noise_sigma: f64,
    /// Random world rotation per sample.
    pub augment: bool,
    pub weights: LossWeights,
    /// Contact detection radius used when assembling graphs.
    pub contact_radius: f64,
    /// Validate every this many steps (0 disables periodic validation; a
    /// final validation still runs when a validation split exists).
    pub val_every: u64,
    /// Cap on validation records scored per evaluation.
    pub val_max_records: usize,
    /// Write a checkpoint every this many steps (0 = only the final one).
    pub checkpoint_every: u64,
    /// Directory receiving `step_NNNNNNN.ckpt` files; None disables
    /// checkpointing entirely.
    pub checkpoint_dir: Option<PathBuf>,
    /// Sample batches randomly; false cycles the training set in order.
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epd: EpdConfig::default(),
            steps: 20_000,
            batch_size: 128,
            seed: 0,
            noise_sigma: 1e-4,
            augment: true,
            weights: LossWeights::default(),
            contact_radius: crate::oracle::CONTACT_RADIUS,
            val_every: 500,
            val_max_records: 512,
            checkpoint_every: 1000,
            checkpoint_dir: None,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.epd.history != dataset.h {
            return Err(Error::Config(format!(
                "model history {} != dataset history {}",
                self.epd.history, dataset.h
            )));
        }
        if !(self.contact_radius > 0.0) {
            return Err(Error::Config("contact radius must be positive".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise deviation {} out of range",
                self.noise_sigma
            )));
        }
        if dataset.records.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        self.weights.validate()
    }
}

/// One metrics-log entry. `step` counts completed optimization steps;
/// `train_loss` is the batch loss before that step's update.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

impl LogRow {
    pub fn to_line(&self) -> String {
        match self.val_loss {
            Some(v) => format!(
                "step={} train_loss={:.6e} val_loss={:.6e} lr={:.6e}",
                self.step, self.train_loss, v, self.lr
            ),
            None => format!(
                "step={} train_loss={:.6e} val_loss=- lr={:.6e}",
                self.step, self.train_loss, self.lr
            ),
        }
    }
}

/// Appends log rows to a text file, one row per line.
pub fn append_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    for r in rows {
        writeln!(f, "{}", r.to_line())?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: EpdParams<f32>,
    pub norm: NormStats,
    pub log: Vec<LogRow>,
}

/// Deterministic per-step generator: batch choice, augmentation rotations,
/// and noise at step `k` depend only on `(seed, k)`, so a resumed run
/// replays the exact stream.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Divergence guard: a non-finite batch loss aborts the run (the last
/// checkpoint on disk survives).
fn check_finite_loss(loss_value: f64, step: u64) -> Result<()> {
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "training diverged: loss {loss_value} at step {}; last checkpoint kept",
            step + 1
        )));
    }
    Ok(())
}

fn assemble_batch(
    scene: &Scene,
    dataset: &Dataset,
    contacts: &[Vec<ContactPair>],
    norm: &NormStats,
    indices: &[usize],
    augment: bool,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<(GraphBatch, Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    let mut graphs = Vec::with_capacity(indices.len());
    let mut accel = Vec::new();
    let mut force = Vec::with_capacity(indices.len() * 3);
    let mut torque = Vec::with_capacity(indices.len() * 3);
    for &i in indices {
        let opts = SampleOptions {
            rotation: augment.then(|| random_rotation(rng)),
            noise_sigma,
        };
        let mut s = build_sample(scene, &dataset.records[i], &contacts[i], opts, rng)?;
        norm.normalize_sample(&mut s)?;
        accel.extend_from_slice(s.accel.data());
        force.extend_from_slice(s.force.data());
        torque.extend_from_slice(s.torque.data());
        graphs.push(s.graph);
    }
    let batch = GraphBatch::merge(&graphs)?;
    let n_acc = accel.len() / 3;
    if n_acc != batch.dynamic_rows.len() {
        return Err(Error::Shape(format!(
            "{} acceleration targets vs {} dynamic rows",
            n_acc,
            batch.dynamic_rows.len()
        )));
    }
    Ok((
        batch,
        Tensor::from_vec(n_acc, 3, accel),
        Tensor::from_vec(indices.len(), 3, force),
        Tensor::from_vec(indices.len(), 3, torque),
    ))
}

/// Mean validation loss over up to `max_records` clean samples, computed in
/// normalized units with the same weights as training. Chunks are averaged
/// weighted by record count.
fn validation_loss(
    scene: &Scene,
    dataset: &Dataset,
    contacts: &[Vec<ContactPair>],
    norm: &NormStats,
    params: &EpdParams<f32>,
    val_idx: &[usize],
    max_records: usize,
    batch_size: usize,
    weights: &LossWeights,
) -> Result<f64> {
    let take = val_idx.len().min(max_records);
    let mut total = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: clean samples draw nothing
    for chunk in val_idx[..take].chunks(batch_size) {
        let (batch, at, ft, tt) =
            assemble_batch(scene, dataset, contacts, norm, chunk, false, 0.0, &mut rng)?;
        let (pa, pf, pt) = epd::predict(params, &batch)?;
        let mse = |p: &Tensor<f32>, t: &Tensor<f64>| -> f64 {
            let n = p.data().len();
            let mut acc = 0.0;
            for (a, b) in p.data().iter().zip(t.data()) {
                let d = *a as f64 - b;
                acc += d * d;
            }
            acc / n as f64
        };
        let l = weights.position * mse(&pa, &at)
            + weights.force * mse(&pf, &ft)
            + weights.torque * mse(&pt, &tt);
        if !l.is_finite() {
            return Err(Error::Numeric("non-finite validation loss".into()));
        }
        total += l * chunk.len() as f64;
    }
    Ok(total / take as f64)
}

fn checkpoint_file(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step_{step:07}.ckpt"))
}

/// Writes a checkpoint carrying parameters, normalization statistics,
/// optimizer moments, and the run position, so training can resume exactly.
pub fn write_training_checkpoint(
    path: &Path,
    params: &EpdParams<f32>,
    norm: &NormStats,
    adam: &AdamState<f32>,
    step: u64,
    total_steps: u64,
    seed: u64,
) -> Result<()> {
    let mut blocks = norm.to_blocks();
    let (m, v) = adam.moments();
    if !m.is_empty() {
        let mut names = Vec::new();
        params.visit(&mut |n, _| names.push(n));
        if names.len() != m.len() {
            return Err(Error::Format(
                "optimizer moment count does not match parameter blocks".into(),
            ));
        }
        for (name, t) in names.iter().zip(m) {
            blocks.push((format!("opt.m.{name}"), t.clone()));
        }
        for (name, t) in names.iter().zip(v) {
            blocks.push((format!("opt.v.{name}"), t.clone()));
        }
    }
    let header = vec![
        ("train_step".to_string(), step.to_string()),
        ("train_total".to_string(), total_steps.to_string()),
        ("train_seed".to_string(), seed.to_string()),
        ("opt_step".to_string(), adam.step_count().to_string()),
    ];
    let refs: Vec<(String, &Tensor<f32>)> =
        blocks.iter().map(|(n, t)| (n.clone(), t)).collect();
    epd::save_checkpoint(path, params, &header, &refs)
}

/// Trains a fresh model on the dataset. Parameters are initialized from
/// `seed`; see [`TrainConfig`] for the loop's knobs.
pub fn train(scene: &Scene, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = EpdParams::init(cfg.epd, &mut rng);
    run_loop(scene, dataset, cfg, params, AdamState::new(), None, 0)
}

/// Resumes training from a checkpoint written by this module. The config
/// must match the original run (model shape, total steps, seed), so the
/// continued run reproduces exactly what an uninterrupted one would have.
pub fn resume(
    scene: &Scene,
    dataset: &Dataset,
    cfg: &TrainConfig,
    checkpoint: &Path,
) -> Result<TrainOutcome> {
    cfg.validate(dataset)?;
    let loaded = epd::load_checkpoint(checkpoint)?;
    if loaded.params.config != cfg.epd {
        return Err(Error::Config(format!(
            "checkpoint model shape {:?} != configured {:?}",
            loaded.params.config, cfg.epd
        )));
    }
    let header = |key: &str| -> Result<u64> {
        loaded
            .header
            .iter()
            .find(|(k, _)| k == key)
            .ok_or(Error::Format(format!("checkpoint missing header {key}")))?
            .1
            .parse()
            .map_err(|_| Error::Format(format!("checkpoint header {key} is not a number")))
    };
    let start = header("train_step")?;
    let total = header("train_total")?;
    let seed = header("train_seed")?;
    let opt_step = header("opt_step")?;
    if total != cfg.steps || seed != cfg.seed {
        return Err(Error::Config(format!(
            "checkpoint ran with steps={total} seed={seed}, config has steps={} seed={}",
            cfg.steps, cfg.seed
        )));
    }
    if start >= cfg.steps {
        return Err(Error::Config(format!(
            "checkpoint already at step {start} of {}",
            cfg.steps
        )));
    }
    let norm = NormStats::from_blocks(&loaded.extra_blocks)?;
    let adam = if opt_step > 0 {
        let mut names = Vec::new();
        loaded.params.visit(&mut |n, _| names.push(n));
        let find = |name: String| -> Result<Tensor<f32>> {
            loaded
                .extra_blocks
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or(Error::Format(format!("checkpoint missing block {name}")))
        };
        let m = names
            .iter()
            .map(|n| find(format!("opt.m.{n}")))
            .collect::<Result<Vec<_>>>()?;
        let v = names
            .iter()
            .map(|n| find(format!("opt.v.{n}")))
            .collect::<Result<Vec<_>>>()?;
        AdamState::from_parts(m, v, opt_step)
    } else {
        AdamState::new()
    };
    run_loop(scene, dataset, cfg, loaded.params, adam, Some(norm), start)
}

fn run_loop(
    scene: &Scene,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut params: EpdParams<f32>,
    mut adam: AdamState<f32>,
    norm: Option<NormStats>,
    start_step: u64,
) -> Result<TrainOutcome> {
    if dataset.scene_hash != scene.content_hash() {
        return Err(Error::Config(format!(
            "dataset was generated for scene {:016x}, training scene is {:016x}",
            dataset.scene_hash,
            scene.content_hash()
        )));
    }
    let contacts = precompute_contacts(scene, dataset, cfg.contact_radius)?;
    let (train_idx, val_idx) = split_records(dataset);
    if train_idx.is_empty() {
        return Err(Error::Config(
            "training split is empty (every episode validates)".into(),
        ));
    }
    let norm = match norm {
        Some(n) => n,
        None => NormStats::fit(scene, dataset, &contacts, &train_idx)?,
    };
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut log = Vec::new();
    for step in start_step..cfg.steps {
        let mut rng = step_rng(cfg.seed, step);
        let indices: Vec<usize> = if cfg.shuffle {
            (0..cfg.batch_size)
                .map(|_| train_idx[rng.random_range(0..train_idx.len())])
                .collect()
        } else {
            (0..cfg.batch_size)
                .map(|j| train_idx[(step as usize * cfg.batch_size + j) % train_idx.len()])
                .collect()
        };
        let (batch, at, ft, tt) = assemble_batch(
            scene,
            dataset,
            &contacts,
            &norm,
            &indices,
            cfg.augment,
            cfg.noise_sigma,
            &mut rng,
        )?;

        let mut tape: Tape<f32> = Tape::new();
        let ids = params.insert(&mut tape);
        let (out, _) = epd::forward(&mut tape, &ids, &params.config, &batch)?;
        let l = loss(&mut tape, &out, at.cast(), ft.cast(), tt.cast(), &cfg.weights)?;
        let train_loss = tape.value(l).item() as f64;
        check_finite_loss(train_loss, step)?;
        let mut grads = tape.backward(l)?;
        let grad_ts: Vec<Option<Tensor<f32>>> =
            ids.flat_ids().iter().map(|&id| grads.take(id)).collect();

        let lr = lr_schedule(step, cfg.steps);
        let mut owned: Vec<(String, Tensor<f32>)> = Vec::new();
        params.visit_mut(&mut |name, t| {
            owned.push((name, std::mem::replace(t, Tensor::zeros(0, 0))));
        });
        {
            let mut blocks: Vec<(String, &mut Tensor<f32>, Option<&Tensor<f32>>)> = owned
                .iter_mut()
                .zip(&grad_ts)
                .map(|((n, t), g)| (n.clone(), t, g.as_ref()))
                .collect();
            adam.step(lr, &mut blocks)?;
        }
        let mut blocks_back = owned.into_iter();
        params.visit_mut(&mut |_, t| {
            *t = blocks_back.next().expect("parameter walk length changed").1;
        });

        let done = step + 1;
        let val_due = !val_idx.is_empty()
            && ((cfg.val_every > 0 && done % cfg.val_every == 0) || done == cfg.steps);
        let val_loss = if val_due {
            Some(validation_loss(
                scene,
                dataset,
                &contacts,
                &norm,
                &params,
                &val_idx,
                cfg.val_max_records,
                cfg.batch_size,
                &cfg.weights,
            )?)
        } else {
            None
        };
        log.push(LogRow {
            step: done,
            train_loss,
            val_loss,
            lr,
        });

        if let Some(dir) = &cfg.checkpoint_dir {
            if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.steps
            {
                write_training_checkpoint(
                    &checkpoint_file(dir, done),
                    &params,
                    &norm,
                    &adam,
                    done,
                    cfg.steps,
                    cfg.seed,
                )?;
            }
        }
    }
    Ok(TrainOutcome { params, norm, log })
}
