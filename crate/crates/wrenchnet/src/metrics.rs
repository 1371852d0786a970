//! Rollout evaluation: autoregressive model rollouts, absolute and relative
//! multi-step RMSE for position and rotation, and one-step force/torque
//! RMSE, with a text report mirroring those six columns.
//!
//! The relative variants divide by the error of a predictor that never moves
//! (frozen at the initial state), so a frozen prediction scores exactly 1.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{quantize_state, Dataset};
use crate::epd::{self, EpdParams};
use crate::geometry::Scene;
use crate::graph::{self, GraphBatch};
use crate::oracle::{self, quantize_observation, OracleConfig};
use crate::postprocess;
use crate::state::{Action, Observation, Pose, State, StateHistory};
use crate::training::NormStats;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Dynamics models
// ---------------------------------------------------------------------------

/// Anything that advances the tool by one control step: the learned network
/// or the reference simulator.
pub trait DynamicsModel {
    fn step(&self, history: &StateHistory, action: &Action) -> Result<(State, Observation)>;
}

/// The reference simulator as a model. Outputs are quantized to the f32
/// storage grid exactly like episode generation, so a recorded episode
/// replays through this model bit-identically.
#[derive(Debug, Clone)]
pub struct OracleModel {
    pub scene: Scene,
    pub cfg: OracleConfig,
}

impl DynamicsModel for OracleModel {
    fn step(&self, history: &StateHistory, action: &Action) -> Result<(State, Observation)> {
        let (next, obs) = oracle::step(&self.scene, history.newest(), action, &self.cfg)?;
        Ok((quantize_state(&next), quantize_observation(&obs)))
    }
}

/// The learned network as a model: graph assembly, normalized forward pass,
/// denormalization, and rigid-pose recovery from the predicted vertex cloud.
#[derive(Debug, Clone)]
pub struct EpdModel {
    pub scene: Scene,
    pub params: EpdParams<f32>,
    pub norm: NormStats,
    /// Contact detection radius for graph assembly.
    pub radius: f64,
    /// Control step duration, for velocity reconstruction.
    pub dt: f64,
}

impl EpdModel {
    pub fn new(
        scene: Scene,
        params: EpdParams<f32>,
        norm: NormStats,
        radius: f64,
        dt: f64,
    ) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::Config("detection radius must be positive".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config("step duration must be positive".into()));
        }
        scene.tool()?;
        Ok(Self {
            scene,
            params,
            norm,
            radius,
            dt,
        })
    }

    /// Loads parameters and normalization statistics from a training
    /// checkpoint.
    pub fn from_checkpoint(scene: Scene, path: &Path, radius: f64, dt: f64) -> Result<Self> {
        let loaded = epd::load_checkpoint(path)?;
        let norm = NormStats::from_blocks(&loaded.extra_blocks)?;
        Self::new(scene, loaded.params, norm, radius, dt)
    }
}

fn state_is_finite(s: &State) -> bool {
    let q = s.pose.orientation;
    s.pose.position.iter().all(|x| x.is_finite())
        && [q.w, q.i, q.j, q.k].iter().all(|x| x.is_finite())
        && s.twist.linear.iter().all(|x| x.is_finite())
        && s.twist.angular.iter().all(|x| x.is_finite())
}

impl DynamicsModel for EpdModel {
    fn step(&self, history: &StateHistory, action: &Action) -> Result<(State, Observation)> {
        let mut g = graph::build_graph(&self.scene, history, action, self.radius)?;
        self.norm.normalize_graph(&mut g)?;
        let batch = GraphBatch::single(g)?;
        let (mut pa, mut pf, mut pt) = epd::predict(&self.params, &batch)?;
        self.norm.denormalize_predictions(&mut pa, &mut pf, &mut pt)?;

        let tool = self.scene.tool()?;
        let body_frame = self.scene.body_frame_vertices();
        let poses = history.poses();
        let mut acc = Vec::new();
        let mut p_t = Vec::new();
        let mut p_prev = Vec::new();
        let mut reference = Vec::new();
        let mut row = 0;
        for v in 0..self.scene.n_vertices() {
            if self.scene.body_of_vertex(v) != tool {
                continue;
            }
            acc.push(Vector3::new(
                pa.row(row)[0] as f64,
                pa.row(row)[1] as f64,
                pa.row(row)[2] as f64,
            ));
            p_t.push(poses[0].transform_point(&body_frame[v]));
            p_prev.push(poses[1].transform_point(&body_frame[v]));
            reference.push(body_frame[v]);
            row += 1;
        }
        let state = postprocess::apply_prediction(
            &acc,
            &p_t,
            &p_prev,
            &reference,
            &history.newest().pose,
            self.dt,
        )?;
        if !state_is_finite(&state) {
            return Err(Error::Numeric("non-finite predicted state".into()));
        }
        let obs = Observation {
            force: Vector3::new(pf.row(0)[0] as f64, pf.row(0)[1] as f64, pf.row(0)[2] as f64),
            torque: Vector3::new(pt.row(0)[0] as f64, pt.row(0)[1] as f64, pt.row(0)[2] as f64),
        };
        if !obs.force.iter().all(|x| x.is_finite()) || !obs.torque.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric("non-finite predicted wrench".into()));
        }
        Ok((state, obs))
    }
}

// ---------------------------------------------------------------------------
// Rollout
// ---------------------------------------------------------------------------

/// Result of an autoregressive rollout: one predicted state and observation
/// per executed action. `truncated` marks a rollout cut short by a
/// non-finite prediction; the completed prefix is kept.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<State>,
    pub observations: Vec<Observation>,
    pub truncated: bool,
}

/// Rolls the model forward by feeding each prediction back as the next
/// input. Numerical failures (non-finite predictions, degenerate pose
/// recovery) truncate the rollout; structural errors propagate.
pub fn rollout_model(
    model: &dyn DynamicsModel,
    history: &StateHistory,
    actions: &[Action],
) -> Result<Rollout> {
    if actions.is_empty() {
        return Err(Error::Config("rollout needs at least one action".into()));
    }
    let mut hist = history.clone();
    let mut states = Vec::with_capacity(actions.len());
    let mut observations = Vec::with_capacity(actions.len());
    let mut truncated = false;
    for action in actions {
        let (state, obs) = match model.step(&hist, action) {
            Ok(out) => out,
            Err(Error::Numeric(_)) | Err(Error::InvalidGeometry(_)) => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if !state_is_finite(&state) {
            truncated = true;
            break;
        }
        hist = hist.advance(state.clone());
        states.push(state);
        observations.push(obs);
    }
    Ok(Rollout {
        states,
        observations,
        truncated,
    })
}

// ---------------------------------------------------------------------------
// Error metrics
// ---------------------------------------------------------------------------

fn check_lengths(pred: usize, truth: usize, t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if pred <= t || truth <= t {
        return Err(Error::Shape(format!(
            "need {} poses (initial + horizon), got {pred} predicted / {truth} true",
            t + 1
        )));
    }
    Ok(())
}

/// Root-mean-square position error over steps `1..=t`; index 0 is the shared
/// initial pose. The relative variant divides by the same error of a
/// predictor frozen at the initial pose, so freezing scores exactly 1.
pub fn rmse_pos(pred: &[Pose], truth: &[Pose], t: usize, relative: bool) -> Result<f64> {
    check_lengths(pred.len(), truth.len(), t)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 1..=t {
        num += (pred[k].position - truth[k].position).norm_squared();
        den += (truth[0].position - truth[k].position).norm_squared();
    }
    if !relative {
        return Ok((num / t as f64).sqrt());
    }
    if den == 0.0 {
        return Err(Error::Numeric(
            "relative error undefined: the true trajectory never moves".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// Rotation angle of `a⁻¹ b` in radians, insensitive to quaternion sign.
///
/// Computed from chordal distances — `|qa − s·qb| = 2 sin(θ/4)` and
/// `|qa + s·qb| = 2 cos(θ/4)` with `s` matching the hemispheres — rather
/// than by forming `a⁻¹ b`, whose floating-point product leaves a ~1e-17
/// vector residue even for bitwise-equal inputs. This way identical
/// orientations give exactly zero and a sign flip on either side returns
/// the bit-identical angle.
pub fn rotation_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let qa = a.quaternion().coords;
    let qb = b.quaternion().coords;
    let s = if qa.dot(&qb) < 0.0 { -1.0 } else { 1.0 };
    let diff = (qa - qb * s).norm();
    let sum = (qa + qb * s).norm();
    4.0 * diff.atan2(sum)
}

/// Root-mean-square rotation error over steps `1..=t`, where each step's
/// error is the relative-rotation angle of `q_t⁻¹ q̂_t`. The relative
/// variant divides by the frozen predictor's error, whose per-step term is
/// the angle of `q_t⁻¹ q_0`.
pub fn rmse_rot(pred: &[Pose], truth: &[Pose], t: usize, relative: bool) -> Result<f64> {
    check_lengths(pred.len(), truth.len(), t)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 1..=t {
        num += rotation_angle(&truth[k].orientation, &pred[k].orientation).powi(2);
        den += rotation_angle(&truth[k].orientation, &truth[0].orientation).powi(2);
    }
    if !relative {
        return Ok((num / t as f64).sqrt());
    }
    if den == 0.0 {
        return Err(Error::Numeric(
            "relative error undefined: the true trajectory never rotates".into(),
        ));
    }
    Ok((num / den).sqrt())
}

/// One-step force and torque RMSE over paired observations, in raw units.
pub fn ft_rmse(pred: &[Observation], truth: &[Observation]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predicted vs {} true observations",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("no observation pairs".into()));
    }
    let n = pred.len() as f64;
    let mut f = 0.0;
    let mut t = 0.0;
    for (p, q) in pred.iter().zip(truth) {
        f += (p.force - q.force).norm_squared();
        t += (p.torque - q.torque).norm_squared();
    }
    Ok(((f / n).sqrt(), (t / n).sqrt()))
}

// ---------------------------------------------------------------------------
// Window sampling and dataset evaluation
// ---------------------------------------------------------------------------

/// Start indices of every run of `t` consecutive records from one episode.
pub fn window_starts(dataset: &Dataset, t: usize) -> Vec<usize> {
    let recs = &dataset.records;
    let mut out = Vec::new();
    if t == 0 {
        return out;
    }
    for start in 0..recs.len().saturating_sub(t - 1) {
        let first = &recs[start];
        let ok = (1..t).all(|k| {
            let r = &recs[start + k];
            r.episode == first.episode && r.step == first.step + k as u32
        });
        if ok {
            out.push(start);
        }
    }
    out
}

/// Samples up to `count` distinct evaluation windows with a seeded
/// generator; errors if the dataset holds none of the requested length.
pub fn sample_windows(dataset: &Dataset, t: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::Config("window count must be positive".into()));
    }
    let mut starts = window_starts(dataset, t);
    if starts.is_empty() {
        return Err(Error::Config(format!(
            "dataset has no window of {t} consecutive steps"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    starts.shuffle(&mut rng);
    starts.truncate(count);
    starts.sort_unstable();
    Ok(starts)
}

/// Aggregate evaluation over fixed-length windows: multi-step position and
/// rotation RMSE (absolute and relative, averaged over windows) plus pooled
/// one-step force/torque RMSE.
///
/// A relative metric is undefined on windows whose true trajectory never
/// moves (or never rotates); such windows are left out of that average,
/// and if no window defines it the field is NaN (printed as "undefined").
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub t: usize,
    pub windows_evaluated: usize,
    pub windows_truncated: usize,
    pub pos_abs: f64,
    pub pos_rel: f64,
    pub rot_abs: f64,
    pub rot_rel: f64,
    pub force_rmse: f64,
    pub torque_rmse: f64,
}

fn fmt_relative(v: f64) -> String {
    if v.is_nan() {
        "undefined".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    /// Text table mirroring the six reported columns.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<34}{}", "metric", "value");
        let _ = writeln!(s, "{:<34}{:.6e}", "position RMSE (m)", self.pos_abs);
        let _ = writeln!(
            s,
            "{:<34}{}",
            "position RMSE (relative)",
            fmt_relative(self.pos_rel)
        );
        let _ = writeln!(s, "{:<34}{:.6e}", "rotation RMSE (rad)", self.rot_abs);
        let _ = writeln!(
            s,
            "{:<34}{}",
            "rotation RMSE (relative)",
            fmt_relative(self.rot_rel)
        );
        let _ = writeln!(s, "{:<34}{:.6e}", "force RMSE (N, one-step)", self.force_rmse);
        let _ = writeln!(
            s,
            "{:<34}{:.6e}",
            "torque RMSE (N*m, one-step)", self.torque_rmse
        );
        let _ = writeln!(
            s,
            "windows: {} evaluated, {} truncated, horizon {}",
            self.windows_evaluated, self.windows_truncated, self.t
        );
        s
    }
}

/// Evaluates a model over the given window start indices. Rollout metrics
/// skip truncated windows (counted in the report); one-step wrench errors
/// come from single steps off the true history, so they are collected even
/// when the rollout diverges.
pub fn evaluate(
    model: &dyn DynamicsModel,
    dataset: &Dataset,
    t: usize,
    windows: &[usize],
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Config("no evaluation windows".into()));
    }
    let mut pos_abs = 0.0;
    let mut rot_abs = 0.0;
    let mut pos_rel = (0.0, 0usize);
    let mut rot_rel = (0.0, 0usize);
    let mut evaluated = 0usize;
    let mut truncated = 0usize;
    let mut pred_obs = Vec::new();
    let mut true_obs = Vec::new();
    // Zero-denominator windows (the truth never moves or rotates) are
    // dropped from that relative average only.
    let add_rel = |acc: &mut (f64, usize), r: Result<f64>| -> Result<()> {
        match r {
            Ok(v) => {
                acc.0 += v;
                acc.1 += 1;
                Ok(())
            }
            Err(Error::Numeric(_)) => Ok(()),
            Err(e) => Err(e),
        }
    };

    for &start in windows {
        if start + t > dataset.records.len() {
            return Err(Error::Config(format!(
                "window at {start} of length {t} leaves the dataset"
            )));
        }
        let recs = &dataset.records[start..start + t];
        let actions: Vec<Action> = recs.iter().map(|r| r.action).collect();

        for r in recs {
            match model.step(&r.history()?, &r.action) {
                Ok((_, obs)) => {
                    pred_obs.push(obs);
                    true_obs.push(r.observation);
                }
                Err(Error::Numeric(_)) | Err(Error::InvalidGeometry(_)) => {}
                Err(e) => return Err(e),
            }
        }

        let ro = rollout_model(model, &recs[0].history()?, &actions)?;
        if ro.truncated {
            truncated += 1;
            continue;
        }
        let mut truth = Vec::with_capacity(t + 1);
        let mut pred = Vec::with_capacity(t + 1);
        truth.push(recs[0].poses[0]);
        pred.push(recs[0].poses[0]);
        for k in 0..t {
            truth.push(recs[k].next_pose);
            pred.push(ro.states[k].pose);
        }
        pos_abs += rmse_pos(&pred, &truth, t, false)?;
        rot_abs += rmse_rot(&pred, &truth, t, false)?;
        add_rel(&mut pos_rel, rmse_pos(&pred, &truth, t, true))?;
        add_rel(&mut rot_rel, rmse_rot(&pred, &truth, t, true))?;
        evaluated += 1;
    }

    if evaluated == 0 {
        return Err(Error::Numeric(
            "every evaluation window truncated; no rollout metrics".into(),
        ));
    }
    let (force_rmse, torque_rmse) = ft_rmse(&pred_obs, &true_obs)?;
    let mean_rel = |acc: (f64, usize)| -> f64 {
        if acc.1 == 0 {
            f64::NAN
        } else {
            acc.0 / acc.1 as f64
        }
    };
    let n = evaluated as f64;
    Ok(EvalReport {
        t,
        windows_evaluated: evaluated,
        windows_truncated: truncated,
        pos_abs: pos_abs / n,
        pos_rel: mean_rel(pos_rel),
        rot_abs: rot_abs / n,
        rot_rel: mean_rel(rot_rel),
        force_rmse,
        torque_rmse,
    })
}

/// Samples windows with a seed and evaluates; the default horizon used by
/// the command line is 100 steps.
pub fn evaluate_sampled(
    model: &dyn DynamicsModel,
    dataset: &Dataset,
    t: usize,
    count: usize,
    seed: u64,
) -> Result<EvalReport> {
    let windows = sample_windows(dataset, t, count, seed)?;
    evaluate(model, dataset, t, &windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;
    use crate::epd::EpdConfig;
    use crate::geometry::{BodySpec, TriMesh};
    use crate::oracle::{self, EpisodeConfig, CONTACT_RADIUS};
    use crate::state::Twist;
    use crate::training;
    use nalgebra::{Matrix3, Quaternion};
    use std::cell::Cell;

    fn tetra_mesh() -> TriMesh {
        TriMesh::new(
            vec![
                Vector3::new(0.03, 0.01, -0.02),
                Vector3::new(-0.02, 0.04, 0.015),
                Vector3::new(-0.015, -0.03, 0.025),
                Vector3::new(0.01, -0.01, 0.05),
            ],
            vec![[0, 2, 1], [0, 3, 2], [0, 1, 3], [1, 2, 3]],
        )
        .unwrap()
    }

    fn free_scene() -> Scene {
        let tool = BodySpec {
            name: "tool".into(),
            meshes: vec![tetra_mesh()],
            mass: 0.5,
            friction: 0.4,
            dynamic: true,
            com: Vector3::new(0.002, 0.001, 0.015),
            inertia: Matrix3::from_diagonal(&Vector3::new(1e-3, 2e-3, 3e-3)),
            tip: Vector3::zeros(),
        };
        Scene::new(vec![tool], vec![Pose::identity()]).unwrap()
    }

    fn gen_dataset(scene: &Scene, episodes: u32, steps: usize, h: usize) -> Dataset {
        let ocfg = OracleConfig::default();
        let ecfg = EpisodeConfig::default();
        let mut records = Vec::new();
        for e in 0..episodes {
            records.extend(
                oracle::generate_episode(scene, &ocfg, &ecfg, h, e, 1000 + e as u64, steps)
                    .unwrap(),
            );
        }
        Dataset {
            h,
            dt: ocfg.dt,
            scene_hash: scene.content_hash(),
            records,
        }
    }

    fn pose_at(x: f64, y: f64, z: f64) -> Pose {
        Pose::new(Vector3::new(x, y, z), UnitQuaternion::identity())
    }

    // -- hand-valued error metrics -------------------------------------------

    #[test]
    fn position_error_matches_hand_arithmetic() {
        let truth = vec![pose_at(0.0, 0.0, 0.0), pose_at(1.0, 0.0, 0.0), pose_at(1.0, 1.0, 0.0)];
        // Step errors of norm 1 and 2.
        let pred = vec![pose_at(0.0, 0.0, 0.0), pose_at(1.0, 1.0, 0.0), pose_at(1.0, 1.0, 2.0)];
        let abs = rmse_pos(&pred, &truth, 2, false).unwrap();
        assert!((abs - (5.0f64 / 2.0).sqrt()).abs() < 1e-15, "abs {abs}");
        // Zero-motion squared errors: 1 and 2, so relative = sqrt(5/3).
        let rel = rmse_pos(&pred, &truth, 2, true).unwrap();
        assert!((rel - (5.0f64 / 3.0).sqrt()).abs() < 1e-15, "rel {rel}");
        // Perfect prediction.
        assert_eq!(rmse_pos(&truth, &truth, 2, false).unwrap(), 0.0);
        assert_eq!(rmse_pos(&truth, &truth, 2, true).unwrap(), 0.0);
    }

    #[test]
    fn frozen_predictor_scores_exactly_one() {
        let mut truth = vec![pose_at(0.0, 0.0, 0.0)];
        for k in 1..6 {
            truth.push(Pose::new(
                Vector3::new(0.3 * k as f64, -0.1 * k as f64, 0.01 * (k * k) as f64),
                UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.17 * k as f64),
            ));
        }
        let frozen = vec![truth[0]; truth.len()];
        assert_eq!(rmse_pos(&frozen, &truth, 5, true).unwrap(), 1.0);
        assert_eq!(rmse_rot(&frozen, &truth, 5, true).unwrap(), 1.0);
    }

    #[test]
    fn motionless_truth_makes_relative_error_undefined() {
        let truth = vec![pose_at(1.0, 2.0, 3.0); 4];
        let pred = vec![pose_at(1.0, 2.5, 3.0); 4];
        assert!(matches!(rmse_pos(&pred, &truth, 3, true), Err(Error::Numeric(_))));
        assert!(matches!(rmse_rot(&pred, &truth, 3, true), Err(Error::Numeric(_))));
        // Absolute errors stay well defined.
        assert!(rmse_pos(&pred, &truth, 3, false).unwrap() > 0.0);
        assert_eq!(rmse_rot(&pred, &truth, 3, false).unwrap(), 0.0);
    }

    #[test]
    fn rotation_error_hits_quarter_turn() {
        let turn = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let truth = vec![Pose::identity(); 4];
        let pred: Vec<Pose> = (0..4)
            .map(|k| {
                if k == 0 {
                    Pose::identity()
                } else {
                    Pose::new(Vector3::zeros(), turn)
                }
            })
            .collect();
        let abs = rmse_rot(&pred, &truth, 3, false).unwrap();
        assert!((abs - std::f64::consts::FRAC_PI_2).abs() < 1e-12, "{abs}");
    }

    #[test]
    fn rotation_error_ignores_quaternion_sign() {
        let q = UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(0.3, -0.5, 0.8)),
            1.1,
        );
        let flipped = UnitQuaternion::new_unchecked(Quaternion::new(
            -q.w, -q.i, -q.j, -q.k,
        ));
        let truth = vec![Pose::identity(), Pose::new(Vector3::zeros(), q)];
        let a = vec![Pose::identity(), Pose::new(Vector3::zeros(), q)];
        let b = vec![Pose::identity(), Pose::new(Vector3::zeros(), flipped)];
        assert_eq!(
            rmse_rot(&a, &truth, 1, false).unwrap(),
            rmse_rot(&b, &truth, 1, false).unwrap()
        );
        assert_eq!(rmse_rot(&b, &truth, 1, false).unwrap(), 0.0);
    }

    #[test]
    fn relative_errors_are_translation_invariant() {
        let truth = vec![pose_at(0.0, 0.0, 0.0), pose_at(0.1, 0.2, -0.3), pose_at(0.5, 0.1, 0.0)];
        let pred = vec![pose_at(0.0, 0.0, 0.0), pose_at(0.15, 0.18, -0.3), pose_at(0.4, 0.2, 0.1)];
        let base = rmse_pos(&pred, &truth, 2, true).unwrap();
        let shift = Vector3::new(412.0, -77.0, 3.5);
        let moved = |ps: &[Pose]| -> Vec<Pose> {
            ps.iter()
                .map(|p| Pose::new(p.position + shift, p.orientation))
                .collect()
        };
        let shifted = rmse_pos(&moved(&pred), &moved(&truth), 2, true).unwrap();
        assert!((base - shifted).abs() < 1e-12, "{base} vs {shifted}");
    }

    #[test]
    fn constant_per_step_error_scales_absolute_rmse() {
        let truth = vec![pose_at(0.0, 0.0, 0.0), pose_at(0.1, 0.0, 0.0), pose_at(0.2, 0.0, 0.0)];
        let with_err = |e: f64| -> Vec<Pose> {
            truth
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    if k == 0 {
                        *p
                    } else {
                        Pose::new(p.position + Vector3::new(0.0, e, 0.0), p.orientation)
                    }
                })
                .collect()
        };
        let small = rmse_pos(&with_err(0.01), &truth, 2, false).unwrap();
        let large = rmse_pos(&with_err(0.02), &truth, 2, false).unwrap();
        assert!((small - 0.01).abs() < 1e-15);
        assert!(large > small);
        assert!((large - 2.0 * small).abs() < 1e-15);
    }

    #[test]
    fn short_trajectories_are_rejected() {
        let truth = vec![Pose::identity(); 3];
        assert!(matches!(rmse_pos(&truth, &truth, 3, false), Err(Error::Shape(_))));
        assert!(matches!(rmse_rot(&truth, &truth, 0, false), Err(Error::Config(_))));
    }

    #[test]
    fn wrench_error_hand_values() {
        let zero = Observation::zero();
        let truth = vec![zero; 5];
        assert_eq!(ft_rmse(&truth, &truth).unwrap(), (0.0, 0.0));
        let off: Vec<Observation> = truth
            .iter()
            .map(|_| Observation {
                force: Vector3::new(1.0, 0.0, 0.0),
                torque: Vector3::zeros(),
            })
            .collect();
        let (f, t) = ft_rmse(&off, &truth).unwrap();
        assert_eq!(f, 1.0);
        assert_eq!(t, 0.0);
        assert!(matches!(ft_rmse(&off[..3], &truth), Err(Error::Shape(_))));
        assert!(matches!(ft_rmse(&[], &[]), Err(Error::Shape(_))));
    }

    #[test]
    fn wrench_error_matches_independent_recomputation() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut draw = || -> Observation {
            Observation {
                force: Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
                torque: Vector3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
            }
        };
        let pred: Vec<Observation> = (0..40).map(|_| draw()).collect();
        let truth: Vec<Observation> = (0..40).map(|_| draw()).collect();
        let (f, t) = ft_rmse(&pred, &truth).unwrap();
        let mut fs = 0.0;
        let mut ts = 0.0;
        for (p, q) in pred.iter().zip(&truth) {
            for i in 0..3 {
                fs += (p.force[i] - q.force[i]).powi(2);
                ts += (p.torque[i] - q.torque[i]).powi(2);
            }
        }
        assert!((f - (fs / 40.0).sqrt()).abs() < 1e-12);
        assert!((t - (ts / 40.0).sqrt()).abs() < 1e-12);
    }

    // -- rollout and dataset evaluation ---------------------------------------

    /// Stub dynamics: drifts +0.1 m in x per step, reports a fixed wrench,
    /// and fails numerically whenever the commanded force exceeds a limit.
    struct DriftModel {
        fail_above: f64,
    }

    impl DynamicsModel for DriftModel {
        fn step(&self, history: &StateHistory, action: &Action) -> Result<(State, Observation)> {
            if action.force.x > self.fail_above {
                return Err(Error::Numeric("force limit".into()));
            }
            let mut s = *history.newest();
            s.pose.position.x += 0.1;
            Ok((
                s,
                Observation {
                    force: Vector3::new(0.5, 0.0, 0.0),
                    torque: Vector3::zeros(),
                },
            ))
        }
    }

    /// Stub that emits a NaN position after a set number of steps.
    struct NanAfter {
        calls: Cell<usize>,
        nan_at: usize,
    }

    impl DynamicsModel for NanAfter {
        fn step(&self, history: &StateHistory, _action: &Action) -> Result<(State, Observation)> {
            let n = self.calls.get();
            self.calls.set(n + 1);
            let mut s = *history.newest();
            s.pose.position.x += if n >= self.nan_at { f64::NAN } else { 0.1 };
            Ok((s, Observation::zero()))
        }
    }

    #[test]
    fn oracle_model_replays_recorded_episode_exactly() {
        let scene = free_scene();
        let data = gen_dataset(&scene, 1, 10, 3);
        let model = OracleModel {
            scene: scene.clone(),
            cfg: OracleConfig::default(),
        };
        let recs = &data.records[..6];
        let actions: Vec<Action> = recs.iter().map(|r| r.action).collect();
        let ro = rollout_model(&model, &recs[0].history().unwrap(), &actions).unwrap();
        assert!(!ro.truncated);
        assert_eq!(ro.states.len(), actions.len());
        for (k, r) in recs.iter().enumerate() {
            assert_eq!(ro.states[k].pose, r.next_pose, "pose diverged at step {k}");
            assert_eq!(ro.states[k].twist, r.next_twist, "twist diverged at step {k}");
            assert_eq!(ro.observations[k], r.observation, "wrench diverged at step {k}");
        }

        let windows = sample_windows(&data, 5, 3, 7).unwrap();
        let report = evaluate(&model, &data, 5, &windows).unwrap();
        assert_eq!(report.windows_truncated, 0);
        assert_eq!(report.pos_abs, 0.0);
        assert_eq!(report.rot_abs, 0.0);
        assert_eq!(report.pos_rel, 0.0);
        assert_eq!(report.rot_rel, 0.0);
        assert_eq!(report.force_rmse, 0.0);
        assert_eq!(report.torque_rmse, 0.0);
    }

    #[test]
    fn single_action_rollout_equals_one_step() {
        let scene = free_scene();
        let data = gen_dataset(&scene, 1, 4, 3);
        let model = OracleModel {
            scene,
            cfg: OracleConfig::default(),
        };
        let r = &data.records[0];
        let hist = r.history().unwrap();
        let ro = rollout_model(&model, &hist, &[r.action]).unwrap();
        let (s, o) = model.step(&hist, &r.action).unwrap();
        assert_eq!(ro.states.len(), 1);
        assert_eq!(ro.states[0], s);
        assert_eq!(ro.observations[0], o);
    }

    #[test]
    fn rollout_requires_actions() {
        let scene = free_scene();
        let data = gen_dataset(&scene, 1, 4, 3);
        let model = OracleModel {
            scene,
            cfg: OracleConfig::default(),
        };
        let hist = data.records[0].history().unwrap();
        assert!(matches!(rollout_model(&model, &hist, &[]), Err(Error::Config(_))));
    }

    fn flat_record(episode: u32, step: u32, x: f64, force_x: f64) -> Record {
        let p = pose_at(x, 0.0, 0.0);
        Record {
            episode,
            step,
            poses: vec![p, pose_at(x - 0.1, 0.0, 0.0)],
            twist: Twist::zero(),
            action: Action {
                force: Vector3::new(force_x, 0.0, 0.0),
                torque: Vector3::zeros(),
            },
            observation: Observation::zero(),
            next_pose: pose_at(x + 0.1, 0.0, 0.0),
            next_twist: Twist::zero(),
        }
    }

    /// Two 3-step episodes; the second opens with an action that trips the
    /// drift model's force limit.
    fn flat_dataset() -> Dataset {
        let mut records = Vec::new();
        for step in 0..3u32 {
            records.push(flat_record(0, step, 0.1 * step as f64, 0.0));
        }
        for step in 0..3u32 {
            let f = if step == 0 { 999.0 } else { 0.0 };
            records.push(flat_record(1, step, 0.1 * step as f64, f));
        }
        Dataset {
            h: 1,
            dt: 0.05,
            scene_hash: 0,
            records,
        }
    }

    #[test]
    fn rollout_truncates_on_numeric_failure_and_keeps_prefix() {
        let data = flat_dataset();
        let hist = data.records[3].history().unwrap();
        let actions: Vec<Action> = data.records[3..5].iter().map(|r| r.action).collect();
        let model = DriftModel { fail_above: 100.0 };
        let ro = rollout_model(&model, &hist, &actions).unwrap();
        assert!(ro.truncated);
        assert!(ro.states.is_empty());

        let nan = NanAfter {
            calls: Cell::new(0),
            nan_at: 1,
        };
        let hist = data.records[0].history().unwrap();
        let actions: Vec<Action> = data.records[0..2].iter().map(|r| r.action).collect();
        let ro = rollout_model(&nan, &hist, &actions).unwrap();
        assert!(ro.truncated);
        assert_eq!(ro.states.len(), 1);
    }

    #[test]
    fn window_starts_stay_inside_episodes() {
        let data = flat_dataset();
        assert_eq!(window_starts(&data, 2), vec![0, 1, 3, 4]);
        assert_eq!(window_starts(&data, 3), vec![0, 3]);
        assert_eq!(window_starts(&data, 4), Vec::<usize>::new());
        assert_eq!(window_starts(&data, 1), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn window_sampling_is_seeded_and_bounded() {
        let scene = free_scene();
        let data = gen_dataset(&scene, 2, 10, 3);
        let a = sample_windows(&data, 3, 4, 11).unwrap();
        let b = sample_windows(&data, 3, 4, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let valid = window_starts(&data, 3);
        assert!(a.iter().all(|s| valid.contains(s)));
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup, a, "sampled starts must be distinct and sorted");
        assert!(sample_windows(&data, 100, 4, 11).is_err());
        assert!(sample_windows(&data, 3, 0, 11).is_err());
    }

    #[test]
    fn evaluation_counts_truncated_windows_and_pools_wrench_pairs() {
        let data = flat_dataset();
        let model = DriftModel { fail_above: 100.0 };
        let report = evaluate(&model, &data, 2, &[0, 3]).unwrap();
        assert_eq!(report.windows_evaluated, 1);
        assert_eq!(report.windows_truncated, 1);
        // The drift model reproduces the flat dataset's motion exactly.
        assert_eq!(report.pos_abs, 0.0);
        assert_eq!(report.pos_rel, 0.0);
        assert_eq!(report.rot_abs, 0.0);
        // Nothing in the dataset rotates, so relative rotation is undefined.
        assert!(report.rot_rel.is_nan());
        // Three single-step wrench pairs survive (one fails the force limit),
        // each off by exactly 0.5 N.
        assert_eq!(report.force_rmse, 0.5);
        assert_eq!(report.torque_rmse, 0.0);
        assert!(report.to_table().contains("undefined"));

        // Every window truncated: no rollout metrics to report.
        assert!(matches!(
            evaluate(&model, &data, 2, &[3]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(evaluate(&model, &data, 2, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn learned_model_evaluates_and_reloads_from_checkpoint() {
        use rand::SeedableRng as _;
        let scene = free_scene();
        let data = gen_dataset(&scene, 1, 8, 3);
        let cfg = EpdConfig {
            layers: 2,
            latent: 16,
            hidden: 16,
            history: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = EpdParams::<f32>::init(cfg, &mut rng);
        let contacts = training::precompute_contacts(&scene, &data, CONTACT_RADIUS).unwrap();
        let idx: Vec<usize> = (0..data.records.len()).collect();
        let norm = NormStats::fit(&scene, &data, &contacts, &idx).unwrap();
        let model = EpdModel::new(scene.clone(), params.clone(), norm.clone(), CONTACT_RADIUS, data.dt)
            .unwrap();

        let hist = data.records[0].history().unwrap();
        let actions: Vec<Action> = data.records[..4].iter().map(|r| r.action).collect();
        let ro = rollout_model(&model, &hist, &actions).unwrap();
        assert!(!ro.truncated, "untrained rollout should stay finite here");
        assert_eq!(ro.states.len(), 4);

        let report = evaluate_sampled(&model, &data, 3, 2, 3).unwrap();
        assert!(report.pos_abs.is_finite() && report.pos_abs > 0.0);
        assert!(report.rot_abs.is_finite());
        assert!(report.force_rmse.is_finite());

        // Round-trip through a checkpoint file gives bit-identical numbers.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let blocks = norm.to_blocks();
        let refs: Vec<(String, &crate::tensor::Tensor<f32>)> =
            blocks.iter().map(|(n, t)| (n.clone(), t)).collect();
        epd::save_checkpoint(&path, &params, &[], &refs).unwrap();
        let reloaded = EpdModel::from_checkpoint(scene, &path, CONTACT_RADIUS, data.dt).unwrap();
        let (s1, o1) = model.step(&hist, &actions[0]).unwrap();
        let (s2, o2) = reloaded.step(&hist, &actions[0]).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(o1, o2);
    }

    #[test]
    fn report_table_lists_every_column() {
        let report = EvalReport {
            t: 100,
            windows_evaluated: 12,
            windows_truncated: 3,
            pos_abs: 0.0123,
            pos_rel: 0.45,
            rot_abs: 0.067,
            rot_rel: 0.89,
            force_rmse: 1.5,
            torque_rmse: 0.02,
        };
        let table = report.to_table();
        for needle in [
            "position RMSE (m)",
            "position RMSE (relative)",
            "rotation RMSE (rad)",
            "rotation RMSE (relative)",
            "force RMSE (N, one-step)",
            "torque RMSE (N*m, one-step)",
            "12 evaluated",
            "3 truncated",
            "horizon 100",
        ] {
            assert!(table.contains(needle), "missing {needle:?} in:\n{table}");
        }
    }
}

