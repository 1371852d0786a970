//! Sampling-based model-predictive control: a fixed-population
//! cross-entropy planner with colored exploration noise over any dynamics
//! model, a tip-reaching reward, and an episode runner that executes plans
//! against the reference simulator while recording a replayable trace.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{self, quantize_state, Dataset, Record};
use crate::geometry::Scene;
use crate::metrics::{rollout_model, rotation_angle, DynamicsModel};
use crate::oracle::{self, quantize_action, quantize_observation, OracleConfig};
use crate::state::{Action, Pose, State, StateHistory};
use crate::{Error, Result};

/// Per-step action dimensionality: force xyz then torque xyz.
const ACT_DIM: usize = 6;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Planner and episode-runner settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    /// Rollouts per candidate; only deterministic single-rollout models are
    /// supported.
    pub particles: usize,
    /// Planning horizon in control steps.
    pub horizon: usize,
    /// Population size per optimization iteration (fixed, not decaying).
    pub samples: usize,
    /// Optimization iterations per planning call.
    pub iterations: usize,
    /// Control steps executed before replanning.
    pub replan_every: usize,
    /// Fraction of the population refit as elites; the elite count is
    /// `max(2, ceil(fraction * samples))`.
    pub elite_frac: f64,
    /// Colored-noise exponent: 0 is white, 2 concentrates exploration in
    /// low frequencies (temporally smooth action perturbations).
    pub noise_beta: f64,
    /// Weight kept on the previous mean/std in each elite refit.
    pub momentum: f64,
    /// Per-axis force bound (N); actions are clipped to ±bound.
    pub force_limit: f64,
    /// Per-axis torque bound (N·m); actions are clipped to ±bound.
    pub torque_limit: f64,
    /// Tip-to-target distance that counts as success and triggers the
    /// reward bonus (m).
    pub success_radius: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            particles: 1,
            horizon: 50,
            samples: 20,
            iterations: 5,
            replan_every: 5,
            elite_frac: 0.1,
            noise_beta: 2.0,
            momentum: 0.1,
            force_limit: 2.0,
            torque_limit: 0.05,
            success_radius: 0.002,
        }
    }
}

impl AgentConfig {
    /// Elite count: at least 2, at most the population size.
    pub fn elites(&self) -> usize {
        (self.elite_frac * self.samples as f64).ceil().max(2.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles != 1 {
            return Err(Error::Config(
                "only deterministic single-particle rollouts are supported".into(),
            ));
        }
        if self.horizon == 0 || self.replan_every == 0 || self.iterations == 0 {
            return Err(Error::Config(
                "horizon, replan interval, and iterations must be positive".into(),
            ));
        }
        if self.horizon < self.replan_every {
            return Err(Error::Config(format!(
                "horizon {} is shorter than the replan interval {}",
                self.horizon, self.replan_every
            )));
        }
        if !(self.elite_frac > 0.0 && self.elite_frac <= 1.0) {
            return Err(Error::Config("elite fraction must be in (0, 1]".into()));
        }
        if self.samples < self.elites() {
            return Err(Error::Config(format!(
                "population of {} cannot hold {} elites",
                self.samples,
                self.elites()
            )));
        }
        if !(self.noise_beta >= 0.0 && self.noise_beta.is_finite()) {
            return Err(Error::Config("noise exponent must be finite and ≥ 0".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.force_limit >= 0.0 && self.torque_limit >= 0.0) {
            return Err(Error::Config("action bounds must be non-negative".into()));
        }
        if !(self.success_radius > 0.0) {
            return Err(Error::Config("success radius must be positive".into()));
        }
        Ok(())
    }

    /// Per-dimension half-width of the action box.
    fn limit(&self, d: usize) -> f64 {
        if d < 3 {
            self.force_limit
        } else {
            self.torque_limit
        }
    }
}

// ---------------------------------------------------------------------------
// Reward
// ---------------------------------------------------------------------------

/// Reaching reward: a bonus of 10 inside the success radius, plus the
/// exponentials of the negative tip-to-target distance (m) and of the
/// negative orientation error (rad).
pub fn reward(state: &State, tip: &Vector3<f64>, target: &Pose, eps: f64) -> f64 {
    let tip_world = state.pose.transform_point(tip);
    let dp = (tip_world - target.position).norm();
    let dth = rotation_angle(&state.pose.orientation, &target.orientation);
    let bonus = if dp <= eps { 10.0 } else { 0.0 };
    bonus + (-dp).exp() + (-dth).exp()
}

// ---------------------------------------------------------------------------
// Colored noise
// ---------------------------------------------------------------------------

/// Length-`n` Gaussian sequence with power spectrum ∝ f^(−β), synthesized
/// spectrally and scaled to roughly unit marginal variance. β = 0 is white
/// noise; larger β shifts power into low frequencies, giving temporally
/// smooth exploration.
pub fn colored_noise(rng: &mut impl Rng, beta: f64, n: usize) -> Vec<f64> {
    assert!(n >= 1, "noise sequence needs at least one element");
    if n == 1 {
        return vec![rng.sample::<f64, _>(StandardNormal)];
    }
    let nf = n / 2 + 1;
    // Frequency scaling f^(−β/2), with the DC bin clamped to the lowest
    // nonzero frequency so it stays finite.
    let scale: Vec<f64> = (0..nf)
        .map(|k| {
            let f = (k as f64 / n as f64).max(1.0 / n as f64);
            f.powf(-beta / 2.0)
        })
        .collect();
    // Expected output variance from the non-DC bins; the Nyquist bin of an
    // even-length sequence carries half weight.
    let mut sumsq = 0.0;
    for (k, s) in scale.iter().enumerate().skip(1) {
        let w = if n % 2 == 0 && k == nf - 1 { s / 2.0 } else { *s };
        sumsq += w * w;
    }
    let sigma = 2.0 * sumsq.sqrt() / n as f64;

    let re: Vec<f64> = (0..nf)
        .map(|k| rng.sample::<f64, _>(StandardNormal) * scale[k])
        .collect();
    let mut im: Vec<f64> = (0..nf)
        .map(|k| rng.sample::<f64, _>(StandardNormal) * scale[k])
        .collect();
    im[0] = 0.0;
    if n % 2 == 0 {
        // The Nyquist bin of an even-length real signal must be real.
        im[nf - 1] = 0.0;
    }

    // Inverse real DFT; n is at most the planning horizon, so the direct
    // O(n²) form is cheap.
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let mut y = re[0];
        let last_paired = if n % 2 == 0 { nf - 2 } else { nf - 1 };
        for k in 1..=last_paired {
            let th = 2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            y += 2.0 * (re[k] * th.cos() - im[k] * th.sin());
        }
        if n % 2 == 0 {
            y += re[nf - 1] * if t % 2 == 0 { 1.0 } else { -1.0 };
        }
        out.push(y / n as f64 / sigma);
    }
    out
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

/// A planning result: the best candidate action sequence plus the final
/// sampling distribution, kept for warm-starting the next planning call.
#[derive(Debug, Clone)]
pub struct Plan {
    /// Best-scoring action sequence, horizon entries, within bounds.
    pub actions: Vec<Action>,
    /// Per-step mean of the sampling distribution after the last refit.
    pub mean: Vec<[f64; ACT_DIM]>,
    /// Per-step std of the sampling distribution after the last refit.
    pub std: Vec<[f64; ACT_DIM]>,
    /// Mean elite score after each optimization iteration.
    pub elite_scores: Vec<f64>,
}

impl Plan {
    /// The planner's mean shifted left by `executed` steps, padded with the
    /// center of the action box (zero), for warm-starting the next call.
    pub fn shifted_mean(&self, executed: usize) -> Vec<[f64; ACT_DIM]> {
        let h = self.mean.len();
        let mut out = Vec::with_capacity(h);
        for t in 0..h {
            out.push(if t + executed < h {
                self.mean[t + executed]
            } else {
                [0.0; ACT_DIM]
            });
        }
        out
    }
}

fn action_from(row: &[f64; ACT_DIM]) -> Action {
    Action {
        force: Vector3::new(row[0], row[1], row[2]),
        torque: Vector3::new(row[3], row[4], row[5]),
    }
}

/// Indices of the `k` best scores, descending; NaN ranks below every
/// finite score. The stable sort keeps insertion order among exact ties,
/// and the selection is unaffected by how non-elite entries are ordered.
pub fn elite_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let key = |i: usize| -> f64 {
        if scores[i].is_nan() {
            f64::NEG_INFINITY
        } else {
            scores[i]
        }
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).expect("keys are never NaN"));
    idx.truncate(k);
    idx
}

/// Scores one candidate: the summed reward of a deterministic rollout, or
/// −∞ when the rollout truncates on a numerical failure.
fn score_candidate(
    model: &dyn DynamicsModel,
    history: &StateHistory,
    actions: &[Action],
    tip: &Vector3<f64>,
    target: &Pose,
    eps: f64,
) -> Result<f64> {
    let ro = rollout_model(model, history, actions)?;
    if ro.truncated {
        return Ok(f64::NEG_INFINITY);
    }
    let total: f64 = ro.states.iter().map(|s| reward(s, tip, target, eps)).sum();
    Ok(if total.is_nan() {
        f64::NEG_INFINITY
    } else {
        total
    })
}

/// Cross-entropy planning with a fixed population: each iteration samples
/// colored-noise candidates around the current mean/std, keeps the elites
/// of the combined population (previous elites are re-entered, so the mean
/// elite score never drops), and refits mean and std with momentum. A flat
/// population — every candidate scoring the same — carries no preference,
/// so the mean is kept and only the std contracts.
///
/// `prev` warm-starts the mean with a previous plan shifted by the number
/// of executed steps.
pub fn icem_plan(
    model: &dyn DynamicsModel,
    history: &StateHistory,
    tip: &Vector3<f64>,
    target: &Pose,
    cfg: &AgentConfig,
    seed: u64,
    prev: Option<(&Plan, usize)>,
) -> Result<Plan> {
    cfg.validate()?;
    let h = cfg.horizon;
    let mut mean: Vec<[f64; ACT_DIM]> = match prev {
        Some((plan, executed)) => {
            if plan.mean.len() != h {
                return Err(Error::Config(format!(
                    "warm-start plan has horizon {}, expected {h}",
                    plan.mean.len()
                )));
            }
            plan.shifted_mean(executed)
        }
        None => vec![[0.0; ACT_DIM]; h],
    };
    // Start std at half the box half-width; reset every planning call.
    let mut std: Vec<[f64; ACT_DIM]> = vec![
        [
            cfg.force_limit / 2.0,
            cfg.force_limit / 2.0,
            cfg.force_limit / 2.0,
            cfg.torque_limit / 2.0,
            cfg.torque_limit / 2.0,
            cfg.torque_limit / 2.0,
        ];
        h
    ];
    let std_floor: Vec<f64> = (0..ACT_DIM).map(|d| 1e-3 * 2.0 * cfg.limit(d)).collect();
    let weight = |old: f64, elite: f64| cfg.momentum * old + (1.0 - cfg.momentum) * elite;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.elites();
    let mut kept: Vec<(Vec<[f64; ACT_DIM]>, f64)> = Vec::new();
    let mut elite_scores = Vec::with_capacity(cfg.iterations);

    for _ in 0..cfg.iterations {
        let mut population = kept;
        while population.len() < cfg.samples {
            let mut cand = vec![[0.0; ACT_DIM]; h];
            for d in 0..ACT_DIM {
                let noise = colored_noise(&mut rng, cfg.noise_beta, h);
                let lim = cfg.limit(d);
                for t in 0..h {
                    cand[t][d] = (mean[t][d] + std[t][d] * noise[t]).clamp(-lim, lim);
                }
            }
            let actions: Vec<Action> = cand.iter().map(action_from).collect();
            let score = score_candidate(model, history, &actions, tip, target, cfg.success_radius)?;
            population.push((cand, score));
        }
        let scores: Vec<f64> = population.iter().map(|(_, s)| *s).collect();
        if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
            return Err(Error::Numeric(
                "planning failed: every candidate rollout diverged".into(),
            ));
        }
        let elite = elite_indices(&scores, k);
        elite_scores.push(elite.iter().map(|&i| scores[i]).sum::<f64>() / k as f64);

        let flat = scores.iter().all(|s| *s == scores[0]);
        for t in 0..h {
            for d in 0..ACT_DIM {
                let em: f64 =
                    elite.iter().map(|&i| population[i].0[t][d]).sum::<f64>() / k as f64;
                let ev: f64 = elite
                    .iter()
                    .map(|&i| (population[i].0[t][d] - em).powi(2))
                    .sum::<f64>()
                    / k as f64;
                if !flat {
                    mean[t][d] = weight(mean[t][d], em);
                }
                std[t][d] = weight(std[t][d], ev.sqrt()).max(std_floor[d]);
            }
        }
        kept = elite.into_iter().map(|i| population[i].clone()).collect();
    }

    let best = &kept[0];
    Ok(Plan {
        actions: best.0.iter().map(action_from).collect(),
        mean,
        std,
        elite_scores,
    })
}

// ---------------------------------------------------------------------------
// Episode runner and trace
// ---------------------------------------------------------------------------

/// One executed control step in the dataset record layout plus the reward
/// earned by the resulting state.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub record: Record,
    pub reward: f64,
}

/// A recorded control episode. Rows replay bit-identically through the
/// reference simulator, and `to_dataset` makes them trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub h: usize,
    pub dt: f64,
    pub scene_hash: u64,
    pub rows: Vec<TraceRow>,
}

/// Outcome of a control episode.
#[derive(Debug, Clone)]
pub struct AgentOutcome {
    pub trace: Trace,
    pub success: bool,
    /// Control steps executed (the trace row count).
    pub steps: usize,
}

/// Runs the planner against the reference simulator: replans every
/// `replan_every` steps with the given model, executes the planned actions
/// (quantized exactly like episode generation, so the trace replays
/// bit-identically), and stops on success — the tool tip within the
/// success radius of the target — or after `max_steps`.
pub fn run_agent(
    model: &dyn DynamicsModel,
    scene: &Scene,
    env: &OracleConfig,
    target: &Pose,
    cfg: &AgentConfig,
    h: usize,
    max_steps: usize,
    seed: u64,
) -> Result<AgentOutcome> {
    cfg.validate()?;
    env.validate()?;
    if h == 0 {
        return Err(Error::Config("history length must be at least 1".into()));
    }
    if max_steps == 0 {
        return Err(Error::Config("episode needs at least one step".into()));
    }
    let tool = scene.tool()?;
    let tip = scene.body(tool).tip;
    let eps = cfg.success_radius;

    let start = quantize_state(&State::at_rest(scene.rest_poses()[tool]));
    let mut history = StateHistory::new(vec![start; h], start.pose)?;
    let at_target = |s: &State| (s.pose.transform_point(&tip) - target.position).norm() < eps;

    let mut trace = Trace {
        h,
        dt: env.dt,
        scene_hash: scene.content_hash(),
        rows: Vec::new(),
    };
    if at_target(&start) {
        return Ok(AgentOutcome {
            trace,
            success: true,
            steps: 0,
        });
    }

    let mut plan: Option<Plan> = None;
    let mut success = false;
    for step in 0..max_steps {
        if step % cfg.replan_every == 0 {
            let plan_seed = seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let next = icem_plan(
                model,
                &history,
                &tip,
                target,
                cfg,
                plan_seed,
                plan.as_ref().map(|p| (p, cfg.replan_every)),
            )?;
            plan = Some(next);
        }
        let action = plan.as_ref().expect("planned above").actions[step % cfg.replan_every];
        let action = quantize_action(&action);
        let (next, obs) = oracle::step(scene, history.newest(), &action, env)?;
        let next = quantize_state(&next);
        let obs = quantize_observation(&obs);
        // Rewards are stored at f32 like every other recorded quantity, so
        // a saved trace reloads bit-identically.
        let r = reward(&next, &tip, target, eps) as f32 as f64;
        trace.rows.push(TraceRow {
            record: Record {
                episode: 0,
                step: step as u32,
                poses: history.poses(),
                twist: history.newest().twist,
                action,
                observation: obs,
                next_pose: next.pose,
                next_twist: next.twist,
            },
            reward: r,
        });
        history = history.advance(next);
        if at_target(&next) {
            success = true;
            break;
        }
    }
    let steps = trace.rows.len();
    Ok(AgentOutcome {
        trace,
        success,
        steps,
    })
}

// ---------------------------------------------------------------------------
// Trace serialization
// ---------------------------------------------------------------------------

const TRACE_MAGIC: &str = "wrenchnet-trace v1";

impl Trace {
    /// Row width in floats: one dataset record plus the reward column.
    fn width(&self) -> usize {
        Record::width(self.h) + 1
    }

    /// Drops the reward column, leaving a trainable dataset.
    pub fn to_dataset(&self) -> Dataset {
        Dataset {
            h: self.h,
            dt: self.dt,
            scene_hash: self.scene_hash,
            records: self.rows.iter().map(|r| r.record.clone()).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for row in &self.rows {
            if row.record.h() != self.h {
                return Err(Error::Shape(format!(
                    "trace row holds {} history frames, header says {}",
                    row.record.h(),
                    self.h
                )));
            }
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            w,
            "{TRACE_MAGIC} h={} dt={} scene={:016x} rows={}",
            self.h,
            self.dt,
            self.scene_hash,
            self.rows.len()
        )?;
        let mut row: Vec<f32> = Vec::with_capacity(self.width());
        for tr in &self.rows {
            row.clear();
            dataset::encode_record(&mut row, &tr.record);
            row.push(tr.reward as f32);
            debug_assert_eq!(row.len(), self.width());
            for v in &row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut header = Vec::new();
        loop {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)
                .map_err(|_| Error::Format("trace header truncated".into()))?;
            if b[0] == b'\n' {
                break;
            }
            if header.len() > 4096 {
                return Err(Error::Format("trace header unterminated".into()));
            }
            header.push(b[0]);
        }
        let header = String::from_utf8(header)
            .map_err(|_| Error::Format("trace header is not UTF-8".into()))?;
        let rest = header
            .strip_prefix(TRACE_MAGIC)
            .ok_or_else(|| Error::Format(format!("not a trace file: {header:?}")))?;
        let mut h = None;
        let mut dt = None;
        let mut scene_hash = None;
        let mut n_rows = None;
        for tok in rest.split_whitespace() {
            let (key, val) = tok
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header token {tok:?}")))?;
            match key {
                "h" => h = Some(val.parse::<usize>().map_err(|e| bad(key, e))?),
                "dt" => dt = Some(val.parse::<f64>().map_err(|e| bad(key, e))?),
                "scene" => {
                    scene_hash = Some(u64::from_str_radix(val, 16).map_err(|e| bad(key, e))?)
                }
                "rows" => n_rows = Some(val.parse::<usize>().map_err(|e| bad(key, e))?),
                other => return Err(Error::Format(format!("unknown header key {other:?}"))),
            }
        }
        let h = h.ok_or_else(|| missing("h"))?;
        let dt = dt.ok_or_else(|| missing("dt"))?;
        let scene_hash = scene_hash.ok_or_else(|| missing("scene"))?;
        let n_rows = n_rows.ok_or_else(|| missing("rows"))?;

        let width = Record::width(h) + 1;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != n_rows * width * 4 {
            return Err(Error::Format(format!(
                "trace body holds {} bytes, expected {} ({} rows of {} floats)",
                bytes.len(),
                n_rows * width * 4,
                n_rows,
                width
            )));
        }
        let floats: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut rows = Vec::with_capacity(n_rows);
        for i in 0..n_rows {
            let chunk = &floats[i * width..(i + 1) * width];
            rows.push(TraceRow {
                record: dataset::decode_record(&chunk[..width - 1], h),
                reward: chunk[width - 1] as f64,
            });
        }
        Ok(Self {
            h,
            dt,
            scene_hash,
            rows,
        })
    }
}

fn bad(key: &str, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("bad header value for {key}: {e}"))
}

fn missing(key: &str) -> Error {
    Error::Format(format!("trace header missing {key}"))
}
