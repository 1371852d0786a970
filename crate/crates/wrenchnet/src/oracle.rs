//! Analytical ground-truth simulator: a single free 6-DoF body driven by an
//! applied wrench, with penalty-based contact against the scene's static
//! geometry.
//!
//! Dynamics use semi-implicit Euler over fixed substeps: velocities first
//! (with the gyroscopic term), then positions, with the orientation advanced
//! by the quaternion exponential of the world angular velocity. Contact is a
//! spring-damper along face normals at penetrating vertices with
//! Coulomb-capped viscous friction — deliberately stiff-but-smooth dynamics,
//! not an impulse solver.
//!
//! States are quantized to the f32 storage grid at every control step during
//! episode generation, so stored transitions replay bit-identically.

use std::collections::HashSet;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{quantize_state, Record};
use crate::geometry::{detect_collisions, Scene};
use crate::state::{Action, Observation, Pose, State, Twist, DEFAULT_DT};
use crate::{Error, Result};

/// Face-pair candidates are collected within this closest-point distance.
pub const CONTACT_RADIUS: f64 = 0.01;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    /// Control step (s); one recorded transition per control step.
    pub dt: f64,
    /// Integration substeps per control step.
    pub substeps: u32,
    /// Contact spring stiffness (N/m of penetration depth).
    pub stiffness: f64,
    /// Contact damping (N·s/m along the normal).
    pub damping: f64,
    /// Viscous tangential coefficient (N·s/m) before the Coulomb cap.
    pub friction_scale: f64,
    pub gravity: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            substeps: 25,
            stiffness: 1e4,
            damping: 50.0,
            friction_scale: 50.0,
            gravity: false,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || self.substeps == 0 {
            return Err(Error::Config(
                "oracle needs dt > 0 and at least one substep".into(),
            ));
        }
        if self.stiffness < 0.0 || self.damping < 0.0 || self.friction_scale < 0.0 {
            return Err(Error::Config("contact coefficients must be >= 0".into()));
        }
        Ok(())
    }
}

/// Wrench episode shape: random spline knots per component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeConfig {
    /// Spline knots per wrench component.
    pub knots: usize,
    /// Knot amplitude for force components (N).
    pub force_amp: f64,
    /// Knot amplitude for torque components (N·m).
    pub torque_amp: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            knots: 8,
            force_amp: 2.0,
            torque_amp: 0.05,
        }
    }
}

/// One penalty contact, exposed for inspection and property tests.
#[derive(Debug, Clone, Copy)]
pub struct ContactSample {
    /// World contact point (the penetrating vertex).
    pub point: Vector3<f64>,
    /// Surface outward unit normal, pointing toward the penetrating body.
    pub normal: Vector3<f64>,
    pub depth: f64,
    /// Nonnegative normal force magnitude.
    pub normal_force: f64,
    /// Tangential (friction) force on the penetrating body.
    pub friction: Vector3<f64>,
    /// Sign of the resulting force on the tool: +1 when the tool is the
    /// penetrating side, -1 when a static vertex penetrates a tool face.
    pub tool_sign: f64,
}

impl ContactSample {
    /// Total contact force applied to the tool.
    pub fn force_on_tool(&self) -> Vector3<f64> {
        self.tool_sign * (self.normal_force * self.normal + self.friction)
    }
}

fn barycentric_inside(p: Vector3<f64>, tri: &[Vector3<f64>; 3]) -> bool {
    let e0 = tri[1] - tri[0];
    let e1 = tri[2] - tri[0];
    let d = p - tri[0];
    let d00 = e0.dot(&e0);
    let d01 = e0.dot(&e1);
    let d11 = e1.dot(&e1);
    let d20 = d.dot(&e0);
    let d21 = d.dot(&e1);
    let denom = d00 * d11 - d01 * d01;
    if denom.abs() < f64::MIN_POSITIVE {
        return false;
    }
    let v = (d11 * d20 - d01 * d21) / denom;
    let w = (d00 * d21 - d01 * d20) / denom;
    let eps = 1e-9;
    v >= -eps && w >= -eps && v + w <= 1.0 + eps
}

/// Evaluates the penalty contact model for the tool at `pose`/`twist`.
///
/// Per colliding face pair, the deepest-penetrating vertex of either face
/// against the other face's plane produces one spring-damper contact
/// (deduplicated across pairs by vertex and surface face).
pub fn contact_probe(
    scene: &Scene,
    pose: &Pose,
    twist: &Twist,
    cfg: &OracleConfig,
) -> Result<Vec<ContactSample>> {
    let tool = scene.tool()?;
    let body = scene.body(tool);
    let com_w = pose.orientation * body.com + pose.position;

    let mut poses: Vec<Pose> = scene.rest_poses().to_vec();
    poses[tool] = *pose;
    let pairs = detect_collisions(scene, &poses, CONTACT_RADIUS)?;
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let verts = scene.world_vertices(&poses);
    let tri_of = |f: usize| -> [Vector3<f64>; 3] {
        let idx = scene.face_vertices(f);
        [verts[idx[0]], verts[idx[1]], verts[idx[2]]]
    };

    let mut out = Vec::new();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    for pair in &pairs {
        let (fa, fb) = (pair.sender_face, pair.receiver_face);
        let (ba, bb) = (scene.face_body(fa), scene.face_body(fb));
        let a_is_tool = ba == tool;
        let b_is_tool = bb == tool;
        if a_is_tool == b_is_tool {
            continue; // static-static or degenerate self pair
        }
        let (tool_face, static_face, n_static, n_tool) = if a_is_tool {
            (fa, fb, pair.n_r, pair.n_s)
        } else {
            (fb, fa, pair.n_s, pair.n_r)
        };

        // Direction A: tool vertices into the static face.
        // Direction B: static vertices into the tool face.
        for (pen_face, surf_face, n, tool_sign) in [
            (tool_face, static_face, n_static, 1.0),
            (static_face, tool_face, n_tool, -1.0),
        ] {
            let surf_tri = tri_of(surf_face);
            let pen_ids = scene.face_vertices(pen_face);
            let mut deepest: Option<(usize, f64)> = None;
            for &vid in &pen_ids {
                let signed = n.dot(&(verts[vid] - surf_tri[0]));
                if signed < 0.0 && deepest.map_or(true, |(_, s)| signed < s) {
                    deepest = Some((vid, signed));
                }
            }
            let Some((vid, signed)) = deepest else { continue };
            let p = verts[vid];
            if !barycentric_inside(p - signed * n, &surf_tri) {
                continue;
            }
            if !seen.insert((vid, surf_face)) {
                continue;
            }
            let depth = -signed;

            // Velocity of the penetrating material point relative to the
            // surface; only the tool moves.
            let v_tool_pt = twist.linear + twist.angular.cross(&(p - com_w));
            let v_rel = tool_sign * v_tool_pt;
            let vn = n.dot(&v_rel);
            let fn_mag = (cfg.stiffness * depth - cfg.damping * vn).max(0.0);
            if fn_mag == 0.0 {
                continue;
            }
            let mu = body.friction.min(scene.body(if a_is_tool { bb } else { ba }).friction);
            let v_t = v_rel - vn * n;
            let speed_t = v_t.norm();
            let friction = if speed_t > 1e-12 {
                let mag = (cfg.friction_scale * speed_t).min(mu * fn_mag);
                -(mag / speed_t) * v_t
            } else {
                Vector3::zeros()
            };
            out.push(ContactSample {
                point: p,
                normal: n,
                depth,
                normal_force: fn_mag,
                friction,
                tool_sign,
            });
        }
    }
    Ok(out)
}

fn contact_wrench_on_tool(
    scene: &Scene,
    pose: &Pose,
    twist: &Twist,
    com_w: Vector3<f64>,
    cfg: &OracleConfig,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let mut f = Vector3::zeros();
    let mut tau = Vector3::zeros();
    for s in contact_probe(scene, pose, twist, cfg)? {
        let fc = s.force_on_tool();
        f += fc;
        tau += (s.point - com_w).cross(&fc);
    }
    Ok((f, tau))
}

/// One control step of the tool body under `action`.
///
/// The observation is the time-averaged contact wrench applied to the tool
/// about its center of mass — the reaction the environment exerts back, so
/// a body resting on the ground reads +mg along the normal.
pub fn step(
    scene: &Scene,
    state: &State,
    action: &Action,
    cfg: &OracleConfig,
) -> Result<(State, Observation)> {
    cfg.validate()?;
    let tool = scene.tool()?;
    let body = scene.body(tool);
    let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
    if !finite(&state.pose.position)
        || !finite(&state.twist.linear)
        || !finite(&state.twist.angular)
        || !state.pose.orientation.as_vector().iter().all(|x| x.is_finite())
    {
        return Err(Error::Numeric(format!(
            "non-finite state entering step: {state:?}"
        )));
    }

    let ddt = cfg.dt / cfg.substeps as f64;
    let mut q = state.pose.orientation;
    let mut com = q * body.com + state.pose.position;
    let mut v = state.twist.linear;
    let mut w = state.twist.angular;
    let grav = if cfg.gravity {
        Vector3::new(0.0, 0.0, -GRAVITY * body.mass)
    } else {
        Vector3::zeros()
    };

    let mut obs_f = Vector3::zeros();
    let mut obs_t = Vector3::zeros();
    for _ in 0..cfg.substeps {
        let pose = Pose {
            position: com - q * body.com,
            orientation: q,
        };
        let twist = Twist {
            linear: v,
            angular: w,
        };
        let (cf, ct) = contact_wrench_on_tool(scene, &pose, &twist, com, cfg)?;
        obs_f += cf;
        obs_t += ct;

        let rot = q.to_rotation_matrix();
        let i_w: Matrix3<f64> = rot * body.inertia * rot.transpose();
        let f_total = action.force + grav + cf;
        let tau_total = action.torque + ct - w.cross(&(i_w * w));
        let i_inv = i_w
            .try_inverse()
            .ok_or_else(|| Error::Numeric("singular world inertia".into()))?;

        v += f_total / body.mass * ddt;
        w += i_inv * tau_total * ddt;
        com += v * ddt;
        q = UnitQuaternion::from_scaled_axis(w * ddt) * q;
    }

    let next = State {
        pose: Pose::new(com - q * body.com, q),
        twist: Twist {
            linear: v,
            angular: w,
        },
    };
    if !finite(&next.pose.position) || !finite(&next.twist.linear) || !finite(&next.twist.angular)
    {
        return Err(Error::Numeric(
            "integration produced a non-finite state".into(),
        ));
    }
    let n = cfg.substeps as f64;
    Ok((
        next,
        Observation {
            force: obs_f / n,
            torque: obs_t / n,
        },
    ))
}

/// Kinetic energy of the tool body (translational + rotational).
pub fn kinetic_energy(state: &State, mass: f64, inertia: &Matrix3<f64>) -> f64 {
    let rot = state.pose.orientation.to_rotation_matrix();
    let i_w = rot * inertia * rot.transpose();
    0.5 * mass * state.twist.linear.norm_squared()
        + 0.5 * state.twist.angular.dot(&(i_w * state.twist.angular))
}

/// Natural cubic spline through `(x, y)` knots with strictly increasing x.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots (natural: zero at the ends).
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn natural(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(Error::Config(format!(
                "spline needs >= 2 knots with matching values, got {} / {}",
                n,
                ys.len()
            )));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("spline knots must be increasing".into()));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior second-derivative system.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                let h0 = xs[i + 1] - xs[i];
                let h1 = xs[i + 2] - xs[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0
                    * ((ys[i + 2] - ys[i + 1]) / h1 - (ys[i + 1] - ys[i]) / h0);
            }
            for i in 1..k {
                let h0 = xs[i + 1] - xs[i]; // lower-diagonal entry
                let f = h0 / diag[i - 1];
                diag[i] -= f * upper[i - 1];
                rhs[i] -= f * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self { xs, ys, m })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let x = x.clamp(self.xs[0], self.xs[n - 1]);
        let mut i = match self
            .xs
            .binary_search_by(|v| v.partial_cmp(&x).expect("finite knots"))
        {
            Ok(j) => j,
            Err(j) => j.saturating_sub(1),
        };
        i = i.min(n - 2);
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h
                / 6.0
    }
}

/// Rounds an action to the f32 storage grid, matching how episodes quantize
/// commands before stepping.
pub fn quantize_action(a: &Action) -> Action {
    let q = |v: &Vector3<f64>| {
        Vector3::new(v.x as f32 as f64, v.y as f32 as f64, v.z as f32 as f64)
    };
    Action {
        force: q(&a.force),
        torque: q(&a.torque),
    }
}

/// Rounds an observation to the f32 storage grid, matching recorded data.
pub fn quantize_observation(o: &Observation) -> Observation {
    let q = |v: &Vector3<f64>| {
        Vector3::new(v.x as f32 as f64, v.y as f32 as f64, v.z as f32 as f64)
    };
    Observation {
        force: q(&o.force),
        torque: q(&o.torque),
    }
}

/// Rolls one episode with spline wrench targets and collects one record per
/// control step after the history window fills.
///
/// The tool starts at rest in its scene pose. States (and the spline
/// actions) are rounded to the f32 storage grid before each step, so every
/// stored transition replays exactly from its stored inputs.
pub fn generate_episode(
    scene: &Scene,
    cfg: &OracleConfig,
    ecfg: &EpisodeConfig,
    h: usize,
    episode: u32,
    seed: u64,
    steps: usize,
) -> Result<Vec<Record>> {
    cfg.validate()?;
    if ecfg.knots < 2 {
        return Err(Error::Config("episode needs at least 2 spline knots".into()));
    }
    if steps < h + 1 {
        return Err(Error::Config(format!(
            "episode of {steps} steps cannot fill a history of {h}"
        )));
    }
    let tool = scene.tool()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let span = (steps - 1).max(1) as f64;
    let k = ecfg.knots;
    let xs: Vec<f64> = (0..k).map(|j| span * j as f64 / (k - 1) as f64).collect();
    let splines: Vec<CubicSpline> = (0..6)
        .map(|c| {
            let amp = if c < 3 { ecfg.force_amp } else { ecfg.torque_amp };
            let ys = (0..k).map(|_| rng.random_range(-amp..=amp)).collect();
            CubicSpline::natural(xs.clone(), ys)
        })
        .collect::<Result<_>>()?;
    let action_at = |t: usize| -> Action {
        let e = |c: usize| splines[c].eval(t as f64);
        quantize_action(&Action {
            force: Vector3::new(e(0), e(1), e(2)),
            torque: Vector3::new(e(3), e(4), e(5)),
        })
    };

    let mut state = quantize_state(&State::at_rest(scene.rest_poses()[tool]));
    let mut poses = vec![state.pose];
    let mut records = Vec::with_capacity(steps - h);
    for t in 0..steps {
        let action = action_at(t);
        let (raw_next, obs) = step(scene, &state, &action, cfg)?;
        let next = quantize_state(&raw_next);
        if t >= h {
            records.push(Record {
                episode,
                step: t as u32,
                poses: (0..=h).map(|k| poses[t - k]).collect(),
                twist: state.twist,
                action,
                observation: quantize_observation(&obs),
                next_pose: next.pose,
                next_twist: next.twist,
            });
        }
        poses.push(next.pose);
        state = next;
    }
    Ok(records)
}
