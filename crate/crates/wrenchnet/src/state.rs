//! Maximal-coordinate state, action, and observation types.
//!
//! A body's configuration is a world-frame position plus an orientation
//! quaternion; velocities are world-frame twists. The learned model consumes
//! a short history window of states, so [`StateHistory`] keeps the `h` most
//! recent states (newest first) plus one extra trailing pose, giving `h + 1`
//! position frames and therefore `h` finite differences.
//!
//! Conventions: Hamilton products, scalar-first (w, x, y, z) storage,
//! canonical sign `w >= 0`. Actions are world-frame wrenches applied at the
//! tool's center of mass; observations are the reaction wrench on the tool,
//! expressed in the tool body frame.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::{Error, Result};

/// Default history window length.
pub const DEFAULT_HISTORY: usize = 3;

/// Default control-step duration in seconds (500 Hz).
pub const DEFAULT_DT: f64 = 0.002;

/// Unit-quaternion norm tolerance accepted when deserializing poses.
pub const QUAT_NORM_TOL: f64 = 1e-6;

/// Rigid-body pose: world-frame position and orientation.
///
/// The orientation is always unit-norm and sign-canonicalized (`w >= 0`), so
/// two equal rotations compare equal componentwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Self {
            position,
            orientation: canonicalize_quaternion(orientation),
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), UnitQuaternion::identity())
    }

    /// Builds a pose from raw parts, validating the quaternion norm.
    ///
    /// `quat` is scalar-first (w, x, y, z). Norms farther than
    /// [`QUAT_NORM_TOL`] from 1 are rejected; small drift is renormalized.
    pub fn from_parts(position: [f64; 3], quat: [f64; 4]) -> Result<Self> {
        let q = Quaternion::new(quat[0], quat[1], quat[2], quat[3]);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(Error::InvalidPose(format!(
                "quaternion norm {norm} outside unit tolerance {QUAT_NORM_TOL}"
            )));
        }
        Ok(Self::new(
            Vector3::new(position[0], position[1], position[2]),
            UnitQuaternion::from_quaternion(q),
        ))
    }

    /// Raw parts: position and scalar-first quaternion.
    pub fn to_parts(&self) -> ([f64; 3], [f64; 4]) {
        let p = self.position;
        let q = self.orientation.quaternion();
        ([p.x, p.y, p.z], [q.w, q.i, q.j, q.k])
    }

    /// Applies the pose to a body-frame point: `R(q) p + t`.
    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * point + self.position
    }

    /// Rotates a body-frame vector into the world frame (no translation).
    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * v
    }

    /// Inverse-rotates a world-frame vector into the body frame.
    pub fn inverse_rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * v
    }
}

/// Canonicalizes the quaternion sign so `w >= 0`; at `w == 0` the first
/// nonzero imaginary component is made positive. `R(q) == R(-q)`, so this
/// never changes the rotation.
pub fn canonicalize_quaternion(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let c = q.quaternion();
    let flip = if c.w != 0.0 {
        c.w < 0.0
    } else if c.i != 0.0 {
        c.i < 0.0
    } else if c.j != 0.0 {
        c.j < 0.0
    } else {
        c.k < 0.0
    };
    if flip {
        UnitQuaternion::new_unchecked(-c)
    } else {
        q
    }
}

/// Hamilton product `a * b` (apply `b` first, then `a`).
pub fn quaternion_multiply(
    a: &UnitQuaternion<f64>,
    b: &UnitQuaternion<f64>,
) -> UnitQuaternion<f64> {
    a * b
}

pub fn quaternion_inverse(q: &UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    q.inverse()
}

/// Axis-angle of a rotation with angle in `[0, pi]`.
///
/// Returns `(axis, angle)`; the axis is zero for the identity rotation.
pub fn quaternion_to_axis_angle(q: &UnitQuaternion<f64>) -> (Vector3<f64>, f64) {
    let c = canonicalize_quaternion(*q);
    let w = c.quaternion().w.clamp(-1.0, 1.0);
    let angle = 2.0 * w.acos();
    let imag = c.quaternion().imag();
    let norm = imag.norm();
    if norm < 1e-15 {
        (Vector3::zeros(), 0.0)
    } else {
        (imag / norm, angle)
    }
}

/// World-frame linear and angular velocity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self {
            linear: Vector3::zeros(),
            angular: Vector3::zeros(),
        }
    }
}

/// Full dynamic state of one body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub pose: Pose,
    pub twist: Twist,
}

impl State {
    pub fn at_rest(pose: Pose) -> Self {
        Self {
            pose,
            twist: Twist::zero(),
        }
    }
}

/// The `h` most recent states, newest first, plus the pose one step older.
///
/// The trailing pose exists so position features can take `h` backward
/// differences over `h + 1` frames without widening the state window itself.
#[derive(Debug, Clone, PartialEq)]
pub struct StateHistory {
    frames: Vec<State>,
    prev_pose: Pose,
}

impl StateHistory {
    pub fn new(frames: Vec<State>, prev_pose: Pose) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidPose("empty state history".into()));
        }
        Ok(Self { frames, prev_pose })
    }

    /// A cold-start history: every frame is `state`, at rest in time.
    pub fn constant(state: State, h: usize) -> Self {
        assert!(h >= 1, "history window must be at least 1");
        Self {
            frames: vec![state; h],
            prev_pose: state.pose,
        }
    }

    pub fn h(&self) -> usize {
        self.frames.len()
    }

    /// States, newest first.
    pub fn frames(&self) -> &[State] {
        &self.frames
    }

    pub fn newest(&self) -> &State {
        &self.frames[0]
    }

    pub fn prev_pose(&self) -> &Pose {
        &self.prev_pose
    }

    /// The `h + 1` poses, newest first.
    pub fn poses(&self) -> Vec<Pose> {
        let mut out: Vec<Pose> = self.frames.iter().map(|s| s.pose).collect();
        out.push(self.prev_pose);
        out
    }

    /// Pushes the next state, dropping the oldest frame into the trailing
    /// pose slot.
    pub fn advance(&self, next: State) -> Self {
        let mut frames = Vec::with_capacity(self.frames.len());
        frames.push(next);
        frames.extend_from_slice(&self.frames[..self.frames.len() - 1]);
        Self {
            frames,
            prev_pose: self.frames[self.frames.len() - 1].pose,
        }
    }
}

/// Commanded wrench: world-frame force and torque on the tool CoM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Action {
    pub fn zero() -> Self {
        Self {
            force: Vector3::zeros(),
            torque: Vector3::zeros(),
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            force: Vector3::new(a[0], a[1], a[2]),
            torque: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        ]
    }
}

/// Sensed reaction wrench on the tool about its center of mass, world
/// frame, averaged over the control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Observation {
    pub fn zero() -> Self {
        Self {
            force: Vector3::zeros(),
            torque: Vector3::zeros(),
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            force: Vector3::new(a[0], a[1], a[2]),
            torque: Vector3::new(a[3], a[4], a[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.force.x,
            self.force.y,
            self.force.z,
            self.torque.x,
            self.torque.y,
            self.torque.z,
        ]
    }
}
