//! From per-vertex acceleration predictions back to a rigid state.
//!
//! The network predicts one acceleration per dynamic vertex in normalized
//! position units (already multiplied by the squared step, so integration
//! needs no time factors). Integrating each vertex independently breaks
//! rigidity slightly; the body pose is recovered by a least-squares rigid
//! alignment of the body-frame mesh onto the integrated cloud, and the
//! twist by finite pose differences.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::state::{Pose, State, Twist};
use crate::{Error, Result};

/// Verlet-style step on raw vertices: next = acc + 2 p_t - p_prev.
/// Accelerations are in position units (pre-scaled by the squared step).
pub fn integrate_vertices(
    acc: &[Vector3<f64>],
    p_t: &[Vector3<f64>],
    p_prev: &[Vector3<f64>],
) -> Result<Vec<Vector3<f64>>> {
    if acc.len() != p_t.len() || acc.len() != p_prev.len() {
        return Err(Error::Shape(format!(
            "vertex counts differ: {} accelerations, {} current, {} previous",
            acc.len(),
            p_t.len(),
            p_prev.len()
        )));
    }
    Ok(acc
        .iter()
        .zip(p_t)
        .zip(p_prev)
        .map(|((a, p), q)| a + 2.0 * p - q)
        .collect())
}

/// Least-squares rigid transform (rotation + translation, det(R) = +1)
/// mapping `reference` onto `predicted`; the Kabsch solution with the
/// reflection guard on the smallest singular direction.
pub fn align_pose(
    predicted: &[Vector3<f64>],
    reference: &[Vector3<f64>],
) -> Result<Pose> {
    let n = predicted.len();
    if n != reference.len() {
        return Err(Error::Shape(format!(
            "point counts differ: {} predicted, {} reference",
            n,
            reference.len()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidGeometry(format!(
            "rigid alignment needs at least 3 points, got {n}"
        )));
    }
    let mean = |pts: &[Vector3<f64>]| pts.iter().sum::<Vector3<f64>>() / n as f64;
    let pc = mean(predicted);
    let rc = mean(reference);

    // Cross-covariance of centered clouds; column k holds sum r'_i p'_ik.
    let mut hm = Matrix3::<f64>::zeros();
    for (p, r) in predicted.iter().zip(reference) {
        hm += (r - rc) * (p - pc).transpose();
    }

    // Degenerate reference geometry (collinear points) leaves the rotation
    // about the point axis unobservable.
    let mut scatter = Matrix3::<f64>::zeros();
    for r in reference {
        let d = r - rc;
        scatter += d * d.transpose();
    }
    let sv = scatter.symmetric_eigenvalues();
    let (mut hi, mut mid) = (0.0f64, 0.0f64);
    for &v in sv.iter() {
        if v > hi {
            mid = hi;
            hi = v;
        } else if v > mid {
            mid = v;
        }
    }
    if mid <= 1e-12 * hi.max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidGeometry(
            "rigid alignment reference points are collinear".into(),
        ));
    }

    let svd = hm.svd(true, true);
    let u = svd.u.expect("svd with u");
    let v_t = svd.v_t.expect("svd with v_t");
    let v = v_t.transpose();
    let det = (v * u.transpose()).determinant();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let rot = v * d * u.transpose();
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
    let t = pc - rot * rc;
    Ok(Pose::new(t, q))
}

/// Finite-difference twist between consecutive poses: componentwise for
/// position, relative-quaternion axis-angle (expressed in world axes) for
/// orientation.
pub fn reconstruct_velocity(next: &Pose, current: &Pose, dt: f64) -> Result<Twist> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("time step must be positive, got {dt}")));
    }
    let linear = (next.position - current.position) / dt;
    let rel = current.orientation.inverse() * next.orientation;
    let angular = (current.orientation * rel.scaled_axis()) / dt;
    Ok(Twist { linear, angular })
}

/// Full post-processing chain: integrate the predicted accelerations,
/// recover the rigid pose, reconstruct the twist against the current pose.
pub fn apply_prediction(
    acc: &[Vector3<f64>],
    p_t: &[Vector3<f64>],
    p_prev: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    current: &Pose,
    dt: f64,
) -> Result<State> {
    let cloud = integrate_vertices(acc, p_t, p_prev)?;
    let pose = align_pose(&cloud, reference)?;
    let twist = reconstruct_velocity(&pose, current, dt)?;
    Ok(State { pose, twist })
}
