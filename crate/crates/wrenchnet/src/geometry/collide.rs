//! Near-contact face-pair detection between posed bodies.
//!
//! Brute-force over inter-body face pairs with an axis-aligned-box
//! prefilter; desk-scale meshes keep the quadratic scan cheap and exactly
//! testable. Pair direction is canonical: sender = lower body id.

use nalgebra::Vector3;

use super::{closest_point_triangles, face_normal, ContactPair, Scene};
use crate::state::Pose;
use crate::Result;

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn from_points<'a, I: IntoIterator<Item = &'a Vector3<f64>>>(points: I) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Self { min, max }
    }

    pub fn inflate(&self, r: f64) -> Self {
        Self {
            min: self.min - Vector3::repeat(r),
            max: self.max + Vector3::repeat(r),
        }
    }

    pub fn intersects(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.max[k] && other.min[k] <= self.max[k])
    }

    /// Largest per-axis separation gap to `other` (0 when overlapping).
    /// Computed from coordinate differences, so exactly translating both
    /// boxes reproduces the same value bit for bit. A lower bound on the
    /// Euclidean distance between the boxed point sets.
    pub fn gap(&self, other: &Aabb) -> f64 {
        let mut g: f64 = 0.0;
        for k in 0..3 {
            g = g.max(other.min[k] - self.max[k]);
            g = g.max(self.min[k] - other.max[k]);
        }
        g
    }
}

/// Returns every inter-body face pair whose closest-point distance is at
/// most `radius`, ordered by (sender body, receiver body, sender face,
/// receiver face). Intra-body pairs never appear; each unordered face pair
/// appears once with the lower-id body as sender.
///
/// The box prefilter only ever discards pairs whose true distance exceeds
/// `radius`: per-axis gap is a lower bound on Euclidean distance.
pub fn detect_collisions(scene: &Scene, poses: &[Pose], radius: f64) -> Result<Vec<ContactPair>> {
    assert!(radius > 0.0, "collision radius must be positive");
    assert_eq!(poses.len(), scene.n_bodies(), "one pose per body");

    let verts = scene.world_vertices(poses);
    let n_faces = scene.n_faces();

    let face_tri = |f: usize| -> [Vector3<f64>; 3] {
        let idx = scene.face_vertices(f);
        [verts[idx[0]], verts[idx[1]], verts[idx[2]]]
    };
    let boxes: Vec<Aabb> = (0..n_faces)
        .map(|f| Aabb::from_points(face_tri(f).iter()))
        .collect();

    let mut out = Vec::new();
    for fa in 0..n_faces {
        let body_a = scene.face_body(fa);
        for fb in (fa + 1)..n_faces {
            let body_b = scene.face_body(fb);
            if body_a == body_b {
                continue;
            }
            if boxes[fa].gap(&boxes[fb]) > radius {
                continue;
            }
            // fa < fb and bodies differ; global face ids grow with body id,
            // so fa already belongs to the lower-id body.
            let tri_a = face_tri(fa);
            let tri_b = face_tri(fb);
            let closest = closest_point_triangles(&tri_a, &tri_b)?;
            if closest.distance <= radius {
                out.push(ContactPair {
                    sender_face: fa,
                    receiver_face: fb,
                    origin: closest.origin,
                    rel_s: closest.rel_a,
                    rel_r: closest.rel_b,
                    n_s: face_normal(&tri_a[0], &tri_a[1], &tri_a[2])?,
                    n_r: face_normal(&tri_b[0], &tri_b[1], &tri_b[2])?,
                    distance: closest.distance,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BodySpec, TriMesh};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tetra(scale: f64) -> TriMesh {
        let v = vec![
            Vector3::new(0.0, 0.0, 0.0) * scale,
            Vector3::new(1.0, 0.0, 0.0) * scale,
            Vector3::new(0.0, 1.0, 0.0) * scale,
            Vector3::new(0.0, 0.0, 1.0) * scale,
        ];
        // Outward winding.
        let f = vec![[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]];
        TriMesh::new(v, f).unwrap()
    }

    fn body(name: &str, mesh: TriMesh, dynamic: bool) -> BodySpec {
        BodySpec {
            name: name.into(),
            meshes: vec![mesh],
            mass: 1.0,
            friction: 0.5,
            dynamic,
            com: Vector3::zeros(),
            inertia: Matrix3::identity() * 0.01,
            tip: Vector3::zeros(),
        }
    }

    fn two_tetra_scene() -> Scene {
        Scene::new(
            vec![
                body("a", tetra(0.1), false),
                body("b", tetra(0.1), true),
            ],
            vec![Pose::identity(), Pose::identity()],
        )
        .unwrap()
    }

    fn pose_at(x: f64, y: f64, z: f64) -> Pose {
        Pose::new(Vector3::new(x, y, z), UnitQuaternion::identity())
    }

    #[test]
    fn separated_bodies_produce_nothing() {
        let scene = two_tetra_scene();
        let poses = vec![pose_at(0.0, 0.0, 0.0), pose_at(1.0, 0.0, 0.0)];
        let pairs = detect_collisions(&scene, &poses, 0.01).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn touching_bodies_produce_pairs_with_invariants() {
        let scene = two_tetra_scene();
        let poses = vec![pose_at(0.0, 0.0, 0.0), pose_at(0.105, 0.0, 0.0)];
        let pairs = detect_collisions(&scene, &poses, 0.01).unwrap();
        assert!(!pairs.is_empty());
        for p in &pairs {
            assert!(p.distance <= 0.01);
            assert_relative_eq!((p.p_r() - p.p_s()).norm(), p.distance, epsilon = 1e-9);
            assert_relative_eq!(p.n_s.norm(), 1.0, epsilon = 1e-9);
            assert_relative_eq!(p.n_r.norm(), 1.0, epsilon = 1e-9);
            assert_eq!(scene.face_body(p.sender_face), 0);
            assert_eq!(scene.face_body(p.receiver_face), 1);
        }
    }

    #[test]
    fn matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scene = two_tetra_scene();
        for _ in 0..40 {
            let poses = vec![
                pose_at(0.0, 0.0, 0.0),
                Pose::new(
                    Vector3::new(
                        rng.random_range(0.05..0.15),
                        rng.random_range(-0.05..0.05),
                        rng.random_range(-0.05..0.05),
                    ),
                    UnitQuaternion::from_euler_angles(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                ),
            ];
            let radius = 0.02;
            let got = detect_collisions(&scene, &poses, radius).unwrap();

            // Independent scan: no prefilter, direct distance test.
            let verts = scene.world_vertices(&poses);
            let mut expect = Vec::new();
            for fa in 0..scene.n_faces() {
                for fb in (fa + 1)..scene.n_faces() {
                    if scene.face_body(fa) == scene.face_body(fb) {
                        continue;
                    }
                    let ia = scene.face_vertices(fa);
                    let ib = scene.face_vertices(fb);
                    let ta = [verts[ia[0]], verts[ia[1]], verts[ia[2]]];
                    let tb = [verts[ib[0]], verts[ib[1]], verts[ib[2]]];
                    if closest_point_triangles(&ta, &tb).unwrap().distance <= radius {
                        expect.push((fa, fb));
                    }
                }
            }
            let got_ids: Vec<(usize, usize)> = got
                .iter()
                .map(|p| (p.sender_face, p.receiver_face))
                .collect();
            assert_eq!(got_ids, expect);
        }
    }

    #[test]
    fn radius_growth_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let scene = two_tetra_scene();
        for _ in 0..20 {
            let poses = vec![
                pose_at(0.0, 0.0, 0.0),
                pose_at(rng.random_range(0.08..0.2), 0.0, 0.0),
            ];
            let small: Vec<_> = detect_collisions(&scene, &poses, 0.01)
                .unwrap()
                .iter()
                .map(|p| (p.sender_face, p.receiver_face))
                .collect();
            let large: Vec<_> = detect_collisions(&scene, &poses, 0.05)
                .unwrap()
                .iter()
                .map(|p| (p.sender_face, p.receiver_face))
                .collect();
            for pair in &small {
                assert!(large.contains(pair));
            }
        }
    }

    #[test]
    fn rigid_scene_transform_preserves_distances() {
        let scene = two_tetra_scene();
        let base = vec![pose_at(0.0, 0.0, 0.0), pose_at(0.104, 0.01, -0.02)];
        let before = detect_collisions(&scene, &base, 0.02).unwrap();
        assert!(!before.is_empty());

        let rigid = Pose::new(
            Vector3::new(0.3, -0.7, 0.25),
            UnitQuaternion::from_euler_angles(0.4, 1.1, -0.6),
        );
        let moved: Vec<Pose> = base
            .iter()
            .map(|p| {
                Pose::new(
                    rigid.transform_point(&p.position),
                    rigid.orientation * p.orientation,
                )
            })
            .collect();
        let after = detect_collisions(&scene, &moved, 0.02).unwrap();
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!((a.sender_face, a.receiver_face), (b.sender_face, b.receiver_face));
            assert_relative_eq!(a.distance, b.distance, epsilon = 1e-9);
        }
    }

    #[test]
    fn face_relabeling_keeps_pair_set() {
        // Same tetra with faces listed in a different order.
        let relabeled = {
            let m = tetra(0.1);
            let mut faces = m.faces().to_vec();
            faces.reverse();
            TriMesh::new(m.vertices().to_vec(), faces).unwrap()
        };
        let scene_a = two_tetra_scene();
        let scene_b = Scene::new(
            vec![
                body("a", relabeled, false),
                body("b", tetra(0.1), true),
            ],
            vec![Pose::identity(), Pose::identity()],
        )
        .unwrap();
        let poses = vec![pose_at(0.0, 0.0, 0.0), pose_at(0.103, 0.0, 0.0)];

        let to_set = |scene: &Scene, pairs: Vec<ContactPair>| {
            let mut v: Vec<(usize, [usize; 3], [usize; 3])> = pairs
                .iter()
                .map(|p| {
                    let mut sa = scene.face_vertices(p.sender_face);
                    let mut sb = scene.face_vertices(p.receiver_face);
                    sa.sort_unstable();
                    sb.sort_unstable();
                    (0, sa, sb)
                })
                .collect();
            v.sort_unstable();
            v
        };
        let pa = to_set(&scene_a, detect_collisions(&scene_a, &poses, 0.02).unwrap());
        let pb = to_set(&scene_b, detect_collisions(&scene_b, &poses, 0.02).unwrap());
        assert_eq!(pa, pb);
    }

    #[test]
    fn empty_scene_is_empty() {
        let scene = Scene::new(vec![], vec![]).unwrap();
        let pairs = detect_collisions(&scene, &[], 0.01).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn aabb_basics() {
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 2.0, 3.0)];
        let b = Aabb::from_points(pts.iter());
        assert_eq!(b.min, Vector3::new(0.0, 0.0, 0.0));
        assert_eq!(b.max, Vector3::new(1.0, 2.0, 3.0));
        let far = Aabb {
            min: Vector3::new(5.0, 0.0, 0.0),
            max: Vector3::new(6.0, 1.0, 1.0),
        };
        assert!(!b.intersects(&far));
        assert!(b.inflate(4.5).intersects(&far));
    }
}
