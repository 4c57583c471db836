//! Skeleton topology and pose-clip data model shared by all other modules.
//!
//! The default skeleton is the 17-joint format with the pelvis as root:
//! 0 pelvis, 1 R-hip, 2 R-knee, 3 R-ankle, 4 L-hip, 5 L-knee, 6 L-ankle,
//! 7 spine, 8 thorax, 9 neck, 10 head, 11 L-shoulder, 12 L-elbow,
//! 13 L-wrist, 14 R-shoulder, 15 R-elbow, 16 R-wrist.

use ndarray::{Array2, Array3};

use crate::error::{KasError, Result};

/// Rooted joint tree with a left/right mirror map.
#[derive(Debug, Clone)]
pub struct SkeletonTopology {
    parent: Vec<usize>,
    mirror: Vec<usize>,
    root: usize,
    names: Vec<String>,
}

impl SkeletonTopology {
    /// Builds a topology, checking that the parent map is acyclic and
    /// reaches the root, and that the mirror map is an involution fixing
    /// the root.
    pub fn new(
        parent: Vec<usize>,
        mirror: Vec<usize>,
        root: usize,
        names: Vec<String>,
    ) -> Result<Self> {
        let j = parent.len();
        if mirror.len() != j || names.len() != j {
            return Err(KasError::InvalidTopology(format!(
                "parent/mirror/names lengths disagree: {}/{}/{}",
                j,
                mirror.len(),
                names.len()
            )));
        }
        if root >= j || parent[root] != root {
            return Err(KasError::InvalidTopology(
                "root must map to itself in the parent map".into(),
            ));
        }
        for joint in 0..j {
            let mut cur = joint;
            let mut steps = 0;
            while cur != root {
                if parent[cur] >= j {
                    return Err(KasError::InvalidTopology(format!(
                        "parent of joint {cur} out of range"
                    )));
                }
                cur = parent[cur];
                steps += 1;
                if steps >= j {
                    return Err(KasError::InvalidTopology(format!(
                        "joint {joint} does not reach the root"
                    )));
                }
            }
        }
        for joint in 0..j {
            if mirror[joint] >= j || mirror[mirror[joint]] != joint {
                return Err(KasError::InvalidTopology(format!(
                    "mirror map is not an involution at joint {joint}"
                )));
            }
        }
        if mirror[root] != root {
            return Err(KasError::InvalidTopology(
                "mirror must fix the root".into(),
            ));
        }
        Ok(Self {
            parent,
            mirror,
            root,
            names,
        })
    }

    /// The default 17-joint skeleton rooted at the pelvis.
    pub fn default17() -> Self {
        let parent = vec![0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
        let mirror = vec![0, 4, 5, 6, 1, 2, 3, 7, 8, 9, 10, 14, 15, 16, 11, 12, 13];
        let names = [
            "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine",
            "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
            "r_elbow", "r_wrist",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        Self::new(parent, mirror, 0, names).expect("default topology is valid")
    }

    /// Minimal 5-joint skeleton (root plus two mirrored 2-joint chains)
    /// used by the tiny-configuration gradient suite.
    pub fn toy5() -> Self {
        let parent = vec![0, 0, 1, 0, 3];
        let mirror = vec![0, 3, 4, 1, 2];
        let names = ["root", "r_a", "r_b", "l_a", "l_b"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        Self::new(parent, mirror, 0, names).expect("toy topology is valid")
    }

    pub fn joint_count(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, joint: usize) -> usize {
        self.parent[joint]
    }

    pub fn mirror(&self, joint: usize) -> usize {
        self.mirror[joint]
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn name(&self, joint: usize) -> &str {
        &self.names[joint]
    }

    /// Returns true when this is the default 17-joint layout.
    pub fn is_default17(&self) -> bool {
        let d = Self::default17();
        self.parent == d.parent && self.mirror == d.mirror && self.root == d.root
    }

    /// Symmetric adjacency matrix of the undirected skeleton edges
    /// (no self-loops).
    pub fn adjacency(&self) -> Array2<f64> {
        let j = self.joint_count();
        let mut a = Array2::zeros((j, j));
        for child in 0..j {
            let p = self.parent[child];
            if p != child {
                a[(child, p)] = 1.0;
                a[(p, child)] = 1.0;
            }
        }
        a
    }
}

/// 2D input clip: T x J x 3 with (x, y, confidence) per joint.
///
/// Coordinates are expected normalized to [-1, 1] by image width;
/// confidence lies in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Pose2DClip {
    data: Array3<f64>,
}

impl Pose2DClip {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (t, _, c) = data.dim();
        if t < 1 || c != 3 {
            return Err(KasError::ShapeMismatch {
                expected: "T x J x 3 with T >= 1".into(),
                got: format!("{:?}", data.dim()),
            });
        }
        for ((frame, joint, ch), &v) in data.indexed_iter() {
            if !v.is_finite() {
                return Err(KasError::NonFinite { frame, joint });
            }
            if ch == 2 && !(0.0..=1.0).contains(&v) {
                return Err(KasError::InvalidConfig(format!(
                    "confidence {v} out of [0,1] at frame {frame}, joint {joint}"
                )));
            }
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn joints(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

/// 3D clip: T x J x 3 in millimeters, root-relative after centering.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3DClip {
    data: Array3<f64>,
}

impl Pose3DClip {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (t, _, c) = data.dim();
        if t < 1 || c != 3 {
            return Err(KasError::ShapeMismatch {
                expected: "T x J x 3 with T >= 1".into(),
                got: format!("{:?}", data.dim()),
            });
        }
        for ((frame, joint, _), &v) in data.indexed_iter() {
            if !v.is_finite() {
                return Err(KasError::NonFinite { frame, joint });
            }
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn joints(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

fn check_joints(clip_joints: usize, topo: &SkeletonTopology) -> Result<()> {
    if clip_joints != topo.joint_count() {
        return Err(KasError::ShapeMismatch {
            expected: format!("J = {}", topo.joint_count()),
            got: format!("J = {clip_joints}"),
        });
    }
    Ok(())
}

/// Translates every frame so the root joint sits at the origin. Idempotent.
pub fn center_on_root(clip: &Pose3DClip, topo: &SkeletonTopology) -> Result<Pose3DClip> {
    check_joints(clip.joints(), topo)?;
    let mut data = clip.data().clone();
    let (t, j, _) = data.dim();
    let root = topo.root();
    for frame in 0..t {
        let offset = [
            data[(frame, root, 0)],
            data[(frame, root, 1)],
            data[(frame, root, 2)],
        ];
        for joint in 0..j {
            for c in 0..3 {
                data[(frame, joint, c)] -= offset[c];
            }
        }
    }
    Pose3DClip::new(data)
}

/// Mirror augmentation: negates x and permutes joints by the mirror map in
/// both clips. The confidence channel is permuted but not negated. Involutive.
pub fn horizontal_flip(
    clip2d: &Pose2DClip,
    clip3d: &Pose3DClip,
    topo: &SkeletonTopology,
) -> Result<(Pose2DClip, Pose3DClip)> {
    check_joints(clip2d.joints(), topo)?;
    check_joints(clip3d.joints(), topo)?;
    if clip2d.frames() != clip3d.frames() {
        return Err(KasError::ShapeMismatch {
            expected: format!("T = {}", clip2d.frames()),
            got: format!("T = {}", clip3d.frames()),
        });
    }
    let (t, j, _) = clip2d.data().dim();
    let mut d2 = Array3::zeros((t, j, 3));
    let mut d3 = Array3::zeros((t, j, 3));
    for frame in 0..t {
        for joint in 0..j {
            let src = topo.mirror(joint);
            d2[(frame, joint, 0)] = -clip2d.data()[(frame, src, 0)];
            d2[(frame, joint, 1)] = clip2d.data()[(frame, src, 1)];
            d2[(frame, joint, 2)] = clip2d.data()[(frame, src, 2)];
            d3[(frame, joint, 0)] = -clip3d.data()[(frame, src, 0)];
            d3[(frame, joint, 1)] = clip3d.data()[(frame, src, 1)];
            d3[(frame, joint, 2)] = clip3d.data()[(frame, src, 2)];
        }
    }
    Ok((Pose2DClip::new(d2)?, Pose3DClip::new(d3)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip3d(t: usize, j: usize, seed: u64) -> Pose3DClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((t, j, 3), |_| rng.gen_range(-500.0..500.0));
        Pose3DClip::new(data).unwrap()
    }

    fn random_clip2d(t: usize, j: usize, seed: u64) -> Pose2DClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((t, j, c3()), |(_, _, c)| {
            if c == 2 {
                rng.gen_range(0.0..1.0)
            } else {
                rng.gen_range(-1.0..1.0)
            }
        });
        Pose2DClip::new(data).unwrap()
    }

    fn c3() -> usize {
        3
    }

    #[test]
    fn default17_reaches_root_quickly() {
        let topo = SkeletonTopology::default17();
        for j in 0..17 {
            let mut cur = j;
            let mut steps = 0;
            while cur != topo.root() {
                cur = topo.parent(cur);
                steps += 1;
                assert!(steps < 17);
            }
        }
    }

    #[test]
    fn mirror_is_involution() {
        let topo = SkeletonTopology::default17();
        for j in 0..17 {
            assert_eq!(topo.mirror(topo.mirror(j)), j);
        }
        assert_eq!(topo.mirror(topo.root()), topo.root());
    }

    #[test]
    fn center_uniform_translation() {
        let topo = SkeletonTopology::default17();
        let data = Array3::from_elem((1, 17, 3), 5.0);
        let clip = Pose3DClip::new(data).unwrap();
        let centered = center_on_root(&clip, &topo).unwrap();
        assert!(centered.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_is_idempotent() {
        let topo = SkeletonTopology::default17();
        let clip = random_clip3d(4, 17, 7);
        let once = center_on_root(&clip, &topo).unwrap();
        let twice = center_on_root(&once, &topo).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn center_matches_scalar_oracle() {
        let topo = SkeletonTopology::default17();
        let clip = random_clip3d(5, 17, 11);
        let centered = center_on_root(&clip, &topo).unwrap();
        // independent per-frame subtraction, scalar loop
        for frame in 0..5 {
            let rx = clip.data()[(frame, 0, 0)];
            let ry = clip.data()[(frame, 0, 1)];
            let rz = clip.data()[(frame, 0, 2)];
            for joint in 0..17 {
                assert_eq!(
                    centered.data()[(frame, joint, 0)],
                    clip.data()[(frame, joint, 0)] - rx
                );
                assert_eq!(
                    centered.data()[(frame, joint, 1)],
                    clip.data()[(frame, joint, 1)] - ry
                );
                assert_eq!(
                    centered.data()[(frame, joint, 2)],
                    clip.data()[(frame, joint, 2)] - rz
                );
            }
        }
    }

    #[test]
    fn center_rejects_wrong_joint_count() {
        let topo = SkeletonTopology::default17();
        let clip = random_clip3d(2, 5, 3);
        assert!(matches!(
            center_on_root(&clip, &topo),
            Err(KasError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn flip_is_involution() {
        let topo = SkeletonTopology::default17();
        let c2 = random_clip2d(3, 17, 1);
        let c3 = random_clip3d(3, 17, 2);
        let (f2, f3) = horizontal_flip(&c2, &c3, &topo).unwrap();
        let (b2, b3) = horizontal_flip(&f2, &f3, &topo).unwrap();
        assert_eq!(b2, c2);
        assert_eq!(b3, c3);
    }

    #[test]
    fn flip_matches_permutation_oracle() {
        let topo = SkeletonTopology::default17();
        let c2 = random_clip2d(2, 17, 5);
        let c3 = random_clip3d(2, 17, 6);
        let (f2, f3) = horizontal_flip(&c2, &c3, &topo).unwrap();
        for frame in 0..2 {
            for joint in 0..17 {
                let src = topo.mirror(joint);
                assert_eq!(f2.data()[(frame, joint, 0)], -c2.data()[(frame, src, 0)]);
                assert_eq!(f2.data()[(frame, joint, 1)], c2.data()[(frame, src, 1)]);
                assert_eq!(f2.data()[(frame, joint, 2)], c2.data()[(frame, src, 2)]);
                for c in 0..3 {
                    let sign = if c == 0 { -1.0 } else { 1.0 };
                    assert_eq!(
                        f3.data()[(frame, joint, c)],
                        sign * c3.data()[(frame, src, c)]
                    );
                }
            }
        }
    }

    #[test]
    fn flip_fixed_point_on_symmetric_clip() {
        let topo = SkeletonTopology::default17();
        // build a 3D clip that is an exact x-mirror image of itself
        let mut data = Array3::zeros((1, 17, 3));
        for joint in 0..17 {
            let m = topo.mirror(joint);
            if data[(0, joint, 0)] == 0.0 && joint <= m {
                let x = if joint == m { 0.0 } else { 1.0 + joint as f64 };
                data[(0, joint, 0)] = x;
                data[(0, m, 0)] = -x;
                data[(0, joint, 1)] = joint.min(m) as f64;
                data[(0, m, 1)] = joint.min(m) as f64;
                data[(0, joint, 2)] = 0.5;
                data[(0, m, 2)] = 0.5;
            }
        }
        let c3 = Pose3DClip::new(data.clone()).unwrap();
        let mut d2 = data;
        for joint in 0..17 {
            d2[(0, joint, 2)] = 0.5; // valid confidence
        }
        let c2 = Pose2DClip::new(d2).unwrap();
        let (f2, f3) = horizontal_flip(&c2, &c3, &topo).unwrap();
        assert_eq!(f2, c2);
        assert_eq!(f3, c3);
    }

    #[test]
    fn flip_preserves_pairwise_distances() {
        let topo = SkeletonTopology::default17();
        let c2 = random_clip2d(2, 17, 8);
        let c3 = random_clip3d(2, 17, 9);
        let (_, f3) = horizontal_flip(&c2, &c3, &topo).unwrap();
        for frame in 0..2 {
            for a in 0..17 {
                for b in 0..17 {
                    let d = |clip: &Pose3DClip, i: usize, k: usize| {
                        let dx = clip.data()[(frame, i, 0)] - clip.data()[(frame, k, 0)];
                        let dy = clip.data()[(frame, i, 1)] - clip.data()[(frame, k, 1)];
                        let dz = clip.data()[(frame, i, 2)] - clip.data()[(frame, k, 2)];
                        (dx * dx + dy * dy + dz * dz).sqrt()
                    };
                    let orig = d(&c3, a, b);
                    let flipped = d(&f3, topo.mirror(a), topo.mirror(b));
                    let rel = (orig - flipped).abs() / orig.max(1.0);
                    assert!(rel < 1e-9);
                }
            }
        }
    }
}
