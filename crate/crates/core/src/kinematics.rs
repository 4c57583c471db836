//! Bone decomposition and limb composition.
//!
//! A 2D skeleton frame is decomposed into per-edge unit directions and
//! lengths relative to each joint's tree parent, plus a synthetic
//! "ultra-bone" whose length and direction are the arithmetic means of all
//! real bones (the mean direction is deliberately not renormalized).
//! Selected bones are then fused into limb tokens through small per-channel
//! feed-forward networks.

use ndarray::{Array2, Array3};

use crate::error::{KasError, Result};
use crate::nn::FfnVars;
use crate::pose::{Pose2DClip, SkeletonTopology};
use crate::tape::{Tape, Var};

/// Default epsilon below which a bone is considered degenerate.
pub const BONE_EPS: f64 = 1e-8;

/// Per-clip bone decomposition. Bone slot `j` holds the bone whose child
/// joint is `j`; the root's slot holds the ultra-bone.
#[derive(Debug, Clone)]
pub struct BoneSet {
    /// T x J x 2 unit (or mean) direction vectors.
    dirs: Array3<f64>,
    /// T x J nonnegative lengths.
    lens: Array2<f64>,
    root: usize,
}

impl BoneSet {
    pub fn frames(&self) -> usize {
        self.lens.dim().0
    }

    pub fn bones(&self) -> usize {
        self.lens.dim().1
    }

    pub fn len(&self, frame: usize, bone: usize) -> f64 {
        self.lens[(frame, bone)]
    }

    pub fn dir(&self, frame: usize, bone: usize) -> [f64; 2] {
        [self.dirs[(frame, bone, 0)], self.dirs[(frame, bone, 1)]]
    }

    /// Index of the ultra-bone slot.
    pub fn ultra_index(&self) -> usize {
        self.root
    }

    /// T x J x 3 feature block ordered (len, dir_x, dir_y) per bone.
    pub fn features(&self) -> Array3<f64> {
        let (t, j) = self.lens.dim();
        let mut out = Array3::zeros((t, j, 3));
        for frame in 0..t {
            for bone in 0..j {
                out[(frame, bone, 0)] = self.lens[(frame, bone)];
                out[(frame, bone, 1)] = self.dirs[(frame, bone, 0)];
                out[(frame, bone, 2)] = self.dirs[(frame, bone, 1)];
            }
        }
        out
    }
}

/// Decomposes the 2D coordinates of a clip into bone lengths and unit
/// directions. Bones shorter than `eps` get a zero direction so the
/// pipeline stays total; the ultra-bone is appended in the root's slot.
pub fn extract_bones(
    clip2d: &Pose2DClip,
    topo: &SkeletonTopology,
    eps: f64,
) -> Result<BoneSet> {
    let j = topo.joint_count();
    if clip2d.joints() != j {
        return Err(KasError::ShapeMismatch {
            expected: format!("J = {j}"),
            got: format!("J = {}", clip2d.joints()),
        });
    }
    let t = clip2d.frames();
    let data = clip2d.data();
    let root = topo.root();
    let mut dirs = Array3::zeros((t, j, 2));
    let mut lens = Array2::zeros((t, j));
    for frame in 0..t {
        let mut len_sum = 0.0;
        let mut dir_sum = [0.0, 0.0];
        for joint in 0..j {
            if joint == root {
                continue;
            }
            let p = topo.parent(joint);
            let dx = data[(frame, joint, 0)] - data[(frame, p, 0)];
            let dy = data[(frame, joint, 1)] - data[(frame, p, 1)];
            if !dx.is_finite() || !dy.is_finite() {
                return Err(KasError::NonFinite { frame, joint });
            }
            let len = (dx * dx + dy * dy).sqrt();
            lens[(frame, joint)] = len;
            if len >= eps {
                dirs[(frame, joint, 0)] = dx / len;
                dirs[(frame, joint, 1)] = dy / len;
            }
            len_sum += len;
            dir_sum[0] += dirs[(frame, joint, 0)];
            dir_sum[1] += dirs[(frame, joint, 1)];
        }
        let real = (j - 1) as f64;
        lens[(frame, root)] = len_sum / real;
        dirs[(frame, root, 0)] = dir_sum[0] / real;
        dirs[(frame, root, 1)] = dir_sum[1] / real;
    }
    Ok(BoneSet {
        dirs,
        lens,
        root,
    })
}

/// Rebuilds joint positions of one frame by walking the tree from the root
/// and adding `len * dir` per edge. The ultra-bone is ignored. Rejects
/// degenerate bones.
pub fn reconstruct_joints(
    bones: &BoneSet,
    frame: usize,
    root_position: [f64; 2],
    topo: &SkeletonTopology,
) -> Result<Array2<f64>> {
    let j = topo.joint_count();
    if bones.bones() != j {
        return Err(KasError::ShapeMismatch {
            expected: format!("J = {j}"),
            got: format!("J = {}", bones.bones()),
        });
    }
    let root = topo.root();
    for joint in 0..j {
        if joint == root {
            continue;
        }
        let d = bones.dir(frame, joint);
        if d[0] == 0.0 && d[1] == 0.0 {
            return Err(KasError::DegenerateBone { bone: joint });
        }
    }
    let mut pos = Array2::zeros((j, 2));
    let mut known = vec![false; j];
    pos[(root, 0)] = root_position[0];
    pos[(root, 1)] = root_position[1];
    known[root] = true;
    let mut remaining = j - 1;
    while remaining > 0 {
        let mut progressed = false;
        for joint in 0..j {
            if known[joint] {
                continue;
            }
            let p = topo.parent(joint);
            if known[p] {
                let d = bones.dir(frame, joint);
                let l = bones.len(frame, joint);
                pos[(joint, 0)] = pos[(p, 0)] + l * d[0];
                pos[(joint, 1)] = pos[(p, 1)] + l * d[1];
                known[joint] = true;
                remaining -= 1;
                progressed = true;
            }
        }
        debug_assert!(progressed, "topology validated acyclic at construction");
        if !progressed {
            break;
        }
    }
    Ok(pos)
}

/// Named limb composition table: exactly J entries, each a list of bone
/// indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LimbTable {
    entries: Vec<(String, Vec<usize>)>,
}

impl LimbTable {
    pub fn new(entries: Vec<(String, Vec<usize>)>, joint_count: usize) -> Result<Self> {
        if entries.len() != joint_count {
            return Err(KasError::InvalidConfig(format!(
                "limb table must have exactly {joint_count} entries, got {}",
                entries.len()
            )));
        }
        for (name, bones) in &entries {
            if bones.is_empty() {
                return Err(KasError::InvalidConfig(format!(
                    "limb {name:?} has no bones"
                )));
            }
            if let Some(&b) = bones.iter().find(|&&b| b >= joint_count) {
                return Err(KasError::InvalidConfig(format!(
                    "limb {name:?} references bone {b} outside [0, {})",
                    joint_count
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, limb: usize) -> &str {
        &self.entries[limb].0
    }

    pub fn bones(&self, limb: usize) -> &[usize] {
        &self.entries[limb].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.entries
            .iter()
            .map(|(n, b)| (n.as_str(), b.as_slice()))
    }

    /// Parses the override format: one limb per line, `name: b1,b2,...`.
    pub fn parse(text: &str, joint_count: usize) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (name, rest) = line.split_once(':').ok_or_else(|| {
                KasError::InvalidConfig(format!("limb table line {}: missing ':'", lineno + 1))
            })?;
            let bones = rest
                .split(',')
                .map(|s| {
                    s.trim().parse::<usize>().map_err(|_| {
                        KasError::InvalidConfig(format!(
                            "limb table line {}: bad bone index {s:?}",
                            lineno + 1
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            entries.push((name.trim().to_string(), bones));
        }
        Self::new(entries, joint_count)
    }
}

/// The fixed 17-entry limb table for the default topology. `B_j` is the
/// bone whose child joint is `j`; `B0` is the ultra-bone.
pub fn default_limb_table(topo: &SkeletonTopology) -> Result<LimbTable> {
    if !topo.is_default17() {
        return Err(KasError::InvalidTopology(
            "default limb table requires the default 17-joint topology; \
             supply a custom table for other skeletons"
                .into(),
        ));
    }
    let entries: Vec<(String, Vec<usize>)> = [
        ("right_leg", vec![1, 2, 3]),
        ("left_leg", vec![4, 5, 6]),
        ("right_arm", vec![14, 15, 16]),
        ("left_arm", vec![11, 12, 13]),
        ("torso", vec![7, 8, 9, 10]),
        ("right_lower_leg", vec![2, 3]),
        ("left_lower_leg", vec![5, 6]),
        ("right_forearm", vec![15, 16]),
        ("left_forearm", vec![12, 13]),
        ("hyper_lshoulder_rhip", vec![11, 8, 7, 1]),
        ("hyper_rshoulder_lhip", vec![14, 8, 7, 4]),
        ("hyper_rarm_lleg", vec![14, 15, 16, 4, 5, 6]),
        ("hyper_larm_rleg", vec![11, 12, 13, 1, 2, 3]),
        ("shoulder_girdle", vec![11, 14]),
        ("hip_girdle", vec![1, 4]),
        ("head_neck", vec![9, 10]),
        ("ultra", vec![0]),
    ]
    .into_iter()
    .map(|(n, b)| (n.to_string(), b))
    .collect();
    LimbTable::new(entries, topo.joint_count())
}

/// Limb table for the 5-joint toy skeleton of the gradient suite.
pub fn toy5_limb_table(topo: &SkeletonTopology) -> Result<LimbTable> {
    if topo.joint_count() != 5 {
        return Err(KasError::InvalidTopology(
            "toy limb table requires the 5-joint toy skeleton".into(),
        ));
    }
    let entries = [
        ("right_chain", vec![1, 2]),
        ("left_chain", vec![3, 4]),
        ("right_tip", vec![2]),
        ("left_tip", vec![4]),
        ("ultra", vec![0]),
    ]
    .into_iter()
    .map(|(n, b)| (n.to_string(), b))
    .collect();
    LimbTable::new(entries, 5)
}

/// Composer networks for one limb: one feed-forward net per channel, in
/// the order (dir_x, dir_y, len).
pub type LimbComposer = [FfnVars; 3];

/// Fuses bones into limb tokens on the tape.
///
/// For every limb, each channel network maps the limb's `m_i` bone values
/// of that channel to a single output; the three outputs are concatenated
/// as (x-direction, y-direction, length). The result is a frame-major
/// (T*J) x 3 node, differentiable with respect to the composer parameters.
pub fn fuse_limbs(
    tape: &mut Tape,
    bones: &BoneSet,
    table: &LimbTable,
    composers: &[LimbComposer],
) -> Result<Var> {
    let t = bones.frames();
    let limbs = table.len();
    if composers.len() != limbs {
        return Err(KasError::InvalidConfig(format!(
            "{} composers supplied for {limbs} limbs",
            composers.len()
        )));
    }
    let mut per_limb = Vec::with_capacity(limbs);
    for (limb, (name, bone_ids)) in table.iter().enumerate() {
        let m = bone_ids.len();
        // channel order in the composer: dir_x, dir_y, len
        let mut channels = Vec::with_capacity(3);
        for (channel, ffn_vars) in composers[limb].iter().enumerate() {
            let expected = tape.shape(ffn_vars.w1).0;
            if expected != m {
                return Err(KasError::LimbArity {
                    limb: name.to_string(),
                    expected: m,
                    got: expected,
                });
            }
            let mut input = Array2::zeros((t, m));
            for frame in 0..t {
                for (col, &bone) in bone_ids.iter().enumerate() {
                    input[(frame, col)] = match channel {
                        0 => bones.dir(frame, bone)[0],
                        1 => bones.dir(frame, bone)[1],
                        _ => bones.len(frame, bone),
                    };
                }
            }
            let x = tape.constant(input);
            channels.push(crate::nn::ffn(tape, x, ffn_vars)?);
        }
        per_limb.push(tape.concat_cols(&channels)?);
    }
    // limb-major (J*T) x 3 -> frame-major (T*J) x 3
    let stacked = tape.concat_rows(&per_limb)?;
    let mut indices = vec![0usize; t * limbs];
    for frame in 0..t {
        for limb in 0..limbs {
            indices[frame * limbs + limb] = limb * t + frame;
        }
    }
    tape.gather_rows(stacked, indices)
}
