//! Synthetic motion generation: forward kinematics over the 17-joint tree
//! with sinusoidal joint angles, pinhole projection with detector-style
//! noise, and the default training/evaluation suite.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::container::ClipPair;
use crate::error::{KasError, Result};
use crate::pose::{Pose2DClip, Pose3DClip, SkeletonTopology};

/// Confidence decay length in pixels for the projected noise magnitude.
pub const CONFIDENCE_SCALE_PX: f64 = 10.0;

/// Rest skeleton for the 17-joint tree: per-joint unit offset direction from
/// the parent and bone length in millimeters. Root entries are zero.
fn rest_skeleton() -> (Vec<[f64; 3]>, Vec<f64>) {
    // y up, x to the subject's left, z forward
    let dirs: Vec<[f64; 3]> = vec![
        [0.0, 0.0, 0.0],  // pelvis
        [-1.0, 0.0, 0.0], // r_hip
        [0.0, -1.0, 0.0], // r_knee
        [0.0, -1.0, 0.0], // r_ankle
        [1.0, 0.0, 0.0],  // l_hip
        [0.0, -1.0, 0.0], // l_knee
        [0.0, -1.0, 0.0], // l_ankle
        [0.0, 1.0, 0.0],  // spine
        [0.0, 1.0, 0.0],  // thorax
        [0.0, 1.0, 0.0],  // neck
        [0.0, 1.0, 0.0],  // head
        [1.0, 0.0, 0.0],  // l_shoulder
        [0.0, -1.0, 0.0], // l_elbow
        [0.0, -1.0, 0.0], // l_wrist
        [-1.0, 0.0, 0.0], // r_shoulder
        [0.0, -1.0, 0.0], // r_elbow
        [0.0, -1.0, 0.0], // r_wrist
    ];
    let lens: Vec<f64> = vec![
        0.0, 130.0, 450.0, 440.0, 130.0, 450.0, 440.0, 250.0, 250.0, 120.0, 120.0, 180.0, 280.0,
        250.0, 180.0, 280.0, 250.0,
    ];
    (dirs, lens)
}

/// Per-joint rotation axes used by every template: legs and arms swing in
/// the sagittal plane (about x), the trunk twists about y.
fn joint_axes() -> Vec<[f64; 3]> {
    vec![
        [0.0, 1.0, 0.0], // pelvis
        [1.0, 0.0, 0.0], // r_hip
        [1.0, 0.0, 0.0], // r_knee
        [1.0, 0.0, 0.0], // r_ankle
        [1.0, 0.0, 0.0], // l_hip
        [1.0, 0.0, 0.0], // l_knee
        [1.0, 0.0, 0.0], // l_ankle
        [0.0, 1.0, 0.0], // spine
        [0.0, 1.0, 0.0], // thorax
        [1.0, 0.0, 0.0], // neck
        [1.0, 0.0, 0.0], // head
        [1.0, 0.0, 0.0], // l_shoulder
        [1.0, 0.0, 0.0], // l_elbow
        [1.0, 0.0, 0.0], // l_wrist
        [1.0, 0.0, 0.0], // r_shoulder
        [1.0, 0.0, 0.0], // r_elbow
        [1.0, 0.0, 0.0], // r_wrist
    ]
}

#[derive(Debug, Clone)]
pub struct MotionTemplate {
    pub name: String,
    /// Per-joint angular amplitude in radians.
    pub amplitude: Vec<f64>,
    /// Per-joint frequency in cycles per clip; must be >= 0.
    pub frequency: Vec<f64>,
    /// Per-joint phase in radians.
    pub phase: Vec<f64>,
    /// Per-joint rotation axis for the sinusoidal angle.
    pub axis: Vec<[f64; 3]>,
    /// Per-joint unit offset from the parent in the rest pose.
    pub rest_dir: Vec<[f64; 3]>,
    /// Fixed 3D bone lengths in millimeters.
    pub bone_len: Vec<f64>,
    /// Peak root displacement per axis in millimeters over one clip cycle.
    pub root_amplitude: [f64; 3],
}

impl MotionTemplate {
    pub fn new(
        name: &str,
        amplitude: Vec<f64>,
        frequency: Vec<f64>,
        phase: Vec<f64>,
        root_amplitude: [f64; 3],
    ) -> Result<Self> {
        let (rest_dir, bone_len) = rest_skeleton();
        let j = rest_dir.len();
        if amplitude.len() != j || frequency.len() != j || phase.len() != j {
            return Err(KasError::InvalidConfig(format!(
                "template {name}: per-joint arrays must have length {j}"
            )));
        }
        if frequency.iter().any(|&f| !(f >= 0.0)) {
            return Err(KasError::InvalidConfig(format!(
                "template {name}: frequencies must be >= 0"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            amplitude,
            frequency,
            phase,
            axis: joint_axes(),
            rest_dir,
            bone_len,
            root_amplitude,
        })
    }
}

fn spread(base: f64, joints: &[usize], joint_count: usize) -> Vec<f64> {
    let mut v = vec![0.0; joint_count];
    for &j in joints {
        v[j] = base;
    }
    v
}

/// The five built-in motion templates.
pub fn builtin_templates() -> Vec<MotionTemplate> {
    let j = 17;
    let legs = [1usize, 2, 4, 5];
    let arms = [11usize, 12, 14, 15];
    let all_limbs = [1usize, 2, 4, 5, 11, 12, 14, 15];
    let mut out = Vec::new();

    // jump: symmetric leg flexion, arms counter-swing
    let mut amp = spread(0.5, &legs, j);
    for &a in &arms {
        amp[a] = 0.35;
    }
    let mut phase = vec![0.0; j];
    for &a in &arms {
        phase[a] = std::f64::consts::PI;
    }
    out.push(MotionTemplate::new("jump", amp, vec![1.0; j], phase, [0.0, 180.0, 0.0]).unwrap());

    // throw: one fast arm, trunk twist
    let mut amp = spread(0.9, &[14, 15], j);
    amp[7] = 0.25;
    amp[8] = 0.25;
    amp[11] = 0.2;
    let mut freq = vec![1.0; j];
    freq[14] = 1.5;
    freq[15] = 1.5;
    out.push(MotionTemplate::new("throw", amp, freq, vec![0.0; j], [60.0, 0.0, 40.0]).unwrap());

    // kick: one leg drives, the other stabilizes
    let mut amp = spread(0.8, &[1, 2], j);
    amp[4] = 0.2;
    amp[5] = 0.15;
    amp[11] = 0.3;
    amp[14] = 0.3;
    let mut phase = vec![0.0; j];
    phase[4] = std::f64::consts::PI;
    out.push(MotionTemplate::new("kick", amp, vec![1.0; j], phase, [0.0, 40.0, 120.0]).unwrap());

    // sprint: alternating legs and arms at higher frequency
    let mut amp = spread(0.6, &all_limbs, j);
    amp[9] = 0.1;
    let mut phase = vec![0.0; j];
    for &p in &[4usize, 5, 14, 15] {
        phase[p] = std::f64::consts::PI;
    }
    out.push(MotionTemplate::new("sprint", amp, vec![2.0; j], phase, [0.0, 30.0, 400.0]).unwrap());

    // swing: slow whole-body sway about the trunk
    let mut amp = spread(0.3, &all_limbs, j);
    amp[0] = 0.4;
    amp[7] = 0.3;
    amp[8] = 0.3;
    out.push(MotionTemplate::new("swing", amp, vec![0.5; j], vec![0.0; j], [150.0, 0.0, 0.0]).unwrap());

    out
}

fn rotation(axis: [f64; 3], angle: f64) -> nalgebra::Rotation3<f64> {
    let v = nalgebra::Vector3::new(axis[0], axis[1], axis[2]);
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(v), angle)
}

/// Forward kinematics over the 17-joint tree with sinusoidal joint angles.
/// Amplitudes and phases receive small seeded jitter so clips from the same
/// template differ; output is root-centered. Deterministic in the seed.
pub fn generate_clip(template: &MotionTemplate, frames: usize, seed: u64) -> Result<Pose3DClip> {
    if frames == 0 {
        return Err(KasError::InvalidConfig("frames must be >= 1".into()));
    }
    let topo = SkeletonTopology::default17();
    let j = topo.joint_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp: Vec<f64> = template
        .amplitude
        .iter()
        .map(|&a| a * (1.0 + rng.gen_range(-0.1..0.1)))
        .collect();
    let phase: Vec<f64> = template
        .phase
        .iter()
        .map(|&p| p + rng.gen_range(-0.2..0.2))
        .collect();

    let tau = std::f64::consts::TAU;
    let mut data = Array3::zeros((frames, j, 3));
    for t in 0..frames {
        let s = t as f64 / frames as f64;
        let mut pos = vec![nalgebra::Vector3::zeros(); j];
        let mut rot = vec![nalgebra::Rotation3::identity(); j];
        // root path: washed out by centering but kept so the same template
        // drives both the 3D target and a moving camera subject
        pos[topo.root()] = nalgebra::Vector3::new(
            template.root_amplitude[0] * (tau * s).sin(),
            template.root_amplitude[1] * (tau * s).sin(),
            template.root_amplitude[2] * s,
        );
        for joint in 0..j {
            let angle = amp[joint] * (tau * template.frequency[joint] * s + phase[joint]).sin();
            if joint == topo.root() {
                rot[joint] = rotation(template.axis[joint], angle);
                continue;
            }
            let parent = topo.parent(joint);
            rot[joint] = rot[parent] * rotation(template.axis[joint], angle);
            let d = template.rest_dir[joint];
            let offset = rot[joint] * nalgebra::Vector3::new(d[0], d[1], d[2])
                * template.bone_len[joint];
            pos[joint] = pos[parent] + offset;
        }
        let root = pos[topo.root()];
        for joint in 0..j {
            let p = pos[joint] - root;
            data[(t, joint, 0)] = p.x;
            data[(t, joint, 1)] = p.y;
            data[(t, joint, 2)] = p.z;
        }
    }
    Pose3DClip::new(data)
}

/// Pinhole camera looking down +z from the origin; the subject is pushed
/// `distance` millimeters in front of it.
#[derive(Debug, Clone, Copy)]
pub struct Camera {
    pub focal: f64,
    pub center: (f64, f64),
    pub distance: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            focal: 1000.0,
            center: (500.0, 500.0),
            distance: 4000.0,
        }
    }
}

/// Pinhole projection with seeded Gaussian pixel noise. Confidence is
/// exp(-(noise magnitude)/scale) clamped to [0,1]; pixel coordinates are
/// normalized to [-1,1] by the image center.
pub fn project_to_2d(
    clip: &Pose3DClip,
    camera: &Camera,
    noise_std: f64,
    seed: u64,
) -> Result<Pose2DClip> {
    if !(noise_std >= 0.0) || camera.focal <= 0.0 || camera.center.0 <= 0.0
        || camera.center.1 <= 0.0
    {
        return Err(KasError::InvalidConfig(
            "noise_std must be >= 0 and camera intrinsics positive".into(),
        ));
    }
    let (t, j, _) = clip.data().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = Array3::zeros((t, j, 3));
    for frame in 0..t {
        for joint in 0..j {
            let z = clip.data()[(frame, joint, 2)] + camera.distance;
            if z <= 0.0 {
                return Err(KasError::BehindCamera { frame });
            }
            let u = camera.focal * clip.data()[(frame, joint, 0)] / z + camera.center.0;
            let v = camera.focal * clip.data()[(frame, joint, 1)] / z + camera.center.1;
            let (nu, nv) = if noise_std > 0.0 {
                (normal.sample(&mut rng), normal.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            let mag = (nu * nu + nv * nv).sqrt();
            let conf = (-mag / CONFIDENCE_SCALE_PX).exp().clamp(0.0, 1.0);
            out[(frame, joint, 0)] = (u + nu - camera.center.0) / camera.center.0;
            out[(frame, joint, 1)] = (v + nv - camera.center.1) / camera.center.1;
            out[(frame, joint, 2)] = conf;
        }
    }
    Pose2DClip::new(out)
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub frames: usize,
    pub train_per_template: usize,
    pub eval_per_template: usize,
    pub noise_std: f64,
    pub camera: Camera,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            frames: 27,
            train_per_template: 20,
            eval_per_template: 7,
            noise_std: 2.0,
            camera: Camera::default(),
            seed: 0,
        }
    }
}

fn make_clips(
    templates: &[MotionTemplate],
    count: usize,
    cfg: &SuiteConfig,
    salt: u64,
) -> Result<Vec<ClipPair>> {
    let jobs: Vec<(usize, usize)> = (0..templates.len())
        .flat_map(|ti| (0..count).map(move |ci| (ti, ci)))
        .collect();
    jobs.par_iter()
        .map(|&(ti, ci)| {
            let clip_seed = cfg
                .seed
                .wrapping_add(salt)
                .wrapping_add((ti as u64) << 32)
                .wrapping_add(ci as u64);
            let pose3d = generate_clip(&templates[ti], cfg.frames, clip_seed)?;
            let pose2d = project_to_2d(&pose3d, &cfg.camera, cfg.noise_std, clip_seed ^ 0x9e37)?;
            Ok(ClipPair {
                pose2d,
                pose3d,
                action: templates[ti].name.clone(),
            })
        })
        .collect()
}

/// The default synthetic suite: every built-in template contributes
/// `train_per_template` training clips and `eval_per_template` held-out
/// clips. Deterministic in the seed.
pub fn default_suite(cfg: &SuiteConfig) -> Result<(Vec<ClipPair>, Vec<ClipPair>)> {
    let templates = builtin_templates();
    let train = make_clips(&templates, cfg.train_per_template, cfg, 0)?;
    let eval = make_clips(&templates, cfg.eval_per_template, cfg, 0x5eed_0000_0000)?;
    Ok((train, eval))
}
