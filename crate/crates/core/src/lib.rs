//! 2D-to-3D human pose lifting with kinematic bone features, a three-stream
//! spatio-temporal transformer, and a self-contained reverse-mode autodiff
//! kernel over dense matrices.

pub mod config;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod kinematics;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pose;
pub mod synth;
pub mod tape;
pub mod training;

pub use config::{load_config, parse_config, RunConfig};
pub use container::{load_clip, save_clip, ClipPair, Container};
pub use error::{KasError, Result};
pub use gradcheck::{
    check_gradients, check_model_gradients, GradCheckOptions, GradCheckReport,
};
pub use kinematics::{
    default_limb_table, extract_bones, fuse_limbs, reconstruct_joints, toy5_limb_table,
    BoneSet, LimbTable, BONE_EPS,
};
pub use metrics::{mpjpe, p_mpjpe, procrustes_align, report, ClipMetrics, MetricsReport};
pub use model::{
    load_checkpoint, save_checkpoint, ForwardAux, Model, ModelConfig,
};
pub use optim::{AdamWConfig, ParameterStore};
pub use pose::{
    center_on_root, horizontal_flip, Pose2DClip, Pose3DClip, SkeletonTopology,
};
pub use synth::{
    builtin_templates, default_suite, generate_clip, project_to_2d, Camera, MotionTemplate,
    SuiteConfig,
};
pub use tape::{Gradients, Tape, Var};
pub use training::{
    fit, history_csv, loss_pose, loss_velocity, total_loss, total_loss_var, EpochRecord,
    FitResult, TrainConfig, Trainer,
};
