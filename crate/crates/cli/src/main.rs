//! Command-line surface: synthetic data generation, training, evaluation,
//! inference, gradient checking and a self-test suite.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, missing files,
//! malformed inputs), 2 numerical failure (divergence, gradcheck fail).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kaslift_core::{
    builtin_templates, check_model_gradients, default_limb_table, default_suite, extract_bones,
    fit, generate_clip, history_csv, load_clip, load_config, mpjpe, p_mpjpe, project_to_2d,
    reconstruct_joints, report, save_clip, Camera, ClipMetrics, ClipPair, GradCheckOptions,
    KasError, Model, ModelConfig, Pose3DClip, Result, RunConfig, SkeletonTopology, SuiteConfig,
    TrainConfig, Trainer, BONE_EPS,
};

#[derive(Parser)]
#[command(name = "kaslift", version, about = "Kinematic 2D-to-3D pose lifting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Configuration file with "key = value" lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for all randomness in the subcommand.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic clip suite into a directory.
    Synth {
        #[command(flatten)]
        common: CommonOpts,
        /// Output directory; train/ and eval/ subdirectories are created.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Frames per clip.
        #[arg(long, value_name = "N", default_value_t = 27)]
        frames: usize,
        /// Pixel noise standard deviation for the 2D projections.
        #[arg(long, value_name = "PX", default_value_t = 2.0)]
        noise_std: f64,
        /// Training clips per motion template.
        #[arg(long, value_name = "N", default_value_t = 20)]
        train_per_template: usize,
        /// Held-out clips per motion template.
        #[arg(long, value_name = "N", default_value_t = 7)]
        eval_per_template: usize,
    },
    /// Train a model on clip files and write a checkpoint plus history.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Data directory holding train/ and optionally eval/ clip files.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory for checkpoint.kasf and history.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Disable mirror augmentation.
        #[arg(long)]
        no_flip: bool,
    },
    /// Evaluate a checkpoint on clip files and print a metrics report.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint file.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Directory of clip files (or one with an eval/ subdirectory).
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Optional CSV report destination.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Align without the scale factor in the Procrustes step.
        #[arg(long)]
        no_scale_align: bool,
    },
    /// Lift one 2D clip file to 3D.
    Infer {
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint file.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Input clip file providing the 2D sequence.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Output clip file for the predicted 3D sequence.
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Finite-difference check of a freshly seeded tiny model.
    Gradcheck {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run the built-in oracle suite across all modules.
    Selftest {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("KASLIFT_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: KASLIFT_THREADS must be a positive integer, got {threads:?}");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own exit code conventions differ; validation is 1 here
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return ExitCode::from(if is_help { 0 } else { 1 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &KasError) -> u8 {
    match e {
        KasError::Diverged { .. } | KasError::NonFinite { .. } => 2,
        _ => 1,
    }
}

fn load_run_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(KasError::InvalidConfig(format!(
                    "config file not found: {}",
                    path.display()
                )));
            }
            load_config(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn clip_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(KasError::InvalidConfig(format!(
            "clip directory not found: {}",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "kasf"))
        .collect();
    files.sort();
    Ok(files)
}

fn load_clips(dir: &Path) -> Result<Vec<ClipPair>> {
    let files = clip_files(dir)?;
    if files.is_empty() {
        return Err(KasError::InvalidConfig(format!(
            "no .kasf clip files in {}",
            dir.display()
        )));
    }
    files.iter().map(|p| load_clip(p)).collect()
}

fn write_suite(clips: &[ClipPair], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut counters: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for clip in clips {
        let n = counters.entry(clip.action.as_str()).or_insert(0);
        save_clip(clip, &dir.join(format!("{}_{:03}.kasf", clip.action, n)))?;
        *n += 1;
    }
    Ok(())
}

fn build_model(cfg: &RunConfig, seed: u64) -> Result<Model> {
    let topo = SkeletonTopology::default17();
    let table = default_limb_table(&topo)?;
    Model::new(cfg.model, topo, table, seed)
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Synth {
            common,
            out,
            frames,
            noise_std,
            train_per_template,
            eval_per_template,
        } => {
            let suite = SuiteConfig {
                frames,
                train_per_template,
                eval_per_template,
                noise_std,
                camera: Camera::default(),
                seed: common.seed.unwrap_or(0),
            };
            let (train, eval) = default_suite(&suite)?;
            write_suite(&train, &out.join("train"))?;
            write_suite(&eval, &out.join("eval"))?;
            println!(
                "synth: wrote {} train and {} eval clips to {}",
                train.len(),
                eval.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Train {
            common,
            data,
            out,
            no_flip,
        } => {
            let mut cfg = load_run_config(&common)?;
            if no_flip {
                cfg.train.flip_augment = false;
            }
            let train_clips = load_clips(&data.join("train"))?;
            let eval_dir = data.join("eval");
            let eval_clips = if eval_dir.is_dir() {
                load_clips(&eval_dir)?
            } else {
                Vec::new()
            };
            let model = build_model(&cfg, cfg.train.seed)?;
            let result = fit(model, &train_clips, &eval_clips, &cfg.train)?;
            std::fs::create_dir_all(&out)?;
            result.model.save_checkpoint(&out.join("checkpoint.kasf"))?;
            std::fs::write(out.join("history.csv"), history_csv(&result.history))?;
            let best = result
                .history
                .iter()
                .map(|r| r.eval_mpjpe_mm)
                .fold(f64::INFINITY, f64::min);
            println!(
                "train: {} epochs, best eval MPJPE {:.3} mm, checkpoint in {}",
                result.history.len(),
                best,
                out.display()
            );
            Ok(0)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            no_scale_align,
        } => {
            let cfg = load_run_config(&common)?;
            if !checkpoint.is_file() {
                return Err(KasError::InvalidConfig(format!(
                    "checkpoint not found: {}",
                    checkpoint.display()
                )));
            }
            let topo = SkeletonTopology::default17();
            let table = default_limb_table(&topo)?;
            let model = Model::from_checkpoint(cfg.model, topo, table, &checkpoint)?;
            let eval_dir = data.join("eval");
            let clips = load_clips(if eval_dir.is_dir() { &eval_dir } else { &data })?;
            let mut per_clip = Vec::with_capacity(clips.len());
            for pair in &clips {
                let centered = kaslift_core::center_on_root(&pair.pose3d, &model.topo)?;
                let (pred, _) = model.forward(&pair.pose2d)?;
                let (p, _skipped) = p_mpjpe(&pred, &centered, !no_scale_align)?;
                per_clip.push(ClipMetrics {
                    action: pair.action.clone(),
                    mpjpe_mm: mpjpe(&pred, &centered)?,
                    p_mpjpe_mm: p,
                });
            }
            let metrics = report(&per_clip)?;
            print!("{}", metrics.render());
            if let Some(path) = out {
                std::fs::write(&path, metrics.to_csv())?;
                println!("eval: report written to {}", path.display());
            }
            Ok(0)
        }
        Command::Infer {
            common,
            checkpoint,
            input,
            out,
        } => {
            let cfg = load_run_config(&common)?;
            if !checkpoint.is_file() || !input.is_file() {
                return Err(KasError::InvalidConfig(format!(
                    "missing file: {}",
                    if checkpoint.is_file() { &input } else { &checkpoint }.display()
                )));
            }
            let topo = SkeletonTopology::default17();
            let table = default_limb_table(&topo)?;
            let model = Model::from_checkpoint(cfg.model, topo, table, &checkpoint)?;
            let pair = load_clip(&input)?;
            let (pred, _) = model.forward(&pair.pose2d)?;
            save_clip(
                &ClipPair {
                    pose2d: pair.pose2d,
                    pose3d: pred,
                    action: pair.action,
                },
                &out,
            )?;
            println!("infer: wrote {}", out.display());
            Ok(0)
        }
        Command::Gradcheck { common } => {
            let seed = common.seed.unwrap_or(0);
            let report = tiny_model_gradcheck(seed)?;
            print!("{}", report.render());
            Ok(if report.passed() { 0 } else { 2 })
        }
        Command::Selftest { common } => {
            let seed = common.seed.unwrap_or(0);
            match selftest(seed) {
                Ok(()) => {
                    println!("selftest: PASS");
                    Ok(0)
                }
                Err(e) => {
                    eprintln!("selftest: FAIL ({e})");
                    Ok(2)
                }
            }
        }
    }
}

fn random_pair(frames: usize, joints: usize, seed: u64) -> ClipPair {
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pose2d = kaslift_core::Pose2DClip::new(Array3::from_shape_fn(
        (frames, joints, 3),
        |(_, _, c)| {
            if c == 2 {
                rng.gen_range(0.0..1.0)
            } else {
                rng.gen_range(-1.0..1.0)
            }
        },
    ))
    .expect("random 2D clip");
    let pose3d = Pose3DClip::new(Array3::from_shape_fn((frames, joints, 3), |_| {
        rng.gen_range(-100.0..100.0)
    }))
    .expect("random 3D clip");
    ClipPair {
        pose2d,
        pose3d,
        action: "selftest".into(),
    }
}

fn tiny_model_gradcheck(seed: u64) -> Result<kaslift_core::GradCheckReport> {
    let topo = SkeletonTopology::toy5();
    let table = kaslift_core::toy5_limb_table(&topo)?;
    let config = ModelConfig::tiny();
    let mut model = Model::new(config, topo, table, seed)?;
    let pair = random_pair(config.frames, config.joints, seed ^ 0xABCD);
    let opts = GradCheckOptions {
        tolerance: 1e-3,
        max_probes: Some(4),
        seed,
        ..Default::default()
    };
    check_model_gradients(&mut model, &pair, &opts)
}

fn ensure(cond: bool, what: &str) -> Result<()> {
    if cond {
        println!("selftest {what}: ok");
        Ok(())
    } else {
        Err(KasError::InvalidConfig(format!("check failed: {what}")))
    }
}

/// Quick oracle pass over every module; any failure is a numerical failure.
fn selftest(seed: u64) -> Result<()> {
    // kinematics: extract/reconstruct roundtrip on a synthetic clip
    let topo = SkeletonTopology::default17();
    let template = &builtin_templates()[0];
    let clip3d = generate_clip(template, 9, seed)?;
    let clip2d = project_to_2d(&clip3d, &Camera::default(), 0.0, seed)?;
    let bones = extract_bones(&clip2d, &topo, BONE_EPS)?;
    let mut worst = 0.0f64;
    let (t, j, _) = clip2d.data().dim();
    let root = topo.root();
    for frame in 0..t {
        let origin = [
            clip2d.data()[(frame, root, 0)],
            clip2d.data()[(frame, root, 1)],
        ];
        let rebuilt = reconstruct_joints(&bones, frame, origin, &topo)?;
        for joint in 0..j {
            for c in 0..2 {
                let d = rebuilt[(joint, c)] - clip2d.data()[(frame, joint, c)];
                worst = worst.max(d.abs());
            }
        }
    }
    ensure(worst < 1e-9, "bone roundtrip")?;

    // synth: projection determinism and confidence bounds
    let noisy = project_to_2d(&clip3d, &Camera::default(), 3.0, seed)?;
    let again = project_to_2d(&clip3d, &Camera::default(), 3.0, seed)?;
    ensure(noisy.data() == again.data(), "projection determinism")?;
    ensure(
        noisy
            .data()
            .iter()
            .skip(2)
            .step_by(3)
            .all(|&c| (0.0..=1.0).contains(&c)),
        "confidence range",
    )?;

    // metrics: alignment removes a rigid motion
    let centered = kaslift_core::center_on_root(&clip3d, &topo)?;
    let (p, _) = p_mpjpe(&centered, &centered, true)?;
    ensure(p.abs() < 1e-9, "self alignment")?;

    // model: blending weights on a fresh tiny model are row-stochastic
    let toy = SkeletonTopology::toy5();
    let table = kaslift_core::toy5_limb_table(&toy)?;
    let config = ModelConfig::tiny();
    let model = Model::new(config, toy, table, seed)?;
    let pair = random_pair(config.frames, config.joints, seed ^ 0x77);
    let (pred, aux) = model.forward(&pair.pose2d)?;
    ensure(pred.data().iter().all(|v| v.is_finite()), "finite forward")?;
    let sums_ok = aux.alphas.iter().all(|a| {
        a.rows()
            .into_iter()
            .all(|r| (r.sum() - 1.0).abs() < 1e-9 && r.iter().all(|&v| v >= 0.0))
    });
    ensure(sums_ok, "blend weights")?;

    // training: one optimizer step lowers the batch loss on a fixed batch
    let mut trainer = Trainer::new(model, TrainConfig::default().optimizer);
    let batch = [&pair];
    let first = trainer.step(&batch, 1e-4)?;
    for _ in 0..4 {
        trainer.step(&batch, 1e-4)?;
    }
    let last = trainer.step(&batch, 1e-4)?;
    ensure(last < first, "loss decreases")?;

    // autodiff: full tiny-model finite differences
    let report = tiny_model_gradcheck(seed)?;
    ensure(report.passed(), "gradcheck")?;
    Ok(())
}
