//! Losses and the training loop: summed position + velocity loss, seeded
//! shuffling, optional mirror augmentation, warmup/plateau learning rates,
//! early stopping and best-checkpoint selection.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container::ClipPair;
use crate::error::{KasError, Result};
use crate::metrics::mpjpe;
use crate::model::{flatten_clip, Model};
use crate::optim::{lr_schedule, AdamWConfig};
use crate::pose::{center_on_root, horizontal_flip, Pose3DClip};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            batch_size: 32,
            early_stop_patience: 10,
            optimizer: AdamWConfig::default(),
            seed: 0,
            flip_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(KasError::InvalidConfig(
                "epochs, batch_size and early_stop_patience must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_clip_shapes(pred: &Pose3DClip, gt: &Pose3DClip) -> Result<()> {
    if pred.data().dim() != gt.data().dim() {
        return Err(KasError::ShapeMismatch {
            expected: format!("{:?}", gt.data().dim()),
            got: format!("{:?}", pred.data().dim()),
        });
    }
    Ok(())
}

/// Sum over frames and joints of per-joint Euclidean errors (not averaged).
pub fn loss_pose(pred: &Pose3DClip, gt: &Pose3DClip) -> Result<f64> {
    check_clip_shapes(pred, gt)?;
    let (t, j, _) = pred.data().dim();
    let mut sum = 0.0;
    for frame in 0..t {
        for joint in 0..j {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = pred.data()[(frame, joint, c)] - gt.data()[(frame, joint, c)];
                d2 += d * d;
            }
            sum += d2.sqrt();
        }
    }
    Ok(sum)
}

/// Sum over frame pairs and joints of per-joint velocity errors, with the
/// velocity at frame t being the difference to frame t-1. Zero for T = 1.
pub fn loss_velocity(pred: &Pose3DClip, gt: &Pose3DClip) -> Result<f64> {
    check_clip_shapes(pred, gt)?;
    let (t, j, _) = pred.data().dim();
    let mut sum = 0.0;
    for frame in 1..t {
        for joint in 0..j {
            let mut d2 = 0.0;
            for c in 0..3 {
                let vp = pred.data()[(frame, joint, c)] - pred.data()[(frame - 1, joint, c)];
                let vg = gt.data()[(frame, joint, c)] - gt.data()[(frame - 1, joint, c)];
                let d = vp - vg;
                d2 += d * d;
            }
            sum += d2.sqrt();
        }
    }
    Ok(sum)
}

pub fn total_loss(pred: &Pose3DClip, gt: &Pose3DClip, lambda_v: f64) -> Result<f64> {
    Ok(loss_pose(pred, gt)? + lambda_v * loss_velocity(pred, gt)?)
}

/// Tape version of the total loss for a frame-major (T*J) x 3 prediction
/// node. `gt_flat` must be root-centered ground truth in the same layout.
pub fn total_loss_var(
    tape: &mut Tape,
    pred: Var,
    gt_flat: &Array2<f64>,
    frames: usize,
    joints: usize,
    lambda_v: f64,
) -> Result<Var> {
    if tape.shape(pred) != (frames * joints, 3) || gt_flat.dim() != (frames * joints, 3) {
        return Err(KasError::ShapeMismatch {
            expected: format!("({}, 3)", frames * joints),
            got: format!("{:?} vs {:?}", tape.shape(pred), gt_flat.dim()),
        });
    }
    let gt = tape.constant(gt_flat.clone());
    let diff = tape.sub(pred, gt)?;
    let norms = tape.row_norms(diff);
    let pose = tape.sum_all(norms);
    if frames == 1 || lambda_v == 0.0 {
        return Ok(pose);
    }
    let tail = tape.slice_rows(pred, joints, (frames - 1) * joints)?;
    let head = tape.slice_rows(pred, 0, (frames - 1) * joints)?;
    let vel_pred = tape.sub(tail, head)?;
    let mut vel_gt = Array2::zeros(((frames - 1) * joints, 3));
    for r in 0..(frames - 1) * joints {
        for c in 0..3 {
            vel_gt[(r, c)] = gt_flat[(r + joints, c)] - gt_flat[(r, c)];
        }
    }
    let vel_gt = tape.constant(vel_gt);
    let vdiff = tape.sub(vel_pred, vel_gt)?;
    let vnorms = tape.row_norms(vdiff);
    let vel = tape.sum_all(vnorms);
    let weighted = tape.scale(vel, lambda_v);
    tape.add(pose, weighted)
}

/// One epoch's line in the history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_mpjpe_mm: f64,
    pub lr: f64,
}

/// UTF-8 comma-separated history: epoch, train_loss, eval_mpjpe_mm, lr.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch, train_loss, eval_mpjpe_mm, lr\n");
    for r in history {
        out.push_str(&format!(
            "{}, {:.6}, {:.6}, {:.6e}\n",
            r.epoch, r.train_loss, r.eval_mpjpe_mm, r.lr
        ));
    }
    out
}

/// Owns a model during optimization. Batching, evaluation and the epoch
/// loop all go through `step` and `eval_mpjpe` so callers can also drive
/// the optimizer step by step.
pub struct Trainer {
    pub model: Model,
    pub optimizer: AdamWConfig,
}

impl Trainer {
    pub fn new(model: Model, optimizer: AdamWConfig) -> Self {
        Self { model, optimizer }
    }

    /// One optimizer step over a batch. Ground truth is root-centered here;
    /// the batch loss is the mean of per-clip losses. Returns that loss.
    pub fn step(&mut self, batch: &[&ClipPair], lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(KasError::EmptyTrainingSet);
        }
        let share = 1.0 / batch.len() as f64;
        let results: Vec<Result<(f64, Vec<(String, Array2<f64>)>)>> = batch
            .par_iter()
            .map(|pair| {
                let centered = center_on_root(&pair.pose3d, &self.model.topo)?;
                let gt_flat = flatten_clip(centered.data());
                let mut tape = Tape::new();
                let fwd = self.model.build_forward(&mut tape, &pair.pose2d)?;
                let loss = total_loss_var(
                    &mut tape,
                    fwd.output,
                    &gt_flat,
                    self.model.config.frames,
                    self.model.config.joints,
                    self.model.config.lambda_v,
                )?;
                let scaled = tape.scale(loss, share);
                let grads = tape.backward(scaled);
                Ok((tape.value(loss)[(0, 0)], tape.param_grads(&grads)))
            })
            .collect();

        self.model.store.zero_grads();
        let mut batch_loss = 0.0;
        for result in results {
            let (loss, grads) = result?;
            batch_loss += loss * share;
            for (name, g) in grads {
                self.model.store.accumulate_grad(&name, &g)?;
            }
        }
        if !batch_loss.is_finite() {
            return Err(KasError::Diverged { epoch: 0, batch: 0 });
        }
        let cfg = AdamWConfig {
            lr,
            ..self.optimizer
        };
        self.model.store.adamw_step(&cfg)?;
        Ok(batch_loss)
    }

    /// Mean MPJPE of the model over clips, against root-centered targets.
    pub fn eval_mpjpe(&self, clips: &[ClipPair]) -> Result<f64> {
        if clips.is_empty() {
            return Err(KasError::EmptyTrainingSet);
        }
        let errors: Vec<Result<f64>> = clips
            .par_iter()
            .map(|pair| {
                let centered = center_on_root(&pair.pose3d, &self.model.topo)?;
                let (pred, _) = self.model.forward(&pair.pose2d)?;
                mpjpe(&pred, &centered)
            })
            .collect();
        let mut sum = 0.0;
        for e in errors {
            sum += e?;
        }
        Ok(sum / clips.len() as f64)
    }
}

pub struct FitResult {
    /// Model carrying the best-evaluation parameters.
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Full training loop: seeded shuffling, optional per-sample mirror
/// augmentation with probability 1/2, batching, warmup/plateau learning
/// rates, early stopping on the evaluation MPJPE, best-checkpoint
/// selection. Falls back to the training clips as the evaluation set when
/// `eval_clips` is empty.
pub fn fit(
    model: Model,
    train_clips: &[ClipPair],
    eval_clips: &[ClipPair],
    cfg: &TrainConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if train_clips.is_empty() {
        return Err(KasError::EmptyTrainingSet);
    }
    let eval_set: &[ClipPair] = if eval_clips.is_empty() {
        train_clips
    } else {
        eval_clips
    };
    let mut trainer = Trainer::new(model, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut eval_history: Vec<f64> = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_values = trainer.model.store.clone_values();
    let mut bad_epochs = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, &eval_history);
        let mut order: Vec<usize> = (0..train_clips.len()).collect();
        order.shuffle(&mut rng);
        // augmentation decisions are drawn in shuffled order so the whole
        // epoch is a function of the seed
        let samples: Vec<ClipPair> = order
            .iter()
            .map(|&i| {
                let pair = &train_clips[i];
                if cfg.flip_augment && rng.gen_bool(0.5) {
                    let (p2, p3) =
                        horizontal_flip(&pair.pose2d, &pair.pose3d, &trainer.model.topo)?;
                    Ok(ClipPair {
                        pose2d: p2,
                        pose3d: p3,
                        action: pair.action.clone(),
                    })
                } else {
                    Ok(pair.clone())
                }
            })
            .collect::<Result<_>>()?;

        let mut loss_sum = 0.0;
        let mut clip_count = 0usize;
        for (batch_idx, batch) in samples.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&ClipPair> = batch.iter().collect();
            let loss = trainer.step(&refs, lr).map_err(|e| match e {
                KasError::Diverged { .. } => KasError::Diverged {
                    epoch,
                    batch: batch_idx,
                },
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
            clip_count += batch.len();
        }
        let train_loss = loss_sum / clip_count as f64;

        let eval = trainer.eval_mpjpe(eval_set)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            eval_mpjpe_mm: eval,
            lr,
        });
        eval_history.push(eval);

        if eval < best {
            best = eval;
            best_values = trainer.model.store.clone_values();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.early_stop_patience {
                break;
            }
        }
    }

    trainer.model.store.restore_values(&best_values)?;
    Ok(FitResult {
        model: trainer.model,
        history,
    })
}
