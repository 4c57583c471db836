//! MPJPE and Procrustes-aligned P-MPJPE, plus per-action aggregation.
//!
//! Distances are reported in the unit of the input clips (millimeters for
//! everything produced by the synthetic generator). Alignment is a
//! similarity transform (rotation + translation + uniform scale) with an
//! optional no-scale mode.

use nalgebra::Matrix3;
use ndarray::Array2;

use crate::error::{KasError, Result};
use crate::pose::Pose3DClip;

fn check_shapes(pred: &Pose3DClip, gt: &Pose3DClip) -> Result<()> {
    if pred.data().dim() != gt.data().dim() {
        return Err(KasError::ShapeMismatch {
            expected: format!("{:?}", gt.data().dim()),
            got: format!("{:?}", pred.data().dim()),
        });
    }
    Ok(())
}

/// Mean per-joint position error: mean over frames and joints of the
/// Euclidean distance between corresponding joints.
pub fn mpjpe(pred: &Pose3DClip, gt: &Pose3DClip) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (t, j, _) = pred.data().dim();
    let p = pred.data();
    let g = gt.data();
    let mut sum = 0.0;
    for frame in 0..t {
        for joint in 0..j {
            let mut d2 = 0.0;
            for c in 0..3 {
                let d = p[(frame, joint, c)] - g[(frame, joint, c)];
                d2 += d * d;
            }
            sum += d2.sqrt();
        }
    }
    Ok(sum / (t * j) as f64)
}

/// Similarity (or, without scale, rigid) alignment of one frame onto its
/// ground truth: centroids removed, optimal rotation from the singular
/// value decomposition of the 3x3 cross-covariance with reflection
/// correction, optimal uniform scale, ground-truth centroid re-applied.
///
/// Rejects frames whose point sets are (near-)rank-deficient below rank 2;
/// `frame` only labels the error.
pub fn procrustes_align(
    pred_frame: &Array2<f64>,
    gt_frame: &Array2<f64>,
    with_scale: bool,
    frame: usize,
) -> Result<Array2<f64>> {
    let (j, c) = pred_frame.dim();
    if c != 3 || gt_frame.dim() != (j, 3) {
        return Err(KasError::ShapeMismatch {
            expected: format!("{j}x3 frames"),
            got: format!("{:?} vs {:?}", pred_frame.dim(), gt_frame.dim()),
        });
    }
    if j < 3 {
        return Err(KasError::Unalignable { frame });
    }
    let jf = j as f64;
    let mut cp = [0.0; 3];
    let mut cg = [0.0; 3];
    for i in 0..j {
        for a in 0..3 {
            cp[a] += pred_frame[(i, a)] / jf;
            cg[a] += gt_frame[(i, a)] / jf;
        }
    }
    // cross-covariance of the centered sets
    let mut h: Matrix3<f64> = Matrix3::zeros();
    let mut var_pred = 0.0;
    for i in 0..j {
        for a in 0..3 {
            let xa = pred_frame[(i, a)] - cp[a];
            var_pred += xa * xa;
            for b in 0..3 {
                h[(a, b)] += xa * (gt_frame[(i, b)] - cg[b]);
            }
        }
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or(KasError::Unalignable { frame })?;
    let v_t = svd.v_t.ok_or(KasError::Unalignable { frame })?;
    let sigma = svd.singular_values;
    if sigma[0] <= 0.0 || sigma[1] <= sigma[0] * 1e-9 || var_pred <= 0.0 {
        return Err(KasError::Unalignable { frame });
    }
    let uv: Matrix3<f64> = u * v_t;
    let sign = uv.determinant().signum();
    let d = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, sign));
    // rotation applied as row-vector times matrix: x_aligned = x * q
    let q: Matrix3<f64> = u * d * v_t;
    let scale = if with_scale {
        (sigma[0] + sigma[1] + sign * sigma[2]) / var_pred
    } else {
        1.0
    };
    let mut out = Array2::zeros((j, 3));
    for i in 0..j {
        let x = [
            pred_frame[(i, 0)] - cp[0],
            pred_frame[(i, 1)] - cp[1],
            pred_frame[(i, 2)] - cp[2],
        ];
        for b in 0..3 {
            let mut v = 0.0;
            for a in 0..3 {
                v += x[a] * q[(a, b)];
            }
            out[(i, b)] = scale * v + cg[b];
        }
    }
    Ok(out)
}

/// P-MPJPE over the alignable frames, plus the number of frames skipped
/// as degenerate. Errors when every frame is degenerate.
pub fn p_mpjpe(pred: &Pose3DClip, gt: &Pose3DClip, with_scale: bool) -> Result<(f64, usize)> {
    check_shapes(pred, gt)?;
    let (t, j, _) = pred.data().dim();
    let mut sum = 0.0;
    let mut aligned_frames = 0usize;
    let mut skipped = 0usize;
    for frame in 0..t {
        let mut pf = Array2::zeros((j, 3));
        let mut gf = Array2::zeros((j, 3));
        for joint in 0..j {
            for c in 0..3 {
                pf[(joint, c)] = pred.data()[(frame, joint, c)];
                gf[(joint, c)] = gt.data()[(frame, joint, c)];
            }
        }
        match procrustes_align(&pf, &gf, with_scale, frame) {
            Ok(aligned) => {
                for joint in 0..j {
                    let mut d2 = 0.0;
                    for c in 0..3 {
                        let d = aligned[(joint, c)] - gf[(joint, c)];
                        d2 += d * d;
                    }
                    sum += d2.sqrt();
                }
                aligned_frames += 1;
            }
            Err(KasError::Unalignable { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if aligned_frames == 0 {
        return Err(KasError::Unalignable { frame: 0 });
    }
    Ok((sum / (aligned_frames * j) as f64, skipped))
}

/// Per-clip evaluation numbers carried into the report.
#[derive(Debug, Clone)]
pub struct ClipMetrics {
    pub action: String,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionRow {
    pub action: String,
    pub clips: usize,
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
}

/// Per-action means plus the clip-weighted overall mean.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub rows: Vec<ActionRow>,
    pub overall: ActionRow,
}

pub fn report(metrics: &[ClipMetrics]) -> Result<MetricsReport> {
    if metrics.is_empty() {
        return Err(KasError::InvalidConfig("no clips to report on".into()));
    }
    let mut actions: Vec<&str> = metrics.iter().map(|m| m.action.as_str()).collect();
    actions.sort_unstable();
    actions.dedup();
    let mut rows = Vec::with_capacity(actions.len());
    for action in actions {
        let group: Vec<&ClipMetrics> =
            metrics.iter().filter(|m| m.action == action).collect();
        let n = group.len() as f64;
        rows.push(ActionRow {
            action: action.to_string(),
            clips: group.len(),
            mpjpe_mm: group.iter().map(|m| m.mpjpe_mm).sum::<f64>() / n,
            p_mpjpe_mm: group.iter().map(|m| m.p_mpjpe_mm).sum::<f64>() / n,
        });
    }
    let n = metrics.len() as f64;
    let overall = ActionRow {
        action: "overall".to_string(),
        clips: metrics.len(),
        mpjpe_mm: metrics.iter().map(|m| m.mpjpe_mm).sum::<f64>() / n,
        p_mpjpe_mm: metrics.iter().map(|m| m.p_mpjpe_mm).sum::<f64>() / n,
    };
    Ok(MetricsReport { rows, overall })
}

impl MetricsReport {
    /// Aligned text table, one action per row plus the overall line.
    pub fn render(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.action.len())
            .chain(std::iter::once("overall".len()))
            .max()
            .unwrap_or(7)
            .max("action".len());
        let mut out = format!(
            "{:width$}  {:>6}  {:>12}  {:>12}\n",
            "action", "clips", "mpjpe_mm", "p_mpjpe_mm"
        );
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            out.push_str(&format!(
                "{:width$}  {:>6}  {:>12.3}  {:>12.3}\n",
                r.action, r.clips, r.mpjpe_mm, r.p_mpjpe_mm
            ));
        }
        out
    }

    /// Machine-readable form: action, clips, mpjpe_mm, p_mpjpe_mm.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("action, clips, mpjpe_mm, p_mpjpe_mm\n");
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            out.push_str(&format!(
                "{}, {}, {:.6}, {:.6}\n",
                r.action, r.clips, r.mpjpe_mm, r.p_mpjpe_mm
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip_from(data: Array3<f64>) -> Pose3DClip {
        Pose3DClip::new(data).unwrap()
    }

    fn random_clip(rng: &mut ChaCha8Rng, t: usize, j: usize, scale: f64) -> Pose3DClip {
        clip_from(Array3::from_shape_fn((t, j, 3), |_| {
            rng.gen_range(-scale..scale)
        }))
    }

    #[test]
    fn mpjpe_zero_for_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_clip(&mut rng, 3, 7, 100.0);
        assert_eq!(mpjpe(&c, &c).unwrap(), 0.0);
    }

    #[test]
    fn mpjpe_uniform_offset_is_its_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_clip(&mut rng, 4, 6, 100.0);
        let mut shifted = gt.data().clone();
        for f in 0..4 {
            for q in 0..6 {
                shifted[(f, q, 0)] += 3.0;
                shifted[(f, q, 1)] += 4.0;
            }
        }
        let pred = clip_from(shifted);
        assert!((mpjpe(&pred, &gt).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mpjpe_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pred = random_clip(&mut rng, 4, 17, 50.0);
        let gt = random_clip(&mut rng, 4, 17, 50.0);
        let mut sum = 0.0;
        for f in 0..4 {
            for q in 0..17 {
                let dx = pred.data()[(f, q, 0)] - gt.data()[(f, q, 0)];
                let dy = pred.data()[(f, q, 1)] - gt.data()[(f, q, 1)];
                let dz = pred.data()[(f, q, 2)] - gt.data()[(f, q, 2)];
                sum += (dx * dx + dy * dy + dz * dz).sqrt();
            }
        }
        let oracle = sum / (4.0 * 17.0);
        assert!((mpjpe(&pred, &gt).unwrap() - oracle).abs() < 1e-12);
    }

    fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (x, y, z) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }

    fn apply(points: &Array2<f64>, r: &[[f64; 3]; 3], scale: f64, t: [f64; 3]) -> Array2<f64> {
        let j = points.dim().0;
        let mut out = Array2::zeros((j, 3));
        for i in 0..j {
            for a in 0..3 {
                let mut v = 0.0;
                for b in 0..3 {
                    v += r[a][b] * points[(i, b)];
                }
                out[(i, a)] = scale * v + t[a];
            }
        }
        out
    }

    fn residual(aligned: &Array2<f64>, gt: &Array2<f64>) -> f64 {
        let j = aligned.dim().0;
        let mut sum = 0.0;
        for i in 0..j {
            let mut d2 = 0.0;
            for a in 0..3 {
                let d = aligned[(i, a)] - gt[(i, a)];
                d2 += d * d;
            }
            sum += d2.sqrt();
        }
        sum / j as f64
    }

    fn random_frame(rng: &mut ChaCha8Rng, j: usize) -> Array2<f64> {
        Array2::from_shape_fn((j, 3), |_| rng.gen_range(-100.0..100.0))
    }

    #[test]
    fn rigid_copy_aligns_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_frame(&mut rng, 9);
        let r = rotation([1.0, 2.0, -0.5], 1.1);
        let pred = apply(&gt, &r, 1.0, [10.0, -3.0, 7.0]);
        let aligned = procrustes_align(&pred, &gt, true, 0).unwrap();
        assert!(residual(&aligned, &gt) < 1e-9);
    }

    #[test]
    fn scaled_copy_aligns_with_scale_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_frame(&mut rng, 9);
        let pred = gt.mapv(|v| 2.0 * v);
        let aligned = procrustes_align(&pred, &gt, true, 0).unwrap();
        assert!(residual(&aligned, &gt) < 1e-9);
        // rigid-only mode cannot recover the scale
        let rigid = procrustes_align(&pred, &gt, false, 0).unwrap();
        assert!(residual(&rigid, &gt) > 1.0);
    }

    #[test]
    fn alignment_invariant_to_prerotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = random_frame(&mut rng, 11);
        let pred = random_frame(&mut rng, 11);
        let a1 = procrustes_align(&pred, &gt, true, 0).unwrap();
        let r = rotation([0.3, -1.0, 0.7], 2.2);
        let pre = apply(&pred, &r, 1.0, [0.0, 0.0, 0.0]);
        let a2 = procrustes_align(&pre, &gt, true, 0).unwrap();
        for i in 0..11 {
            for c in 0..3 {
                assert!((a1[(i, c)] - a2[(i, c)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn grid_search_never_beats_alignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let gt = random_frame(&mut rng, 8);
            let pred = random_frame(&mut rng, 8);
            let aligned = procrustes_align(&pred, &gt, true, 0).unwrap();
            let best = residual(&aligned, &gt);

            // centroid-matched brute force over a 15-degree axis-angle grid
            // and a coarse scale ladder
            let jf = 8.0;
            let mut cp = [0.0; 3];
            let mut cg = [0.0; 3];
            for i in 0..8 {
                for a in 0..3 {
                    cp[a] += pred[(i, a)] / jf;
                    cg[a] += gt[(i, a)] / jf;
                }
            }
            let centered = {
                let mut x = pred.clone();
                for i in 0..8 {
                    for a in 0..3 {
                        x[(i, a)] -= cp[a];
                    }
                }
                x
            };
            let axes = [
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
                [1.0, 1.0, 0.0],
                [1.0, 0.0, 1.0],
                [0.0, 1.0, 1.0],
                [1.0, 1.0, 1.0],
                [1.0, -1.0, 0.0],
                [0.0, 1.0, -1.0],
                [-1.0, 0.0, 1.0],
                [1.0, 1.0, -1.0],
                [1.0, -1.0, 1.0],
                [-1.0, 1.0, 1.0],
            ];
            let mut grid_best = f64::INFINITY;
            for axis in axes {
                for step in 0..24 {
                    let r = rotation(axis, step as f64 * 15.0f64.to_radians());
                    for s in 0..31 {
                        let scale = 0.5 + s as f64 * 0.05;
                        let cand = apply(&centered, &r, scale, cg);
                        grid_best = grid_best.min(residual(&cand, &gt));
                    }
                }
            }
            assert!(best <= grid_best + 1e-9, "{best} vs grid {grid_best}");
        }
    }

    #[test]
    fn rotation_is_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // a near-reflected pair would produce det -1 without the correction;
        // verify on mirrored data that the residual transform is still proper
        let gt = random_frame(&mut rng, 10);
        let mut pred = gt.clone();
        for i in 0..10 {
            pred[(i, 0)] = -pred[(i, 0)];
        }
        let aligned = procrustes_align(&pred, &gt, true, 0).unwrap();
        // a reflection would align exactly; a proper rotation cannot
        assert!(residual(&aligned, &gt) > 1e-6);
    }

    #[test]
    fn p_mpjpe_never_exceeds_mpjpe() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let pred = random_clip(&mut rng, 1, 17, 10.0);
            let gt = random_clip(&mut rng, 1, 17, 10.0);
            let plain = mpjpe(&pred, &gt).unwrap();
            let (aligned, skipped) = p_mpjpe(&pred, &gt, true).unwrap();
            assert_eq!(skipped, 0);
            assert!(aligned <= plain + 1e-9, "{aligned} vs {plain}");
        }
    }

    #[test]
    fn degenerate_frames_are_counted_and_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let good = random_clip(&mut rng, 1, 8, 50.0);
        let mut data = Array3::zeros((2, 8, 3));
        for q in 0..8 {
            for c in 0..3 {
                data[(0, q, c)] = good.data()[(0, q, c)];
                data[(1, q, c)] = 1.0; // all joints coincident
            }
        }
        let pred = clip_from(data);
        let mut gt_data = Array3::zeros((2, 8, 3));
        for f in 0..2 {
            for q in 0..8 {
                for c in 0..3 {
                    gt_data[(f, q, c)] = good.data()[(0, q, c)] + 0.5;
                }
            }
        }
        let gt = clip_from(gt_data);
        let (_, skipped) = p_mpjpe(&pred, &gt, true).unwrap();
        assert_eq!(skipped, 1);

        // every frame degenerate -> hard error
        let flat = clip_from(Array3::ones((2, 8, 3)));
        assert!(matches!(
            p_mpjpe(&flat, &gt, true),
            Err(KasError::Unalignable { .. })
        ));
    }

    #[test]
    fn report_single_clip_is_its_metric() {
        let r = report(&[ClipMetrics {
            action: "jump".into(),
            mpjpe_mm: 12.5,
            p_mpjpe_mm: 9.0,
        }])
        .unwrap();
        assert_eq!(r.overall.mpjpe_mm, 12.5);
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].clips, 1);
    }

    #[test]
    fn report_overall_is_clip_weighted() {
        let metrics = vec![
            ClipMetrics {
                action: "a".into(),
                mpjpe_mm: 10.0,
                p_mpjpe_mm: 8.0,
            },
            ClipMetrics {
                action: "b".into(),
                mpjpe_mm: 20.0,
                p_mpjpe_mm: 16.0,
            },
        ];
        let r = report(&metrics).unwrap();
        assert!((r.overall.mpjpe_mm - 15.0).abs() < 1e-12);
        assert!((r.overall.p_mpjpe_mm - 12.0).abs() < 1e-12);
    }

    #[test]
    fn report_matches_group_by_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let actions = ["run", "jump", "kick"];
        let metrics: Vec<ClipMetrics> = (0..30)
            .map(|_| ClipMetrics {
                action: actions[rng.gen_range(0..3)].to_string(),
                mpjpe_mm: rng.gen_range(0.0..100.0),
                p_mpjpe_mm: rng.gen_range(0.0..100.0),
            })
            .collect();
        let r = report(&metrics).unwrap();
        for row in &r.rows {
            let group: Vec<&ClipMetrics> = metrics
                .iter()
                .filter(|m| m.action == row.action)
                .collect();
            let mean = group.iter().map(|m| m.mpjpe_mm).sum::<f64>() / group.len() as f64;
            assert_eq!(row.clips, group.len());
            assert!((row.mpjpe_mm - mean).abs() < 1e-12);
        }
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), r.rows.len() + 2);
        assert!(csv.starts_with("action, clips, mpjpe_mm, p_mpjpe_mm"));
    }
}
