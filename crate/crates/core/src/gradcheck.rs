//! Finite-difference verification of tape gradients.
//!
//! The harness rebuilds a scalar loss from a parameter store, compares every
//! analytic parameter gradient against central differences, and reports the
//! worst relative error per parameter. Relative error is
//! |a - f| / max(|a|, |f|, 1e-3) so near-zero gradients are compared
//! absolutely.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KasError, Result};
use crate::optim::ParameterStore;
use crate::tape::{Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Per-coordinate relative-error bound.
    pub tolerance: f64,
    /// Upper bound on probed coordinates per parameter; `None` probes all.
    pub max_probes: Option<usize>,
    /// Seed for choosing which coordinates to probe when capped.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tolerance: 1e-4,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub probed: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    /// One line per parameter plus a verdict line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(0);
        for e in &self.entries {
            let verdict = if e.max_rel_err < self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            out.push_str(&format!(
                "{:width$}  max_rel_err {:>12.3e}  probed {:>5}  {}\n",
                e.name, e.max_rel_err, e.probed, verdict
            ));
        }
        out.push_str(&format!(
            "gradcheck: {} (tolerance {:.1e}, worst {:.3e})\n",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance,
            self.max_rel_err()
        ));
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks the gradients of every parameter in `store` for the scalar loss
/// produced by `build`. The builder must bind parameters from the store it
/// is given so perturbed values take effect. The store is restored to its
/// original values before returning.
pub fn check_gradients<F>(
    store: &mut ParameterStore,
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    if tape.shape(loss) != (1, 1) {
        return Err(KasError::ShapeMismatch {
            expected: "scalar (1 x 1) loss".into(),
            got: format!("{:?}", tape.shape(loss)),
        });
    }
    let grads = tape.backward(loss);
    let analytic: std::collections::HashMap<String, ndarray::Array2<f64>> =
        tape.param_grads(&grads).into_iter().collect();

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::with_capacity(names.len());
    for name in &names {
        let grad = analytic
            .get(name)
            .ok_or_else(|| KasError::MissingGradient(name.clone()))?
            .clone();
        let base = store.get(name)?.clone();
        let total = base.len();
        let mut coords: Vec<usize> = (0..total).collect();
        if let Some(cap) = opts.max_probes {
            if cap < total {
                coords.shuffle(&mut rng);
                coords.truncate(cap);
                coords.sort_unstable();
            }
        }
        let cols = base.dim().1;
        let mut worst = 0.0f64;
        for &flat in &coords {
            let idx = (flat / cols, flat % cols);
            let mut up = base.clone();
            up[idx] += opts.step;
            store.set(name, up)?;
            let mut t = Tape::new();
            let l = build(&mut t, store)?;
            let f_up = t.value(l)[(0, 0)];

            let mut down = base.clone();
            down[idx] -= opts.step;
            store.set(name, down)?;
            let mut t = Tape::new();
            let l = build(&mut t, store)?;
            let f_down = t.value(l)[(0, 0)];

            let numeric = (f_up - f_down) / (2.0 * opts.step);
            worst = worst.max(relative_error(grad[idx], numeric));
        }
        store.set(name, base)?;
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: worst,
            probed: coords.len(),
        });
    }
    Ok(GradCheckReport {
        entries,
        tolerance: opts.tolerance,
    })
}

/// Finite-difference check of the whole model through its training loss on
/// one clip. Rebuilds the forward graph from the perturbed store on every
/// probe; the model's own parameters are restored before returning.
pub fn check_model_gradients(
    model: &mut crate::model::Model,
    pair: &crate::container::ClipPair,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let centered = crate::pose::center_on_root(&pair.pose3d, &model.topo)?;
    let gt_flat = crate::model::flatten_clip(centered.data());
    let config = model.config;
    let topo = model.topo.clone();
    let table = model.table.clone();
    check_gradients(
        &mut model.store,
        |tape, store| {
            let probe = crate::model::Model {
                config,
                topo: topo.clone(),
                table: table.clone(),
                store: store.clone(),
            };
            let fwd = probe.build_forward(tape, &pair.pose2d)?;
            crate::training::total_loss_var(
                tape,
                fwd.output,
                &gt_flat,
                config.frames,
                config.joints,
                config.lambda_v,
            )
        },
        opts,
    )
}
