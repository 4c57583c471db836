//! Named parameter store with gradient slots and a decoupled-weight-decay
//! Adam optimizer, plus the warmup/plateau learning-rate schedule.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{KasError, Result};
use crate::tape::{Tape, Var};

/// AdamW hyperparameters. Defaults: lr 5e-4, decay 0.01, betas (0.9, 0.999),
/// eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone)]
struct Entry {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    moment1: Array2<f64>,
    moment2: Array2<f64>,
}

/// Ordered map of named parameters with per-parameter optimizer state.
/// Insertion order is preserved so serialization is deterministic.
#[derive(Default, Clone)]
pub struct ParameterStore {
    order: Vec<String>,
    entries: HashMap<String, Entry>,
    step_count: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        let dim = value.dim();
        let prev = self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad: None,
                moment1: Array2::zeros(dim),
                moment2: Array2::zeros(dim),
            },
        );
        if prev.is_none() {
            self.order.push(name.to_string());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| KasError::UnknownParameter(name.to_string()))
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| KasError::UnknownParameter(name.to_string()))?;
        entry.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.get(name).and_then(|e| e.grad.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.order
            .iter()
            .map(|n| self.entries[n].value.len())
            .sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad = None;
        }
    }

    /// Adds `g` into the gradient slot of `name`.
    pub fn accumulate_grad(&mut self, name: &str, g: &Array2<f64>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| KasError::UnknownParameter(name.to_string()))?;
        match &mut entry.grad {
            Some(existing) => *existing += g,
            slot => *slot = Some(g.clone()),
        }
        Ok(())
    }

    /// Binds a parameter onto a tape as a named leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        Ok(tape.param(self.get(name)?.clone(), name))
    }

    /// One AdamW step over every parameter. Weight decay is decoupled:
    /// applied directly to the parameter, not through the moments.
    /// Errors if any parameter is missing its gradient.
    pub fn adamw_step(&mut self, cfg: &AdamWConfig) -> Result<()> {
        for name in &self.order {
            if self.entries[name].grad.is_none() {
                return Err(KasError::MissingGradient(name.clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for name in &self.order {
            let entry = self.entries.get_mut(name).unwrap();
            let g = entry.grad.as_ref().unwrap();
            entry.value *= 1.0 - cfg.lr * cfg.weight_decay;
            entry.moment1 *= cfg.beta1;
            entry.moment1.scaled_add(1.0 - cfg.beta1, g);
            entry.moment2 *= cfg.beta2;
            let g2 = g * g;
            entry.moment2.scaled_add(1.0 - cfg.beta2, &g2);
            let value = &mut entry.value;
            let m1 = &entry.moment1;
            let m2 = &entry.moment2;
            ndarray::Zip::from(value)
                .and(m1)
                .and(m2)
                .for_each(|v, &m, &s| {
                    let mhat = m / bc1;
                    let vhat = s / bc2;
                    *v -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                });
        }
        Ok(())
    }

    /// Snapshot of the parameter values only (optimizer state excluded).
    pub fn clone_values(&self) -> Vec<(String, Array2<f64>)> {
        self.order
            .iter()
            .map(|n| (n.clone(), self.entries[n].value.clone()))
            .collect()
    }

    pub fn restore_values(&mut self, values: &[(String, Array2<f64>)]) -> Result<()> {
        for (name, value) in values {
            self.set(name, value.clone())?;
        }
        Ok(())
    }
}

/// Warmup floor and ceiling of the schedule.
pub const LR_WARMUP_START: f64 = 5e-6;
pub const LR_BASE: f64 = 5e-4;
pub const LR_WARMUP_EPOCHS: usize = 10;
pub const LR_PLATEAU_FACTOR: f64 = 0.9;
pub const LR_PLATEAU_PATIENCE: usize = 2;

/// Learning rate for `epoch` given the evaluation metric history of all
/// completed epochs (lower is better).
///
/// Epochs 0..9 interpolate linearly from 5e-6 toward 5e-4, reaching 5e-4
/// exactly at epoch 10. Afterwards the rate is multiplied by 0.9 whenever
/// the metric has not improved for 2 consecutive epochs; the patience
/// counter resets after each decay.
pub fn lr_schedule(epoch: usize, eval_history: &[f64]) -> f64 {
    if epoch < LR_WARMUP_EPOCHS {
        return LR_WARMUP_START
            + (LR_BASE - LR_WARMUP_START) * epoch as f64 / LR_WARMUP_EPOCHS as f64;
    }
    let mut lr = LR_BASE;
    let mut best = f64::INFINITY;
    let mut bad = 0usize;
    for (i, &metric) in eval_history.iter().enumerate().take(epoch) {
        if metric < best {
            best = metric;
            bad = 0;
            continue;
        }
        if i >= LR_WARMUP_EPOCHS {
            bad += 1;
            if bad >= LR_PLATEAU_PATIENCE {
                lr *= LR_PLATEAU_FACTOR;
                bad = 0;
            }
        }
    }
    lr
}
