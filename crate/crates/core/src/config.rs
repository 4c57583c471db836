//! UTF-8 "key = value" configuration files covering the model and training
//! hyperparameters. Unknown keys are rejected so typos fail loudly.

use crate::error::{KasError, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| {
        KasError::InvalidConfig(format!("line {line}: invalid value {value:?} for {key}"))
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(KasError::InvalidConfig(format!(
            "line {line}: invalid value {value:?} for {key}, expected true or false"
        ))),
    }
}

/// Parses "key = value" lines on top of the defaults. Blank lines and lines
/// starting with '#' are ignored; every other line must set a known key.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| {
            KasError::InvalidConfig(format!("line {line}: expected \"key = value\", got {raw:?}"))
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "frames" => cfg.model.frames = parse_num(key, value, line)?,
            "joints" => cfg.model.joints = parse_num(key, value, line)?,
            "dim" => cfg.model.dim = parse_num(key, value, line)?,
            "layers" => cfg.model.layers = parse_num(key, value, line)?,
            "heads" => cfg.model.heads = parse_num(key, value, line)?,
            "gcn_k" => cfg.model.gcn_k = parse_num(key, value, line)?,
            "limb_hidden" => cfg.model.limb_hidden = parse_num(key, value, line)?,
            "ff_expansion" => cfg.model.ff_expansion = parse_num(key, value, line)?,
            "lambda_v" => cfg.model.lambda_v = parse_num(key, value, line)?,
            "epochs" => cfg.train.epochs = parse_num(key, value, line)?,
            "batch_size" => cfg.train.batch_size = parse_num(key, value, line)?,
            "early_stop_patience" => {
                cfg.train.early_stop_patience = parse_num(key, value, line)?
            }
            "seed" => cfg.train.seed = parse_num(key, value, line)?,
            "flip_augment" => cfg.train.flip_augment = parse_bool(key, value, line)?,
            "lr" => cfg.train.optimizer.lr = parse_num(key, value, line)?,
            "weight_decay" => cfg.train.optimizer.weight_decay = parse_num(key, value, line)?,
            "beta1" => cfg.train.optimizer.beta1 = parse_num(key, value, line)?,
            "beta2" => cfg.train.optimizer.beta2 = parse_num(key, value, line)?,
            "eps" => cfg.train.optimizer.eps = parse_num(key, value, line)?,
            _ => {
                return Err(KasError::InvalidConfig(format!(
                    "line {line}: unknown key {key:?}"
                )))
            }
        }
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}
