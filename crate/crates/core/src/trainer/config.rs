use std::fmt::Write as _;

use crate::data::AugmentPolicy;
use crate::error::{Error, Result};
use crate::model::HeadMode;

/// Optimization settings. Defaults follow the published small-dataset
/// regime: 128-pair batches split 64/64, momentum 0.9, base rate 1e-3
/// decaying by 10x down to 1e-4.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub pos_per_batch: usize,
    pub momentum: f64,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub min_lr: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    /// 0 means one pass over the training images per epoch.
    pub steps_per_epoch: usize,
    pub hard_negative_mining: bool,
    pub mining_pool: usize,
    pub mining_keep: usize,
    pub seed: u64,
    pub channel_multiplier: f64,
    pub head_mode: HeadMode,
    pub augment: AugmentPolicy,
    /// L2 penalty on CNN weights; the head is always regularized by `alpha`.
    pub cnn_weight_decay: f64,
    pub init_std: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 5e-2,
            batch_size: 128,
            pos_per_batch: 64,
            momentum: 0.9,
            base_lr: 1e-3,
            lr_decay_factor: 0.1,
            min_lr: 1e-4,
            plateau_patience: 3,
            max_epochs: 50,
            steps_per_epoch: 0,
            hard_negative_mining: false,
            mining_pool: 2048,
            mining_keep: 512,
            seed: 0,
            channel_multiplier: 1.0,
            head_mode: HeadMode::Hybrid,
            augment: AugmentPolicy::MirrorRotate,
            cnn_weight_decay: 0.0,
            init_std: 0.01,
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "alpha",
    "batch_size",
    "pos_per_batch",
    "momentum",
    "base_lr",
    "lr_decay_factor",
    "min_lr",
    "plateau_patience",
    "max_epochs",
    "steps_per_epoch",
    "hard_negative_mining",
    "mining_pool",
    "mining_keep",
    "seed",
    "channel_multiplier",
    "head_mode",
    "augment",
    "cnn_weight_decay",
    "init_std",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return fail(format!("need 0 < min_lr <= base_lr, got {} and {}", self.min_lr, self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.pos_per_batch > self.batch_size {
            return fail(format!(
                "need 0 < batch_size and pos_per_batch <= batch_size, got {} and {}",
                self.batch_size, self.pos_per_batch
            ));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.alpha < 0.0 || self.cnn_weight_decay < 0.0 || self.init_std < 0.0 {
            return fail("alpha, cnn_weight_decay and init_std must be non-negative".into());
        }
        if self.plateau_patience == 0 {
            return fail("plateau_patience must be at least 1".into());
        }
        if !(self.channel_multiplier > 0.0) {
            return fail(format!("channel_multiplier must be positive, got {}", self.channel_multiplier));
        }
        if self.mining_keep == 0 || self.mining_keep > self.mining_pool {
            return fail(format!(
                "need 0 < mining_keep <= mining_pool, got {} and {}",
                self.mining_keep, self.mining_pool
            ));
        }
        Ok(())
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// this struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "pos_per_batch" => self.pos_per_batch = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "plateau_patience" => self.plateau_patience = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = parse(key, value)?,
            "hard_negative_mining" => self.hard_negative_mining = parse(key, value)?,
            "mining_pool" => self.mining_pool = parse(key, value)?,
            "mining_keep" => self.mining_keep = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "channel_multiplier" => self.channel_multiplier = parse(key, value)?,
            "head_mode" => self.head_mode = value.trim().parse()?,
            "augment" => self.augment = value.trim().parse()?,
            "cnn_weight_decay" => self.cnn_weight_decay = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("alpha", self.alpha.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("pos_per_batch", self.pos_per_batch.to_string()),
            ("momentum", self.momentum.to_string()),
            ("base_lr", self.base_lr.to_string()),
            ("lr_decay_factor", self.lr_decay_factor.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("hard_negative_mining", self.hard_negative_mining.to_string()),
            ("mining_pool", self.mining_pool.to_string()),
            ("mining_keep", self.mining_keep.to_string()),
            ("seed", self.seed.to_string()),
            ("channel_multiplier", self.channel_multiplier.to_string()),
            ("head_mode", self.head_mode.to_string()),
            ("augment", self.augment.to_string()),
            ("cnn_weight_decay", self.cnn_weight_decay.to_string()),
            ("init_std", self.init_std.to_string()),
        ]
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (key, value) in parse_kv(text)? {
            if !cfg.set(&key, &value)? {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Splits flat `key=value` text into pairs, skipping blanks and comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| (i, line.trim()))
        .filter(|(_, line)| !line.is_empty() && !line.starts_with('#'))
        .map(|(i, line)| {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}
