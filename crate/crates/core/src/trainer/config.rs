use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::BatchConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{DegradationMode, ObjectiveConfig};

/// Everything a pretraining run depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub mask_ratio: f64,
    pub paired_weight: f64,
    pub unpaired_weight: f64,
    pub flip: bool,
    pub normalize: bool,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub objective: ObjectiveConfig,
    pub model: ModelConfig,
    /// `random`, or the path of a teacher feature file.
    pub teacher: String,
    pub teacher_seed: u64,
    /// Directory with `manifest.tsv`; empty means synthetic data.
    pub data_dir: String,
    pub synth_scenes: usize,
    pub synth_regions: usize,
    pub synth_seed: u64,
    pub synth_unpaired_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 1.5e-4,
            warmup_epochs: 5,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: 0.0,
            seed: 0,
            mask_ratio: 0.75,
            paired_weight: 1.0,
            unpaired_weight: 1.0,
            flip: true,
            normalize: true,
            checkpoint_every: 0,
            objective: ObjectiveConfig::default(),
            model: ModelConfig::default(),
            teacher: "random".into(),
            teacher_seed: 1,
            data_dir: String::new(),
            synth_scenes: 64,
            synth_regions: 6,
            synth_seed: 0,
            synth_unpaired_fraction: 0.5,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {v:?} for {key}"))),
    }
}

macro_rules! fields {
    ($m:ident) => {
        $m!(
            epochs: num = epochs,
            batch_size: num = batch_size,
            lr: num = lr,
            warmup_epochs: num = warmup_epochs,
            weight_decay: num = weight_decay,
            beta1: num = beta1,
            beta2: num = beta2,
            adam_eps: num = adam_eps,
            grad_clip: num = grad_clip,
            seed: num = seed,
            mask_ratio: num = mask_ratio,
            paired_weight: num = paired_weight,
            unpaired_weight: num = unpaired_weight,
            flip: flag = flip,
            normalize: flag = normalize,
            checkpoint_every: num = checkpoint_every,
            enable_okd: flag = objective.enable_okd,
            enable_ccl: flag = objective.enable_ccl,
            enable_cdr: flag = objective.enable_cdr,
            rigid_contrastive: flag = objective.rigid_contrastive,
            tau: num = objective.tau,
            degradation: num = objective.degradation,
            literal_mae_norm: flag = objective.literal_mae_norm,
            literal_ccl_sum: flag = objective.literal_ccl_sum,
            image_size: num = model.image_size,
            patch: num = model.patch,
            width: num = model.width,
            heads: num = model.heads,
            encoder_depth: num = model.encoder_depth,
            decoder_width: num = model.decoder_width,
            decoder_heads: num = model.decoder_heads,
            decoder_depth: num = model.decoder_depth,
            cdr_depth: num = model.cdr_depth,
            mlp_ratio: num = model.mlp_ratio,
            init_std: num = model.init_std,
            patch_bias: flag = model.patch_bias,
            teacher: num = teacher,
            teacher_seed: num = teacher_seed,
            data_dir: num = data_dir,
            synth_scenes: num = synth_scenes,
            synth_regions: num = synth_regions,
            synth_seed: num = synth_seed,
            synth_unpaired_fraction: num = synth_unpaired_fraction
        )
    };
}

impl TrainConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! set_impl {
            ($($k:ident : $kind:ident = $($f:ident).+),*) => {
                match key {
                    $(stringify!($k) => { set_impl!(@$kind key, value, self.$($f).+); })*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
            };
            (@num $key:ident, $v:ident, $t:expr) => { $t = parse($key, $v)?; };
            (@flag $key:ident, $v:ident, $t:expr) => { $t = parse_bool($key, $v)?; };
        }
        fields!(set_impl);
        if key == "degradation" {
            self.model.cdr_channels = self.objective.degradation.channels();
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        macro_rules! dump {
            ($($k:ident : $kind:ident = $($f:ident).+),*) => {
                $( writeln!(s, "{} = {}", stringify!($k), self.$($f).+).unwrap(); )*
            };
        }
        fields!(dump);
        s
    }

    /// Hex SHA-256 of the resolved configuration text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} is outside (0, 1)", self.mask_ratio)));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config("lr, weight_decay and grad_clip must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("betas must lie in [0, 1) and adam_eps be positive".into()));
        }
        if !(self.objective.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be positive", self.objective.tau)));
        }
        if self.model.cdr_channels != self.objective.degradation.channels() {
            return Err(Error::Config(format!(
                "degradation {} needs {} CDR channels, model has {}",
                self.objective.degradation,
                self.objective.degradation.channels(),
                self.model.cdr_channels
            )));
        }
        self.model.validate()
    }

    pub fn batch(&self) -> BatchConfig {
        BatchConfig {
            batch_size: self.batch_size,
            paired_weight: self.paired_weight,
            unpaired_weight: self.unpaired_weight,
            mask_ratio: self.mask_ratio,
            flip: self.flip,
            seed: self.seed,
        }
    }

    /// Builder-style helper for programmatic configs.
    pub fn with_degradation(mut self, d: DegradationMode) -> Self {
        self.objective.degradation = d;
        self.model.cdr_channels = d.channels();
        self
    }
}
