//! `key = value` configuration with defaults, file loading and overrides.

use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::{LossWeights, DEFAULT_QUEUE_CAPACITY, DEFAULT_TAU};
use crate::mat::{MatConfig, DEFAULT_ALPHA};
use crate::network::GeneratorConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub alpha: f64,
    pub tau: f64,
    /// Style queue capacity.
    pub m: usize,
    pub lambda_style: f64,
    pub lambda_align: f64,
    pub lambda_corr: f64,
    pub lambda_str: f64,
    pub lambda_perc: f64,
    pub lambda_adv: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mat_blocks: usize,
    pub image_size: usize,
    pub feature_grid: usize,
    pub base_channels: usize,
    pub style_dim: usize,
    pub spade_hidden: usize,
    pub dwise_kernel: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub seed: u64,
    pub data_seed: u64,
    pub extractor_seed: u64,
    /// Optional `MBFE` weights file; empty means seeded weights.
    pub extractor_weights: String,
    pub queue_freeze_frac: f64,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: usize,
    pub disable_mask: bool,
    pub clamp_uncorrelated: bool,
    pub corr_transpose: bool,
}

impl Default for Config {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let w = LossWeights::default();
        Self {
            alpha: DEFAULT_ALPHA,
            tau: DEFAULT_TAU,
            m: DEFAULT_QUEUE_CAPACITY,
            lambda_style: w.style,
            lambda_align: w.align,
            lambda_corr: w.corr,
            lambda_str: w.structural,
            lambda_perc: w.perceptual,
            lambda_adv: w.adversarial,
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.0,
            beta2: 0.999,
            adam_eps: 1e-8,
            mat_blocks: g.mat_blocks,
            image_size: g.image_size,
            feature_grid: g.feature_grid,
            base_channels: g.base_channels,
            style_dim: g.style_dim,
            spade_hidden: g.mat.spade_hidden,
            dwise_kernel: g.mat.dwise_kernel,
            steps: 2000,
            batch_size: 2,
            dataset_size: 8,
            seed: 0,
            data_seed: 7,
            extractor_seed: 1234,
            extractor_weights: String::new(),
            queue_freeze_frac: 0.3,
            checkpoint_every: 500,
            disable_mask: false,
            clamp_uncorrelated: true,
            corr_transpose: false,
        }
    }
}

pub const KEYS: &[&str] = &[
    "alpha",
    "tau",
    "m",
    "lambda_style",
    "lambda_align",
    "lambda_corr",
    "lambda_str",
    "lambda_perc",
    "lambda_adv",
    "lr_g",
    "lr_d",
    "beta1",
    "beta2",
    "adam_eps",
    "mat_blocks",
    "image_size",
    "feature_grid",
    "base_channels",
    "style_dim",
    "spade_hidden",
    "dwise_kernel",
    "steps",
    "batch_size",
    "dataset_size",
    "seed",
    "data_seed",
    "extractor_seed",
    "extractor_weights",
    "queue_freeze_frac",
    "checkpoint_every",
    "disable_mask",
    "clamp_uncorrelated",
    "corr_transpose",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: cannot parse {value:?} as a boolean"))),
    }
}

impl Config {
    /// Sets one key from its textual value (no validation across keys).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "alpha" => self.alpha = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "m" => self.m = parse(key, v)?,
            "lambda_style" => self.lambda_style = parse(key, v)?,
            "lambda_align" => self.lambda_align = parse(key, v)?,
            "lambda_corr" => self.lambda_corr = parse(key, v)?,
            "lambda_str" => self.lambda_str = parse(key, v)?,
            "lambda_perc" => self.lambda_perc = parse(key, v)?,
            "lambda_adv" => self.lambda_adv = parse(key, v)?,
            "lr_g" => self.lr_g = parse(key, v)?,
            "lr_d" => self.lr_d = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "mat_blocks" => self.mat_blocks = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "feature_grid" => self.feature_grid = parse(key, v)?,
            "base_channels" => self.base_channels = parse(key, v)?,
            "style_dim" => self.style_dim = parse(key, v)?,
            "spade_hidden" => self.spade_hidden = parse(key, v)?,
            "dwise_kernel" => self.dwise_kernel = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "dataset_size" => self.dataset_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "extractor_seed" => self.extractor_seed = parse(key, v)?,
            "extractor_weights" => self.extractor_weights = v.to_string(),
            "queue_freeze_frac" => self.queue_freeze_frac = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "disable_mask" => self.disable_mask = parse_bool(key, v)?,
            "clamp_uncorrelated" => self.clamp_uncorrelated = parse_bool(key, v)?,
            "corr_transpose" => self.corr_transpose = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Textual value of a key, in a form [`Config::set`] accepts.
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "alpha" => self.alpha.to_string(),
            "tau" => self.tau.to_string(),
            "m" => self.m.to_string(),
            "lambda_style" => self.lambda_style.to_string(),
            "lambda_align" => self.lambda_align.to_string(),
            "lambda_corr" => self.lambda_corr.to_string(),
            "lambda_str" => self.lambda_str.to_string(),
            "lambda_perc" => self.lambda_perc.to_string(),
            "lambda_adv" => self.lambda_adv.to_string(),
            "lr_g" => self.lr_g.to_string(),
            "lr_d" => self.lr_d.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "mat_blocks" => self.mat_blocks.to_string(),
            "image_size" => self.image_size.to_string(),
            "feature_grid" => self.feature_grid.to_string(),
            "base_channels" => self.base_channels.to_string(),
            "style_dim" => self.style_dim.to_string(),
            "spade_hidden" => self.spade_hidden.to_string(),
            "dwise_kernel" => self.dwise_kernel.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "dataset_size" => self.dataset_size.to_string(),
            "seed" => self.seed.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "extractor_seed" => self.extractor_seed.to_string(),
            "extractor_weights" => self.extractor_weights.clone(),
            "queue_freeze_frac" => self.queue_freeze_frac.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "disable_mask" => self.disable_mask.to_string(),
            "clamp_uncorrelated" => self.clamp_uncorrelated.to_string(),
            "corr_transpose" => self.corr_transpose.to_string(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not `key=value`")))?;
        self.set(k, v)
    }

    /// Defaults, then the optional file, then overrides; validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            cfg.apply_text(&std::fs::read_to_string(p)?)?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.mat_blocks < 1 {
            return bad("mat_blocks must be at least 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.m == 0 {
            return bad("m must be positive".into());
        }
        for (k, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("adam_eps", self.adam_eps)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be finite and >= 0, got {v}"));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.queue_freeze_frac) {
            return bad(format!("queue_freeze_frac must lie in [0, 1], got {}", self.queue_freeze_frac));
        }
        if self.batch_size == 0 || self.dataset_size == 0 {
            return bad("batch_size and dataset_size must be positive".into());
        }
        self.loss_weights().validate().map_err(|e| Error::Config(strip_prefix(&e)))?;
        self.generator().validate().map_err(|e| Error::Config(strip_prefix(&e)))?;
        if self.image_size < 8 {
            return bad(format!("image_size must be at least 8, got {}", self.image_size));
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            feature_grid: self.feature_grid,
            mat_blocks: self.mat_blocks,
            style_dim: self.style_dim,
            source_channels: 1,
            mat: MatConfig {
                alpha: self.alpha,
                disable_mask: self.disable_mask,
                clamp_uncorrelated: self.clamp_uncorrelated,
                dwise_kernel: self.dwise_kernel,
                spade_hidden: self.spade_hidden,
            },
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            style: self.lambda_style,
            align: self.lambda_align,
            corr: self.lambda_corr,
            structural: self.lambda_str,
            perceptual: self.lambda_perc,
            adversarial: self.lambda_adv,
        }
    }

    /// Steps before which generated style codes enter the queue.
    pub fn freeze_step(&self) -> usize {
        (self.queue_freeze_frac * self.steps as f64).floor() as usize
    }

    /// Serialized `key = value` form accepted by [`Config::apply_text`].
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) | Error::Invalid(m) => m.clone(),
        other => other.to_string(),
    }
}
