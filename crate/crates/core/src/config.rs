//! Model, loss and training configuration.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::str::FromStr;

use crate::{Error, Result};

/// How the sampled channel graph constrains inter-series attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Masked pairs get zero attention weight.
    Binary,
    /// Attention logits are shifted by `ln p` (weights scaled by the edge probability).
    Soft,
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(MaskMode::Binary),
            "soft" => Ok(MaskMode::Soft),
            _ => Err(Error::InvalidConfig(format!("mask_mode must be binary or soft, got `{s}`"))),
        }
    }
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Binary => "binary",
            MaskMode::Soft => "soft",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub num_channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub msp_count: usize,
    pub heads: usize,
    pub dropout: f64,

    pub lambda_time: f64,
    pub lambda_freq: f64,
    pub lambda_main: f64,
    pub lambda_msp: f64,
    pub lambda_contra: f64,

    pub epsilon: f64,
    pub gumbel_temperature: f64,
    pub mask_mode: MaskMode,
    /// `false` replaces the sampled graph with an all-ones mask.
    pub use_graph: bool,
    /// Stop the contrastive gradient at the purified window.
    pub detach_purified: bool,

    pub anomaly_ratio: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    /// Step between consecutive training sample starts.
    pub train_stride: usize,
    /// Step between scored windows; 0 means one horizon.
    pub score_stride: usize,
    /// Fraction of the training split held out at its end for thresholding.
    pub val_fraction: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            num_channels: 1,
            lookback: 192,
            horizon: 32,
            patch_size: 16,
            patch_stride: 8,
            hidden_dim: 256,
            encoder_layers: 3,
            msp_count: 2,
            heads: 4,
            dropout: 0.1,
            lambda_time: 1.0,
            lambda_freq: 0.2,
            lambda_main: 0.5,
            lambda_msp: 0.5,
            lambda_contra: 1.0,
            epsilon: 1e-5,
            gumbel_temperature: 0.5,
            mask_mode: MaskMode::Binary,
            use_graph: true,
            detach_purified: false,
            anomaly_ratio: 1.0,
            seed: 0,
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 10,
            grad_clip: 5.0,
            train_stride: 1,
            score_stride: 0,
            val_fraction: 0.2,
        }
    }
}

/// Every key accepted by [`Config::set`], in echo order.
pub const KEYS: &[&str] = &[
    "num_channels",
    "lookback",
    "horizon",
    "patch_size",
    "patch_stride",
    "hidden_dim",
    "encoder_layers",
    "msp_count",
    "heads",
    "dropout",
    "lambda_time",
    "lambda_freq",
    "lambda_main",
    "lambda_msp",
    "lambda_contra",
    "epsilon",
    "gumbel_temperature",
    "mask_mode",
    "use_graph",
    "detach_purified",
    "anomaly_ratio",
    "seed",
    "learning_rate",
    "batch_size",
    "epochs",
    "grad_clip",
    "train_stride",
    "score_stride",
    "val_fraction",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("`{key}` expects a boolean, got `{value}`"))),
    }
}

impl Config {
    pub fn with_channels(num_channels: usize) -> Self {
        Self { num_channels, ..Self::default() }
    }

    /// Number of patches per window.
    pub fn num_patches(&self) -> usize {
        (self.lookback - self.patch_size) / self.patch_stride + 1
    }

    pub fn effective_score_stride(&self) -> usize {
        if self.score_stride == 0 {
            self.horizon
        } else {
            self.score_stride
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "num_channels" => self.num_channels = parse(key, v)?,
            "lookback" => self.lookback = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "patch_stride" => self.patch_stride = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "msp_count" => self.msp_count = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "lambda_time" => self.lambda_time = parse(key, v)?,
            "lambda_freq" => self.lambda_freq = parse(key, v)?,
            "lambda_main" => self.lambda_main = parse(key, v)?,
            "lambda_msp" => self.lambda_msp = parse(key, v)?,
            "lambda_contra" => self.lambda_contra = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "gumbel_temperature" => self.gumbel_temperature = parse(key, v)?,
            "mask_mode" => self.mask_mode = v.parse()?,
            "use_graph" => self.use_graph = parse_bool(key, v)?,
            "detach_purified" => self.detach_purified = parse_bool(key, v)?,
            "anomaly_ratio" => self.anomaly_ratio = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "train_stride" => self.train_stride = parse(key, v)?,
            "score_stride" => self.score_stride = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "num_channels" => self.num_channels.to_string(),
            "lookback" => self.lookback.to_string(),
            "horizon" => self.horizon.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "patch_stride" => self.patch_stride.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "encoder_layers" => self.encoder_layers.to_string(),
            "msp_count" => self.msp_count.to_string(),
            "heads" => self.heads.to_string(),
            "dropout" => self.dropout.to_string(),
            "lambda_time" => self.lambda_time.to_string(),
            "lambda_freq" => self.lambda_freq.to_string(),
            "lambda_main" => self.lambda_main.to_string(),
            "lambda_msp" => self.lambda_msp.to_string(),
            "lambda_contra" => self.lambda_contra.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "gumbel_temperature" => self.gumbel_temperature.to_string(),
            "mask_mode" => self.mask_mode.as_str().to_string(),
            "use_graph" => self.use_graph.to_string(),
            "detach_purified" => self.detach_purified.to_string(),
            "anomaly_ratio" => self.anomaly_ratio.to_string(),
            "seed" => self.seed.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "train_stride" => self.train_stride.to_string(),
            "score_stride" => self.score_stride.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Parse `key = value` lines; `#` starts a comment. Later lines win.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// One `key = value` line per key, in [`KEYS`] order.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&self.get(k).unwrap_or_default());
            out.push('\n');
        }
        out
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|k| (*k, self.get(k).unwrap_or_default())).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let positive = [
            ("num_channels", self.num_channels),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("patch_size", self.patch_size),
            ("patch_stride", self.patch_stride),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("batch_size", self.batch_size),
            ("train_stride", self.train_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.patch_size > self.lookback {
            return bad(format!(
                "patch_size {} exceeds lookback {}",
                self.patch_size, self.lookback
            ));
        }
        if self.patch_stride > self.patch_size {
            return bad(format!(
                "patch_stride {} exceeds patch_size {}",
                self.patch_stride, self.patch_size
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        let lambdas = [
            ("lambda_time", self.lambda_time),
            ("lambda_freq", self.lambda_freq),
            ("lambda_main", self.lambda_main),
            ("lambda_msp", self.lambda_msp),
            ("lambda_contra", self.lambda_contra),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive".into());
        }
        if !(self.gumbel_temperature > 0.0 && self.gumbel_temperature.is_finite()) {
            return bad("gumbel_temperature must be positive".into());
        }
        if !(self.anomaly_ratio > 0.0 && self.anomaly_ratio < 100.0) {
            return bad("anomaly_ratio must lie in (0, 100)".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// `floor((len - patch) / stride) + 1`.
pub fn patch_count(len: usize, patch: usize, stride: usize) -> Result<usize> {
    if patch > len {
        return Err(Error::WindowTooShort { len, patch });
    }
    if stride == 0 || patch == 0 {
        return Err(Error::InvalidConfig("patch size and stride must be positive".into()));
    }
    Ok((len - patch) / stride + 1)
}
