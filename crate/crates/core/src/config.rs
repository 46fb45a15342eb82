//! Flat `key = value` configuration with named presets.
//!
//! Resolution order: the preset named by the last `preset` entry (default
//! `desk`), then file entries in order, then command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::ToyDatasetSpec;
use crate::encoder::ModelConfig;
use crate::masking::MaskStrategy;
use crate::optim::AdamHyper;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Soft targets `ẑ` with the multi-choice loss.
    MultiChoice,
    /// One-hot tokenizer ids with the hard-label loss.
    SingleChoice,
}

impl fmt::Display for TargetMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetMode::MultiChoice => "multi",
            TargetMode::SingleChoice => "single",
        })
    }
}

impl FromStr for TargetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "multi" => Ok(TargetMode::MultiChoice),
            "single" => Ok(TargetMode::SingleChoice),
            _ => Err(format!("unknown target mode {s:?} (expected multi|single)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetConfig {
    pub tau: f64,
    pub omega: f64,
    pub mode: TargetMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelKeys {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub vocab: usize,
    /// Recorded only; stochastic depth is not implemented.
    pub drop_path: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Optional directory of PPM/PGM images replacing the toy training split.
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerConfig {
    /// Tokenizer-space dimension; 0 means the raw patch dimension.
    pub dim: usize,
    pub iters: usize,
    /// Multiplier from pooled pixels to tokenizer space; sets the logit scale.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub layer_decay: f64,
    pub weight_decay: f64,
    pub adam_beta2: f64,
    // recorded only, not applied
    pub label_smoothing: f64,
    pub mixup: f64,
    pub cutmix: f64,
    pub drop_path: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Checkpoint period in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub mask: MaskConfig,
    pub target: TargetConfig,
    pub model: ModelKeys,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub probe: ProbeConfig,
    pub finetune: FineTuneConfig,
}

pub const PRESETS: [&str; 3] = ["desk", "paper-vitb", "paper-vitl"];

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Minutes-scale run on one CPU core: 4×128 encoder over 32×32 toy images.
    pub fn desk() -> Self {
        TrainConfig {
            preset: "desk".into(),
            seed: 0,
            epochs: 100,
            batch_size: 32,
            peak_lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 5,
            weight_decay: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: 3.0,
            checkpoint_every: 0,
            mask: MaskConfig {
                strategy: MaskStrategy::Random,
                ratio: 0.75,
            },
            target: TargetConfig {
                tau: 4.0,
                omega: 0.8,
                mode: TargetMode::MultiChoice,
            },
            model: ModelKeys {
                layers: 4,
                dim: 128,
                heads: 4,
                patch: 8,
                vocab: 512,
                drop_path: 0.0,
            },
            data: DataConfig {
                n_train: 512,
                n_test: 128,
                classes: 4,
                image_size: 32,
                channels: 3,
                dir: None,
            },
            tokenizer: TokenizerConfig {
                dim: 0,
                iters: 20,
                gain: 12.0,
            },
            probe: ProbeConfig {
                epochs: 200,
                lr: 1e-2,
            },
            finetune: FineTuneConfig {
                epochs: 20,
                batch_size: 32,
                lr: 1e-3,
                min_lr: 1e-6,
                warmup_epochs: 2,
                layer_decay: 0.65,
                weight_decay: 0.05,
                adam_beta2: 0.999,
                label_smoothing: 0.0,
                mixup: 0.0,
                cutmix: 0.0,
                drop_path: 0.0,
            },
        }
    }

    /// ViT-Base/16 recipe at 224×224 with an 8192-token vocabulary.
    pub fn paper_vitb() -> Self {
        let mut c = Self::desk();
        c.preset = "paper-vitb".into();
        c.epochs = 800;
        c.batch_size = 2048;
        c.peak_lr = 1.5e-3;
        c.min_lr = 1e-5;
        c.warmup_epochs = 10;
        c.weight_decay = 0.05;
        c.adam_beta1 = 0.9;
        c.adam_beta2 = 0.98;
        c.adam_eps = 1e-8;
        c.grad_clip = 3.0;
        c.model = ModelKeys {
            layers: 12,
            dim: 768,
            heads: 12,
            patch: 16,
            vocab: 8192,
            drop_path: 0.1,
        };
        c.data.image_size = 224;
        c.finetune = FineTuneConfig {
            epochs: 100,
            batch_size: 1024,
            lr: 4e-3,
            min_lr: 1e-6,
            warmup_epochs: 20,
            layer_decay: 0.65,
            weight_decay: 0.05,
            adam_beta2: 0.999,
            label_smoothing: 0.1,
            mixup: 0.8,
            cutmix: 1.0,
            drop_path: 0.1,
        };
        c
    }

    /// ViT-Large/16 recipe.
    pub fn paper_vitl() -> Self {
        let mut c = Self::paper_vitb();
        c.preset = "paper-vitl".into();
        c.grad_clip = 1.0;
        c.model.layers = 24;
        c.model.dim = 1024;
        c.model.heads = 16;
        c.finetune.epochs = 50;
        c.finetune.warmup_epochs = 5;
        c.finetune.layer_decay = 0.75;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-vitb" => Ok(Self::paper_vitb()),
            "paper-vitl" => Ok(Self::paper_vitl()),
            _ => Err(Error::config(
                "preset",
                format!("unknown preset {name:?} (expected one of {PRESETS:?})"),
            )),
        }
    }

    /// Every key with its current value, in canonical order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let f = &self.finetune;
        vec![
            ("preset", self.preset.clone()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("min_lr", self.min_lr.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("adam.beta1", self.adam_beta1.to_string()),
            ("adam.beta2", self.adam_beta2.to_string()),
            ("adam.eps", self.adam_eps.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("mask.strategy", self.mask.strategy.to_string()),
            ("mask.ratio", self.mask.ratio.to_string()),
            ("target.tau", self.target.tau.to_string()),
            ("target.omega", self.target.omega.to_string()),
            ("target.mode", self.target.mode.to_string()),
            ("model.layers", self.model.layers.to_string()),
            ("model.dim", self.model.dim.to_string()),
            ("model.heads", self.model.heads.to_string()),
            ("model.patch", self.model.patch.to_string()),
            ("model.vocab", self.model.vocab.to_string()),
            ("model.drop_path", self.model.drop_path.to_string()),
            ("data.n_train", self.data.n_train.to_string()),
            ("data.n_test", self.data.n_test.to_string()),
            ("data.classes", self.data.classes.to_string()),
            ("data.image_size", self.data.image_size.to_string()),
            ("data.channels", self.data.channels.to_string()),
            (
                "data.dir",
                self.data
                    .dir
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("tokenizer.dim", self.tokenizer.dim.to_string()),
            ("tokenizer.iters", self.tokenizer.iters.to_string()),
            ("tokenizer.gain", self.tokenizer.gain.to_string()),
            ("probe.epochs", self.probe.epochs.to_string()),
            ("probe.lr", self.probe.lr.to_string()),
            ("finetune.epochs", f.epochs.to_string()),
            ("finetune.batch_size", f.batch_size.to_string()),
            ("finetune.lr", f.lr.to_string()),
            ("finetune.min_lr", f.min_lr.to_string()),
            ("finetune.warmup_epochs", f.warmup_epochs.to_string()),
            ("finetune.layer_decay", f.layer_decay.to_string()),
            ("finetune.weight_decay", f.weight_decay.to_string()),
            ("finetune.adam_beta2", f.adam_beta2.to_string()),
            ("finetune.label_smoothing", f.label_smoothing.to_string()),
            ("finetune.mixup", f.mixup.to_string()),
            ("finetune.cutmix", f.cutmix.to_string()),
            ("finetune.drop_path", f.drop_path.to_string()),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::desk()
            .to_pairs()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    /// Sets one key from its textual value (no cross-key validation).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            value
                .trim()
                .parse()
                .map_err(|e| Error::config(key, format!("cannot parse {value:?}: {e}")))
        }
        let v = value;
        let f = &mut self.finetune;
        match key {
            "preset" => {
                Self::preset(v)?;
                self.preset = v.to_string();
            }
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "peak_lr" => self.peak_lr = parse(key, v)?,
            "min_lr" => self.min_lr = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "adam.beta1" => self.adam_beta1 = parse(key, v)?,
            "adam.beta2" => self.adam_beta2 = parse(key, v)?,
            "adam.eps" => self.adam_eps = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "mask.strategy" => self.mask.strategy = parse(key, v)?,
            "mask.ratio" => self.mask.ratio = parse(key, v)?,
            "target.tau" => self.target.tau = parse(key, v)?,
            "target.omega" => self.target.omega = parse(key, v)?,
            "target.mode" => self.target.mode = parse(key, v)?,
            "model.layers" => self.model.layers = parse(key, v)?,
            "model.dim" => self.model.dim = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.patch" => self.model.patch = parse(key, v)?,
            "model.vocab" => self.model.vocab = parse(key, v)?,
            "model.drop_path" => self.model.drop_path = parse(key, v)?,
            "data.n_train" => self.data.n_train = parse(key, v)?,
            "data.n_test" => self.data.n_test = parse(key, v)?,
            "data.classes" => self.data.classes = parse(key, v)?,
            "data.image_size" => self.data.image_size = parse(key, v)?,
            "data.channels" => self.data.channels = parse(key, v)?,
            "data.dir" => {
                self.data.dir = if v.trim().is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v.trim()))
                }
            }
            "tokenizer.dim" => self.tokenizer.dim = parse(key, v)?,
            "tokenizer.iters" => self.tokenizer.iters = parse(key, v)?,
            "tokenizer.gain" => self.tokenizer.gain = parse(key, v)?,
            "probe.epochs" => self.probe.epochs = parse(key, v)?,
            "probe.lr" => self.probe.lr = parse(key, v)?,
            "finetune.epochs" => f.epochs = parse(key, v)?,
            "finetune.batch_size" => f.batch_size = parse(key, v)?,
            "finetune.lr" => f.lr = parse(key, v)?,
            "finetune.min_lr" => f.min_lr = parse(key, v)?,
            "finetune.warmup_epochs" => f.warmup_epochs = parse(key, v)?,
            "finetune.layer_decay" => f.layer_decay = parse(key, v)?,
            "finetune.weight_decay" => f.weight_decay = parse(key, v)?,
            "finetune.adam_beta2" => f.adam_beta2 = parse(key, v)?,
            "finetune.label_smoothing" => f.label_smoothing = parse(key, v)?,
            "finetune.mixup" => f.mixup = parse(key, v)?,
            "finetune.cutmix" => f.cutmix = parse(key, v)?,
            "finetune.drop_path" => f.drop_path = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// Builds a config from ordered `(key, value)` entries.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k.as_ref() == "preset")
            .map(|(_, v)| v.as_ref().trim().to_string())
            .unwrap_or_else(|| "desk".to_string());
        let mut cfg = Self::preset(&preset)?;
        for (k, v) in pairs {
            if k.as_ref() != "preset" {
                cfg.set(k.as_ref(), v.as_ref())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses config text: one `key = value` per line, `#` comments.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    line.split_whitespace().next().unwrap_or(line),
                    format!("line {}: expected `key = value`", lineno + 1),
                )
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Loads an optional file and applies `--key value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => Self::parse_text(&std::fs::read_to_string(p)?)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    /// Canonical `key = value` text; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Keys that are accepted but have no effect, with non-default values.
    pub fn unimplemented_keys(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        let checks = [
            ("model.drop_path", self.model.drop_path),
            ("finetune.label_smoothing", self.finetune.label_smoothing),
            ("finetune.mixup", self.finetune.mixup),
            ("finetune.cutmix", self.finetune.cutmix),
            ("finetune.drop_path", self.finetune.drop_path),
        ];
        for (k, v) in checks {
            if v != 0.0 {
                out.push(k);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(Error::config(k, m));
        let pos = |k: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                err(k, format!("must be positive, got {v}"))
            }
        };
        pos("peak_lr", self.peak_lr)?;
        pos("min_lr", self.min_lr)?;
        if self.min_lr > self.peak_lr {
            return err(
                "min_lr",
                format!("{} exceeds peak_lr {}", self.min_lr, self.peak_lr),
            );
        }
        if self.epochs == 0 {
            return err("epochs", "must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return err(
                "warmup_epochs",
                format!(
                    "{} must be below epochs {}",
                    self.warmup_epochs, self.epochs
                ),
            );
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.weight_decay) {
            return err(
                "weight_decay",
                format!("{} outside [0, 1]", self.weight_decay),
            );
        }
        for (k, v) in [
            ("adam.beta1", self.adam_beta1),
            ("adam.beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return err(k, format!("{v} outside [0, 1)"));
            }
        }
        pos("adam.eps", self.adam_eps)?;
        if !(self.grad_clip >= 0.0) {
            return err("grad_clip", format!("{} must be ≥ 0", self.grad_clip));
        }
        if !(self.mask.ratio > 0.0 && self.mask.ratio < 1.0) {
            return err("mask.ratio", format!("{} outside (0, 1)", self.mask.ratio));
        }
        pos("target.tau", self.target.tau)?;
        if !(0.0..=1.0).contains(&self.target.omega) {
            return err(
                "target.omega",
                format!("{} outside the range [0, 1]", self.target.omega),
            );
        }
        if self.model.patch == 0 || self.data.image_size % self.model.patch != 0 {
            return err(
                "data.image_size",
                format!(
                    "{} is not divisible by model.patch {}",
                    self.data.image_size, self.model.patch
                ),
            );
        }
        self.model_config().validate()?;
        if self.data.classes < 2 {
            return err("data.classes", "need at least 2 classes".into());
        }
        let patch_dim = self.model_config().patch_dim();
        if self.tokenizer.dim != 0 && patch_dim % self.tokenizer.dim != 0 {
            return err(
                "tokenizer.dim",
                format!(
                    "{} does not divide the patch dimension {patch_dim}",
                    self.tokenizer.dim
                ),
            );
        }
        if self.tokenizer.iters == 0 {
            return err("tokenizer.iters", "must be positive".into());
        }
        pos("tokenizer.gain", self.tokenizer.gain)?;
        if self.probe.epochs == 0 {
            return err("probe.epochs", "must be positive".into());
        }
        pos("probe.lr", self.probe.lr)?;
        let f = &self.finetune;
        pos("finetune.lr", f.lr)?;
        pos("finetune.min_lr", f.min_lr)?;
        if f.min_lr > f.lr {
            return err(
                "finetune.min_lr",
                format!("{} exceeds finetune.lr {}", f.min_lr, f.lr),
            );
        }
        if f.epochs == 0 || f.warmup_epochs >= f.epochs {
            return err(
                "finetune.warmup_epochs",
                format!(
                    "{} must be below finetune.epochs {}",
                    f.warmup_epochs, f.epochs
                ),
            );
        }
        if f.batch_size == 0 {
            return err("finetune.batch_size", "must be positive".into());
        }
        if !(f.layer_decay > 0.0 && f.layer_decay <= 1.0) {
            return err(
                "finetune.layer_decay",
                format!("{} outside (0, 1]", f.layer_decay),
            );
        }
        if !(0.0..1.0).contains(&f.adam_beta2) {
            return err(
                "finetune.adam_beta2",
                format!("{} outside [0, 1)", f.adam_beta2),
            );
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let side = self.data.image_size / self.model.patch;
        side * side
    }

    pub fn grid_side(&self) -> usize {
        self.data.image_size / self.model.patch
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.model.layers,
            dim: self.model.dim,
            heads: self.model.heads,
            patch: self.model.patch,
            channels: self.data.channels,
            tokens: self.tokens(),
            vocab: self.model.vocab,
        }
    }

    pub fn token_dim(&self) -> usize {
        if self.tokenizer.dim == 0 {
            self.model_config().patch_dim()
        } else {
            self.tokenizer.dim
        }
    }

    pub fn dataset_spec(&self) -> ToyDatasetSpec {
        ToyDatasetSpec {
            seed: self.seed,
            n_train: self.data.n_train,
            n_test: self.data.n_test,
            classes: self.data.classes,
            image_size: self.data.image_size,
            patch_size: self.model.patch,
            channels: self.data.channels,
        }
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Splits `--key value` / `--key=value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::config(a.as_str(), "overrides must look like `--key value`"))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| Error::config(key, "missing value"))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}
