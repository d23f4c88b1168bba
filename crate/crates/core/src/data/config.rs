//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default, unknown keys are rejected, and [`ExperimentConfig::to_text`]
//! renders the resolved values in a canonical form that parses back to the
//! same configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::heads::Task;
use crate::model::{ConvLayer, ModelConfig};
use crate::tensor::Precision;
use crate::trainer::{AdamConfig, TrainSchedule};

use super::synth::SynthSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config file {path} not found")]
    Missing { path: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("{key}: {msg}")]
    Domain { key: String, msg: String },
}

/// Every tunable of the experiment pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,

    pub data_rate: u32,
    pub data_keywords: usize,
    pub data_speakers: usize,
    pub data_train_per_pair: usize,
    pub data_test_per_pair: usize,
    pub data_sample_length: usize,
    pub data_noise: f64,

    pub model_conv_layers: Vec<ConvLayer>,
    pub model_dim: usize,
    pub model_heads: usize,
    pub model_ffn_dim: usize,
    pub model_pos_conv_kernel: usize,
    pub model_pos_conv_groups: usize,
    pub model_dropout: f64,

    pub teacher_layers: usize,
    pub teacher_iterations: usize,
    pub teacher_lr: f64,
    pub teacher_batch_size: usize,
    pub teacher_sv_margin: f64,

    pub student_layers: usize,
    pub distill_teacher_layers: Vec<usize>,
    pub distill_steps: usize,
    pub distill_lr: f64,
    pub distill_batch_size: usize,

    pub kws_classes: usize,
    pub sv_variant: String,
    pub sv_margin: f64,
    pub sv_scale: f64,

    pub train_lr: f64,
    pub train_batch_size: usize,
    pub train_iterations: usize,
    /// `None` disables clipping (written as `off`).
    pub train_clip_norm: Option<f64>,
    pub train_shared_optimizer: bool,
    /// 0 disables periodic checkpoints.
    pub train_checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            precision: Precision::F32,
            data_rate: 16_000,
            data_keywords: 12,
            data_speakers: 8,
            data_train_per_pair: 4,
            data_test_per_pair: 2,
            data_sample_length: 320,
            data_noise: 0.3,
            model_conv_layers: ModelConfig::toy(1).conv_layers,
            model_dim: 64,
            model_heads: 4,
            model_ffn_dim: 128,
            model_pos_conv_kernel: 8,
            model_pos_conv_groups: 4,
            model_dropout: 0.0,
            teacher_layers: 4,
            teacher_iterations: 1500,
            teacher_lr: 1e-3,
            teacher_batch_size: 8,
            teacher_sv_margin: 0.2,
            student_layers: 2,
            distill_teacher_layers: vec![2, 3, 4],
            distill_steps: 500,
            distill_lr: 1e-3,
            distill_batch_size: 8,
            kws_classes: 12,
            sv_variant: "additive".into(),
            sv_margin: 0.2,
            sv_scale: 30.0,
            train_lr: 1e-4,
            train_batch_size: 16,
            train_iterations: 2000,
            train_clip_norm: Some(5.0),
            train_shared_optimizer: true,
            train_checkpoint_every: 0,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Domain {
        key: key.to_string(),
        msg: format!("cannot parse {v:?}"),
    })
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    v.split(',').map(|s| parse_value(key, s.trim())).collect()
}

fn parse_conv(key: &str, v: &str) -> Result<Vec<ConvLayer>, ConfigError> {
    v.split(',')
        .map(|layer| {
            let parts: Vec<usize> = layer
                .split(':')
                .map(|s| parse_value(key, s.trim()))
                .collect::<Result<_, _>>()?;
            match parts[..] {
                [c, k, s] => Ok(ConvLayer::new(c, k, s)),
                _ => Err(ConfigError::Domain {
                    key: key.to_string(),
                    msg: format!("layer {layer:?} is not channels:kernel:stride"),
                }),
            }
        })
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "precision",
        "data.rate",
        "data.keywords",
        "data.speakers",
        "data.train_per_pair",
        "data.test_per_pair",
        "data.sample_length",
        "data.noise",
        "model.conv_layers",
        "model.dim",
        "model.heads",
        "model.ffn_dim",
        "model.pos_conv_kernel",
        "model.pos_conv_groups",
        "model.dropout",
        "teacher.layers",
        "teacher.iterations",
        "teacher.lr",
        "teacher.batch_size",
        "teacher.sv_margin",
        "student.layers",
        "distill.teacher_layers",
        "distill.steps",
        "distill.lr",
        "distill.batch_size",
        "kws.classes",
        "sv.variant",
        "sv.margin",
        "sv.scale",
        "train.lr",
        "train.batch_size",
        "train.iterations",
        "train.clip_norm",
        "train.shared_optimizer",
        "train.checkpoint_every",
    ];

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        if !path.exists() {
            return Err(ConfigError::Missing {
                path: path.display().to_string(),
            });
        }
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                msg: format!("expected `key = value`, got {trimmed:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !Self::KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if value.is_empty() {
                return Err(ConfigError::Parse {
                    line,
                    msg: format!("missing value for {key}"),
                });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form without cross-key validation.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "precision" => {
                self.precision = Precision::parse(v).ok_or_else(|| ConfigError::Domain {
                    key: key.into(),
                    msg: format!("expected f32 or f64, got {v:?}"),
                })?
            }
            "data.rate" => self.data_rate = parse_value(key, v)?,
            "data.keywords" => self.data_keywords = parse_value(key, v)?,
            "data.speakers" => self.data_speakers = parse_value(key, v)?,
            "data.train_per_pair" => self.data_train_per_pair = parse_value(key, v)?,
            "data.test_per_pair" => self.data_test_per_pair = parse_value(key, v)?,
            "data.sample_length" => self.data_sample_length = parse_value(key, v)?,
            "data.noise" => self.data_noise = parse_value(key, v)?,
            "model.conv_layers" => self.model_conv_layers = parse_conv(key, v)?,
            "model.dim" => self.model_dim = parse_value(key, v)?,
            "model.heads" => self.model_heads = parse_value(key, v)?,
            "model.ffn_dim" => self.model_ffn_dim = parse_value(key, v)?,
            "model.pos_conv_kernel" => self.model_pos_conv_kernel = parse_value(key, v)?,
            "model.pos_conv_groups" => self.model_pos_conv_groups = parse_value(key, v)?,
            "model.dropout" => self.model_dropout = parse_value(key, v)?,
            "teacher.layers" => self.teacher_layers = parse_value(key, v)?,
            "teacher.iterations" => self.teacher_iterations = parse_value(key, v)?,
            "teacher.lr" => self.teacher_lr = parse_value(key, v)?,
            "teacher.batch_size" => self.teacher_batch_size = parse_value(key, v)?,
            "teacher.sv_margin" => self.teacher_sv_margin = parse_value(key, v)?,
            "student.layers" => self.student_layers = parse_value(key, v)?,
            "distill.teacher_layers" => self.distill_teacher_layers = parse_list(key, v)?,
            "distill.steps" => self.distill_steps = parse_value(key, v)?,
            "distill.lr" => self.distill_lr = parse_value(key, v)?,
            "distill.batch_size" => self.distill_batch_size = parse_value(key, v)?,
            "kws.classes" => self.kws_classes = parse_value(key, v)?,
            "sv.variant" => self.sv_variant = v.to_string(),
            "sv.margin" => self.sv_margin = parse_value(key, v)?,
            "sv.scale" => self.sv_scale = parse_value(key, v)?,
            "train.lr" => self.train_lr = parse_value(key, v)?,
            "train.batch_size" => self.train_batch_size = parse_value(key, v)?,
            "train.iterations" => self.train_iterations = parse_value(key, v)?,
            "train.clip_norm" => {
                self.train_clip_norm = if v == "off" { None } else { Some(parse_value(key, v)?) }
            }
            "train.shared_optimizer" => self.train_shared_optimizer = parse_value(key, v)?,
            "train.checkpoint_every" => self.train_checkpoint_every = parse_value(key, v)?,
            _ => {
                return Err(ConfigError::Domain {
                    key: key.to_string(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: String| {
            Err(ConfigError::Domain {
                key: key.to_string(),
                msg,
            })
        };
        let positive = |key: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                bad(key, format!("must be positive, got {v}"))
            }
        };
        positive("teacher.lr", self.teacher_lr)?;
        positive("distill.lr", self.distill_lr)?;
        positive("train.lr", self.train_lr)?;
        positive("sv.scale", self.sv_scale)?;
        if !(self.sv_margin.is_finite() && self.sv_margin >= 0.0) {
            return bad("sv.margin", format!("must be non-negative, got {}", self.sv_margin));
        }
        if !(self.teacher_sv_margin.is_finite() && self.teacher_sv_margin >= 0.0) {
            return bad(
                "teacher.sv_margin",
                format!("must be non-negative, got {}", self.teacher_sv_margin),
            );
        }
        if self.sv_variant != "additive" {
            return bad("sv.variant", format!("unsupported variant {:?}", self.sv_variant));
        }
        if let Some(c) = self.train_clip_norm {
            positive("train.clip_norm", c)?;
        }
        for (key, v) in [
            ("teacher.batch_size", self.teacher_batch_size),
            ("distill.batch_size", self.distill_batch_size),
            ("train.batch_size", self.train_batch_size),
            ("teacher.layers", self.teacher_layers),
            ("student.layers", self.student_layers),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        if self.student_layers > self.teacher_layers {
            return bad(
                "student.layers",
                format!("{} exceeds teacher.layers {}", self.student_layers, self.teacher_layers),
            );
        }
        if self.kws_classes != self.data_keywords {
            return bad(
                "kws.classes",
                format!("{} differs from data.keywords {}", self.kws_classes, self.data_keywords),
            );
        }
        let l = &self.distill_teacher_layers;
        if l.is_empty() || l.windows(2).any(|w| w[0] >= w[1]) || l[0] == 0 || l[l.len() - 1] > self.teacher_layers {
            return bad(
                "distill.teacher_layers",
                format!("{l:?} must be strictly increasing within 1..={}", self.teacher_layers),
            );
        }
        if self.model_conv_layers.is_empty()
            || self
                .model_conv_layers
                .iter()
                .any(|c| c.channels == 0 || c.kernel == 0 || c.stride == 0)
        {
            return bad("model.conv_layers", "needs at least one layer with non-zero extents".into());
        }
        for (key, v) in [
            ("model.dim", self.model_dim),
            ("model.heads", self.model_heads),
            ("model.ffn_dim", self.model_ffn_dim),
            ("model.pos_conv_kernel", self.model_pos_conv_kernel),
            ("model.pos_conv_groups", self.model_pos_conv_groups),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        for (key, d) in [("model.heads", self.model_heads), ("model.pos_conv_groups", self.model_pos_conv_groups)] {
            if self.model_dim % d != 0 {
                return bad(key, format!("{d} does not divide model.dim {}", self.model_dim));
            }
        }
        if !(0.0..1.0).contains(&self.model_dropout) {
            return bad("model.dropout", format!("must lie in [0, 1), got {}", self.model_dropout));
        }
        self.teacher_config()
            .validate()
            .or_else(|e| bad("model", e.to_string()))?;
        self.synth_spec()
            .validate(self.teacher_config().receptive_field())
            .or_else(|e| match e {
                super::DataError::InvalidSpec { key, msg } => bad(key, msg),
                other => bad("data", other.to_string()),
            })?;
        Ok(())
    }

    /// Canonical rendering of every key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let conv: Vec<String> = self
            .model_conv_layers
            .iter()
            .map(|c| format!("{}:{}:{}", c.channels, c.kernel, c.stride))
            .collect();
        let clip = self.train_clip_norm.map_or("off".to_string(), |c| c.to_string());
        let precision = self.precision.name().to_string();
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("precision", precision),
            ("data.rate", self.data_rate.to_string()),
            ("data.keywords", self.data_keywords.to_string()),
            ("data.speakers", self.data_speakers.to_string()),
            ("data.train_per_pair", self.data_train_per_pair.to_string()),
            ("data.test_per_pair", self.data_test_per_pair.to_string()),
            ("data.sample_length", self.data_sample_length.to_string()),
            ("data.noise", self.data_noise.to_string()),
            ("model.conv_layers", conv.join(",")),
            ("model.dim", self.model_dim.to_string()),
            ("model.heads", self.model_heads.to_string()),
            ("model.ffn_dim", self.model_ffn_dim.to_string()),
            ("model.pos_conv_kernel", self.model_pos_conv_kernel.to_string()),
            ("model.pos_conv_groups", self.model_pos_conv_groups.to_string()),
            ("model.dropout", self.model_dropout.to_string()),
            ("teacher.layers", self.teacher_layers.to_string()),
            ("teacher.iterations", self.teacher_iterations.to_string()),
            ("teacher.lr", self.teacher_lr.to_string()),
            ("teacher.batch_size", self.teacher_batch_size.to_string()),
            ("teacher.sv_margin", self.teacher_sv_margin.to_string()),
            ("student.layers", self.student_layers.to_string()),
            ("distill.teacher_layers", join(&self.distill_teacher_layers)),
            ("distill.steps", self.distill_steps.to_string()),
            ("distill.lr", self.distill_lr.to_string()),
            ("distill.batch_size", self.distill_batch_size.to_string()),
            ("kws.classes", self.kws_classes.to_string()),
            ("sv.variant", self.sv_variant.clone()),
            ("sv.margin", self.sv_margin.to_string()),
            ("sv.scale", self.sv_scale.to_string()),
            ("train.lr", self.train_lr.to_string()),
            ("train.batch_size", self.train_batch_size.to_string()),
            ("train.iterations", self.train_iterations.to_string()),
            ("train.clip_norm", clip),
            ("train.shared_optimizer", self.train_shared_optimizer.to_string()),
            ("train.checkpoint_every", self.train_checkpoint_every.to_string()),
        ];
        debug_assert_eq!(pairs.len(), Self::KEYS.len());
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    fn encoder_config(&self, layers: usize) -> ModelConfig {
        ModelConfig {
            conv_layers: self.model_conv_layers.clone(),
            model_dim: self.model_dim,
            num_transformer_layers: layers,
            num_heads: self.model_heads,
            ffn_dim: self.model_ffn_dim,
            pos_conv_kernel: self.model_pos_conv_kernel,
            pos_conv_groups: self.model_pos_conv_groups,
            dropout: self.model_dropout,
        }
    }

    pub fn teacher_config(&self) -> ModelConfig {
        self.encoder_config(self.teacher_layers)
    }

    pub fn student_config(&self) -> ModelConfig {
        self.encoder_config(self.student_layers)
    }

    /// Encoder config with an explicit depth, e.g. one inferred from a checkpoint.
    pub fn config_with_depth(&self, layers: usize) -> ModelConfig {
        self.encoder_config(layers)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_keywords: self.data_keywords,
            num_speakers: self.data_speakers,
            train_per_pair: self.data_train_per_pair,
            test_per_pair: self.data_test_per_pair,
            sample_length: self.data_sample_length,
            rate: self.data_rate,
            noise: self.data_noise,
            seed: crate::rng::derive_seed(self.seed, "data"),
        }
    }

    /// Fine-tuning schedule for the given tasks. `train.iterations` is the
    /// multi-task budget; a single-task run gets half of it, so every task
    /// sees the same number of updates either way.
    pub fn schedule(&self, tasks: Vec<Task>, freeze: bool) -> TrainSchedule {
        let max_iterations = if tasks.len() == 1 {
            self.train_iterations / 2
        } else {
            self.train_iterations
        };
        TrainSchedule {
            tasks,
            max_iterations,
            batch_size: self.train_batch_size,
            freeze_srl: freeze,
            seed: crate::rng::derive_seed(self.seed, "finetune"),
            adam: AdamConfig::with_lr(self.train_lr),
            clip_norm: self.train_clip_norm,
            shared_optimizer: self.train_shared_optimizer,
            precision: self.precision,
        }
    }

    /// Supervised multi-task schedule used to train the teacher.
    pub fn teacher_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            tasks: vec![Task::Kws, Task::Sv],
            max_iterations: self.teacher_iterations,
            batch_size: self.teacher_batch_size,
            freeze_srl: false,
            seed: crate::rng::derive_seed(self.seed, "teacher"),
            adam: AdamConfig::with_lr(self.teacher_lr),
            clip_norm: self.train_clip_norm,
            shared_optimizer: true,
            precision: self.precision,
        }
    }
}
