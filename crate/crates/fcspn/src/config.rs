//! Flat key-value run configuration.
//!
//! Keys are `section.name`. A `[section]` header prefixes the keys below it,
//! `#` and `;` start comments, and unknown or repeated keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fcspn_core::data::SplitStrategy;
use fcspn_core::model::ModelConfig;
use fcspn_core::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("override {entry:?}: {message}")]
    Override { entry: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Every key with its default value and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "model.base_channels",
        "16",
        "channels after the stem; doubled by each down block",
    ),
    ("model.dsr_per_stage", "1", "separable residual units per down block"),
    ("model.attention", "true", "channel attention in the down blocks"),
    ("train.batch_size", "20", "crops per step"),
    ("train.epochs", "60", "passes over the training pixels"),
    ("train.learning_rate", "0.01", "SGD step size"),
    ("train.momentum", "0.9", "SGD momentum"),
    ("train.weight_decay", "1e-5", "L2 coefficient on convolution weights"),
    ("train.focal_gamma", "2", "focal loss focusing exponent"),
    ("train.crop_rows", "64", "crop height, clamped to the image"),
    ("train.crop_cols", "64", "crop width, clamped to the image"),
    ("train.seed", "0", "parameter initialization and crop sampling seed"),
    ("cspn.steps", "24", "propagation steps"),
    ("cspn.train", "true", "train through the propagation refinement"),
    (
        "data.strategy",
        "per_class:200",
        "per_class:N, fraction:F or indian_pines",
    ),
    ("data.split_seed", "0", "training-sample selection seed"),
    ("data.normalize", "true", "scale each band to [0, 1] before use"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub base_channels: usize,
    pub dsr_per_stage: usize,
    pub attention: bool,
    pub train: TrainConfig,
    pub cspn_steps: usize,
    pub strategy: SplitStrategy,
    pub split_seed: u64,
    pub normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            base_channels: 0,
            dsr_per_stage: 0,
            attention: false,
            train: TrainConfig::default(),
            cspn_steps: 0,
            strategy: SplitStrategy::per_class(1),
            split_seed: 0,
            normalize: false,
        };
        for (key, value, _) in KEYS {
            cfg.set(key, value).expect("documented defaults parse");
        }
        cfg
    }
}

fn parse<T: std::str::FromStr>(value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("invalid value {value:?}: {e}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid boolean {value:?}")),
    }
}

/// `per_class:N`, `fraction:F` or `indian_pines`.
pub fn parse_strategy(value: &str) -> Result<SplitStrategy, String> {
    match value.split_once(':') {
        Some(("per_class", n)) => match parse::<usize>(n)? {
            0 => Err("per_class count must be >= 1".into()),
            n => Ok(SplitStrategy::per_class(n)),
        },
        Some(("fraction", f)) => match parse::<f64>(f)? {
            f if f > 0.0 && f <= 1.0 => Ok(SplitStrategy::Fraction(f)),
            f => Err(format!("fraction must be in (0, 1], got {f}")),
        },
        None if value == "indian_pines" => Ok(SplitStrategy::indian_pines()),
        _ => Err(format!(
            "unknown strategy {value:?}; expected per_class:N, fraction:F or indian_pines"
        )),
    }
}

pub fn format_strategy(s: &SplitStrategy) -> String {
    match s {
        SplitStrategy::Fraction(f) => format!("fraction:{f}"),
        s if *s == SplitStrategy::indian_pines() => "indian_pines".into(),
        SplitStrategy::PerClass { n, .. } => format!("per_class:{n}"),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "model.base_channels" => self.base_channels = parse(value)?,
            "model.dsr_per_stage" => self.dsr_per_stage = parse(value)?,
            "model.attention" => self.attention = parse_bool(value)?,
            "train.batch_size" => t.batch_size = parse(value)?,
            "train.epochs" => t.epochs = parse(value)?,
            "train.learning_rate" => t.learning_rate = parse(value)?,
            "train.momentum" => t.momentum = parse(value)?,
            "train.weight_decay" => t.weight_decay = parse(value)?,
            "train.focal_gamma" => t.focal_gamma = parse(value)?,
            "train.crop_rows" => t.crop[0] = parse(value)?,
            "train.crop_cols" => t.crop[1] = parse(value)?,
            "train.seed" => t.seed = parse(value)?,
            "cspn.steps" => self.cspn_steps = parse(value)?,
            "cspn.train" => t.refine = parse_bool(value)?,
            "data.strategy" => self.strategy = parse_strategy(value)?,
            "data.split_seed" => self.split_seed = parse(value)?,
            "data.normalize" => self.normalize = parse_bool(value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn parse_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| ConfigError::Line {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header".into()))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let key = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if !seen.insert(key.clone()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(&key, value).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text, path)
    }

    /// Applies `key=value` overrides on top of the current values.
    pub fn apply_overrides(&mut self, entries: &[String]) -> Result<(), ConfigError> {
        for entry in entries {
            let err = |message: String| ConfigError::Override {
                entry: entry.clone(),
                message,
            };
            let (key, value) = entry.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
            self.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn model_config(&self, in_bands: usize, num_classes: usize) -> ModelConfig {
        let mut m = ModelConfig::new(in_bands, num_classes);
        m.base_channels = self.base_channels;
        m.dsr_per_stage = self.dsr_per_stage;
        m.attention_enabled = self.attention;
        m.cspn_steps = self.cspn_steps;
        m
    }

    fn value(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "model.base_channels" => self.base_channels.to_string(),
            "model.dsr_per_stage" => self.dsr_per_stage.to_string(),
            "model.attention" => self.attention.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.learning_rate" => t.learning_rate.to_string(),
            "train.momentum" => t.momentum.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.focal_gamma" => t.focal_gamma.to_string(),
            "train.crop_rows" => t.crop[0].to_string(),
            "train.crop_cols" => t.crop[1].to_string(),
            "train.seed" => t.seed.to_string(),
            "cspn.steps" => self.cspn_steps.to_string(),
            "cspn.train" => t.refine.to_string(),
            "data.strategy" => format_strategy(&self.strategy),
            "data.split_seed" => self.split_seed.to_string(),
            "data.normalize" => self.normalize.to_string(),
            _ => unreachable!("key table and accessors agree"),
        }
    }

    /// Every key with its current value and description, parseable by `parse_str`.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        for (key, _, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{key} = {}", self.value(key));
        }
        out
    }
}
