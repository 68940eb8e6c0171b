//! Training configuration: built-in profiles, TOML files and dotted-path
//! overrides, merged in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::DEFAULT_PCK_THRESHOLD_MM;
use crate::model::ModelConfig;
use crate::pose2d::ErrorSynthesisConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: String,
    pub batch_size: usize,
    /// Feed error-synthesized 2D poses instead of clean GT.
    pub synthesize_errors: bool,
    pub errors: ErrorSynthesisConfig,
    pub seed: u64,
    pub pck_threshold_mm: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            batch_size: 32,
            synthesize_errors: true,
            errors: ErrorSynthesisConfig::default(),
            seed: 1234,
            pck_threshold_mm: DEFAULT_PCK_THRESHOLD_MM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// "desk" or "paper"; selects the defaults the other keys override.
    pub profile: String,
    pub dataset: PathBuf,
    pub split: String,
    pub output_dir: PathBuf,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Zero-based epochs at whose start the rate is divided by the factor.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    /// Use only the first N persons of the split.
    pub max_samples: Option<usize>,
    /// Probability that a training sample gets a synthesized 2D pose.
    pub error_prob: f64,
    pub errors: ErrorSynthesisConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    /// Write a checkpoint after every epoch, not only the last.
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// CPU-friendly profile: 64 crop, C=32, C′=128, D=8, batch 16.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            dataset: PathBuf::from("data"),
            split: "train".into(),
            output_dir: PathBuf::from("runs/default"),
            batch_size: 16,
            learning_rate: 1e-4,
            epochs: 6,
            lr_decay_epochs: vec![3, 5],
            lr_decay_factor: 10.0,
            seed: 0,
            max_samples: None,
            error_prob: 1.0,
            errors: ErrorSynthesisConfig::default(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            checkpoint_every_epoch: true,
        }
    }

    /// Full-scale profile: 256 crop, batch 64.
    pub fn paper() -> Self {
        Self {
            profile: "paper".into(),
            batch_size: 64,
            model: ModelConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown profile '{other}' (desk, paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.eval.batch_size == 0 {
            return Err(Error::Config("batch sizes and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.lr_decay_factor >= 1.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be finite and >= 1, got {}",
                self.lr_decay_factor
            )));
        }
        if let Some(&e) = self.lr_decay_epochs.iter().find(|&&e| e >= self.epochs) {
            return Err(Error::Config(format!(
                "decay epoch {e} is not below epochs = {}",
                self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.error_prob) {
            return Err(Error::Config(format!("error_prob {} outside [0,1]", self.error_prob)));
        }
        if self.max_samples == Some(0) {
            return Err(Error::Config("max_samples must be positive when set".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0,1) and eps be positive".into()));
        }
        self.errors.validate()?;
        self.eval.errors.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    /// Learning rate for a zero-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let n = self.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.learning_rate / self.lr_decay_factor.powi(n as i32)
    }

    /// Profile defaults, then the TOML text, then `key.path=value`
    /// overrides. Values parse as TOML and fall back to bare strings.
    pub fn from_sources(toml_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = match toml_text {
            Some(t) => toml::from_str(t).map_err(|e| Error::Config(format!("config file: {e}")))?,
            None => toml::Table::new(),
        };
        let mut parsed = Vec::with_capacity(overrides.len());
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            parsed.push((key.trim().to_string(), parse_value(raw.trim())));
        }
        let profile = parsed
            .iter()
            .rev()
            .find(|(k, _)| k == "profile")
            .map(|(_, v)| v.clone())
            .or_else(|| file.get("profile").cloned())
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(Error::Config(format!("profile must be a string, got {other}"))),
            })
            .transpose()?
            .unwrap_or_else(|| "desk".into());

        let mut merged = toml::Value::try_from(Self::profile(&profile)?)
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, toml::Value::Table(file));
        for (key, value) in parsed {
            set_path(&mut merged, &key, value)?;
        }
        let cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .transpose()?;
        Self::from_sources(text.as_deref(), overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key '{key}'")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{part}' is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{key}' does not address a table entry")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
