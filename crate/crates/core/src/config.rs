//! Declarative experiment description, loaded from TOML.
//!
//! Unknown keys are rejected at every level. Overrides are dotted
//! `key=value` pairs applied to the parsed tree before it is interpreted;
//! values use TOML syntax and fall back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discriminator::VitConfig;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, Variant};
use crate::optim::{OptimizerConfig, SchedulePhase};

/// Which embedding backend feeds the fusion layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Stub,
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub backend: Backend,
    /// Weight seed of the stub backend.
    pub seed: u64,
    /// Manifest of the pretrained backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Stub,
            seed: 0,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Directory of training images (scanned recursively).
    pub dataset: PathBuf,
    /// Run directory for checkpoints, metrics and the resolved config.
    pub output_dir: PathBuf,
    pub variant: Variant,
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: u64,
    /// Stop after this many global steps even if epochs remain.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub lambda_l1: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    pub optimizer: OptimizerConfig,
    /// Discriminator optimizer; the generator's settings when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer_d: Option<OptimizerConfig>,
    /// Learning-rate phases applied to both networks by global step.
    pub schedule: Vec<SchedulePhase>,
    pub extractor: ExtractorConfig,
    pub generator: GeneratorConfig,
    pub discriminator: VitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data/train"),
            output_dir: PathBuf::from("runs/default"),
            variant: Variant::VitIGan,
            image_size: 256,
            batch_size: 16,
            epochs: 50,
            max_steps: None,
            lambda_l1: crate::losses::DEFAULT_LAMBDA_L1,
            seed: 0,
            checkpoint_interval: 1000,
            optimizer: OptimizerConfig::default(),
            optimizer_d: None,
            schedule: Vec::new(),
            extractor: ExtractorConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: VitConfig::default(),
        }
    }
}

/// Recipes shipped with the repository.
pub const PRESETS: [(&str, &str); 3] = [
    ("unsplash-50ep", include_str!("../../../presets/unsplash-50ep.toml")),
    ("coco-2phase", include_str!("../../../presets/coco-2phase.toml")),
    ("desk-64", include_str!("../../../presets/desk-64.toml")),
];

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

/// Parse a `key.path=value` override into the TOML tree.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut table = tree;
    for (depth, part) in parts.iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override `{key}`: `{}` is not a table", parts[..=depth].join(".")))
        })?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

impl TrainConfig {
    /// Parse TOML text, apply overrides in order, then validate.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: TrainConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Read `path`, or a shipped preset when `path` names one.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = match path.to_str().and_then(preset_source) {
            Some(src) if !path.exists() => src.to_string(),
            _ => std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("TrainConfig serializes to TOML")
    }

    pub fn optimizer_d(&self) -> OptimizerConfig {
        self.optimizer_d.unwrap_or(self.optimizer)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive when set".into()));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::Config(format!("lambda_l1 must be finite and non-negative, got {}", self.lambda_l1)));
        }
        self.optimizer.validate("optimizer")?;
        if let Some(d) = &self.optimizer_d {
            d.validate("optimizer_d")?;
        }
        for (i, p) in self.schedule.iter().enumerate() {
            if p.steps == 0 {
                return Err(Error::Config(format!("schedule[{i}].steps must be positive")));
            }
            if !(p.lr >= 0.0 && p.lr.is_finite()) {
                return Err(Error::Config(format!("schedule[{i}].lr must be finite and non-negative")));
            }
        }
        self.generator.validate()?;
        self.discriminator.validate()?;
        let r = self.generator.reduction();
        if self.image_size == 0 || self.image_size % r != 0 {
            return Err(Error::Config(format!("image_size {} must be a positive multiple of {r}", self.image_size)));
        }
        if self.discriminator.image_size != self.image_size {
            return Err(Error::Config(format!(
                "discriminator.image_size ({}) must equal image_size ({})",
                self.discriminator.image_size, self.image_size
            )));
        }
        if self.discriminator.in_channels != 3 {
            return Err(Error::Config("discriminator.in_channels must be 3 (L, a, b)".into()));
        }
        if self.extractor.backend == Backend::Pretrained && self.extractor.weights.is_none() {
            return Err(Error::Config("extractor.weights is required for the pretrained backend".into()));
        }
        Ok(())
    }
}
