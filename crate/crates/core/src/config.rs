//! Run configuration: typed sections addressed by flat dotted keys.
//!
//! A config file is TOML whose tables are the namespaces (`[train]`,
//! `[loss]`, ...). Overrides are `key=value` strings; a bare key such as
//! `gamma` resolves to the unique full key ending in `.gamma`. Unknown and
//! ambiguous keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveConfig, SamplingStrategy};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::{OptimizerConfig, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { name: "run".into() }
    }
}

/// Dataset settings; the class count comes from `model.num_classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub cell_size: usize,
    pub noise: f64,
    pub tint: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            train_images: d.train_images,
            val_images: d.val_images,
            image_size: d.image_size,
            min_shapes: d.min_shapes,
            max_shapes: d.max_shapes,
            cell_size: d.cell_size,
            noise: d.noise,
            tint: d.tint,
            seed: d.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub temp_align: f64,
    pub align_loss_all_scales: bool,
    pub contrast_temperature: f64,
    pub positives_per_class: usize,
    pub negatives_cap: usize,
    pub sampling_strategy: SamplingStrategy,
    pub cosine_points: bool,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let c = ContrastiveConfig::default();
        Self {
            temp_align: 0.07,
            align_loss_all_scales: false,
            contrast_temperature: c.temperature,
            positives_per_class: c.positives_cap,
            negatives_cap: c.negatives_cap,
            sampling_strategy: c.strategy,
            cosine_points: c.cosine,
            gamma: LossWeights::default().gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total optimisation steps.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub grad_clip: f64,
    pub image_lr_mult: f64,
    pub freeze_text_encoder: bool,
    pub seed: u64,
    /// Validation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 2e-3,
            optimizer: o.kind,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            grad_clip: o.grad_clip,
            image_lr_mult: 0.1,
            freeze_text_encoder: true,
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            eval_batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn bad(key: &str, e: impl std::fmt::Display) -> Error {
    Error::config(key, e.to_string())
}

/// Coerces `value` to the TOML type of `like`.
fn coerce(key: &str, value: toml::Value, like: &toml::Value) -> Result<toml::Value> {
    use toml::Value as V;
    Ok(match (like, value) {
        (V::Float(_), V::Integer(i)) => V::Float(i as f64),
        (V::Float(_), V::Float(f)) => V::Float(f),
        (V::Integer(_), V::Integer(i)) => V::Integer(i),
        (V::Boolean(_), V::Boolean(b)) => V::Boolean(b),
        (V::String(_), V::String(s)) => V::String(s),
        (like, v) => {
            return Err(bad(
                key,
                format!("expected {}, got {}", like.type_str(), v.type_str()),
            ))
        }
    })
}

/// Parses an override string as the TOML type of `like`.
fn parse_as(key: &str, raw: &str, like: &toml::Value) -> Result<toml::Value> {
    use toml::Value as V;
    let raw = raw.trim();
    Ok(match like {
        V::Float(_) => V::Float(raw.parse::<f64>().map_err(|e| bad(key, e))?),
        V::Integer(_) => V::Integer(raw.parse::<i64>().map_err(|e| bad(key, e))?),
        V::Boolean(_) => V::Boolean(raw.parse::<bool>().map_err(|e| bad(key, e))?),
        _ => V::String(raw.trim_matches('"').to_string()),
    })
}

impl RunConfig {
    fn flat(&self) -> BTreeMap<String, toml::Value> {
        let v = toml::Value::try_from(self).expect("config serialises");
        let mut out = BTreeMap::new();
        flatten("", &v, &mut out);
        out
    }

    /// Every full dotted key, sorted.
    pub fn keys() -> Vec<String> {
        RunConfig::default().flat().into_keys().collect()
    }

    /// Resolves a full or unique-suffix key.
    pub fn resolve_key(key: &str) -> Result<String> {
        let keys = Self::keys();
        if keys.iter().any(|k| k == key) {
            return Ok(key.to_string());
        }
        let suffix = format!(".{key}");
        let hits: Vec<&String> = keys.iter().filter(|k| k.ends_with(&suffix)).collect();
        match hits.as_slice() {
            [one] => Ok((*one).clone()),
            [] => Err(Error::config(key, "unknown key")),
            many => Err(Error::config(
                key,
                format!(
                    "ambiguous key, matches {}",
                    many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                ),
            )),
        }
    }

    fn apply(&mut self, updates: Vec<(String, toml::Value)>) -> Result<()> {
        let mut flat = self.flat();
        for (key, value) in updates {
            let full = Self::resolve_key(&key)?;
            let like = &flat[&full];
            let v = coerce(&full, value, like)?;
            flat.insert(full, v);
        }
        let mut root = toml::Table::new();
        for (k, v) in flat {
            let (section, field) = k.split_once('.').expect("two-level keys");
            root.entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("section table")
                .insert(field.to_string(), v);
        }
        *self = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        let full = Self::resolve_key(key.trim())?;
        let like = self.flat()[&full].clone();
        let v = parse_as(&full, raw, &like)?;
        self.apply(vec![(full.clone(), v)])
            .map_err(|e| match e {
                Error::Config { message, .. } => Error::config(full.clone(), message),
                other => other,
            })
    }

    /// Parses TOML text on top of the defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let v: toml::Value = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        let mut flat = BTreeMap::new();
        flatten("", &v, &mut flat);
        let mut cfg = RunConfig::default();
        cfg.apply(flat.into_iter().collect())?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// TOML rendering that [`RunConfig::from_toml_str`] reads back exactly.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.data;
        DatasetSpec {
            num_classes: self.model.num_classes,
            train_images: d.train_images,
            val_images: d.val_images,
            image_size: d.image_size,
            min_shapes: d.min_shapes,
            max_shapes: d.max_shapes,
            cell_size: d.cell_size,
            noise: d.noise,
            tint: d.tint,
            seed: d.seed,
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.loss.contrast_temperature,
            positives_cap: self.loss.positives_per_class,
            negatives_cap: self.loss.negatives_cap,
            strategy: self.loss.sampling_strategy,
            cosine: self.loss.cosine_points,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        let t = &self.train;
        OptimizerConfig {
            kind: t.optimizer,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: 1e-8,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let l = &self.loss;
        if !(l.gamma >= 0.0) || !l.gamma.is_finite() {
            return Err(Error::config("loss.gamma", "must be finite and >= 0"));
        }
        if !(l.temp_align > 0.0) || !l.temp_align.is_finite() {
            return Err(Error::config("loss.temp_align", "must be positive"));
        }
        self.contrastive().validate().map_err(|e| match e {
            Error::Config { key, message } => Error::config(format!("loss.{key}"), message),
            other => other,
        })?;
        let t = &self.train;
        if t.steps == 0 {
            return Err(Error::config("train.steps", "must be positive"));
        }
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if t.eval_batch_size == 0 {
            return Err(Error::config("train.eval_batch_size", "must be positive"));
        }
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(t.image_lr_mult >= 0.0) || !t.image_lr_mult.is_finite() {
            return Err(Error::config("train.image_lr_mult", "must be finite and >= 0"));
        }
        if !(t.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::config("train.beta1", "betas must lie in [0, 1)"));
        }
        if self.run.name.is_empty() {
            return Err(Error::config("run.name", "must not be empty"));
        }
        self.dataset_spec().validate().map_err(|e| Error::config("data", e.to_string()))?;
        Ok(())
    }
}
