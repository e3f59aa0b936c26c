//! Experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Where a run writes its artefacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub checkpoint: String,
    pub metrics: String,
    /// Also write a CSV copy of the metrics log.
    pub metrics_csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            checkpoint: "model.ckpt".into(),
            metrics: "metrics.jsonl".into(),
            metrics_csv: false,
        }
    }
}

impl OutputConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(&self.checkpoint)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(&self.metrics)
    }

    pub fn last_good_path(&self) -> PathBuf {
        self.dir.join(format!("last-good.{}", self.checkpoint))
    }
}

/// Grid swept by the ablation command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub timesteps: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: (0..5).collect(),
            timesteps: vec![2, 4],
        }
    }
}

/// Full description of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub timesteps: usize,
    /// Gaze-mask gain.
    pub alpha: f64,
    /// Weight of the attention alignment loss.
    pub lambda_loss: f64,
    pub enable_gm: bool,
    pub enable_alh: bool,
    /// Apply the gaze mask to evaluation images as well.
    pub gm_at_test: bool,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Joint gradient L2 norm cap per step (0 disables clipping).
    pub max_grad_norm: f64,
    /// Heatmap Gaussian width in pixels; the patch size when unset.
    pub gaze_sigma: Option<f64>,
    /// Evaluate the test split every this many epochs (0: final epoch only).
    pub eval_every: usize,
    pub eval_batch_size: usize,
    /// Images used to measure firing rates for the energy report.
    pub calibration_samples: usize,
    /// Read the dataset from here instead of generating it from `seed`.
    pub data_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub output: OutputConfig,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            timesteps: 4,
            alpha: 0.5,
            lambda_loss: 1.0,
            enable_gm: true,
            enable_alh: true,
            gm_at_test: true,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 30,
            batch_size: 16,
            max_grad_norm: 0.0,
            gaze_sigma: None,
            eval_every: 1,
            eval_batch_size: 64,
            calibration_samples: 64,
            data_dir: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            output: OutputConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !self.timesteps.is_power_of_two() {
            return fail(format!("timesteps must be a power of two, got {}", self.timesteps));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be finite and nonnegative, got {}", self.alpha));
        }
        if !(self.lambda_loss >= 0.0 && self.lambda_loss.is_finite()) {
            return fail(format!(
                "lambda_loss must be finite and nonnegative, got {}",
                self.lambda_loss
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            ));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return fail(format!(
                "max_grad_norm must be finite and nonnegative, got {}",
                self.max_grad_norm
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("epochs, batch_size and eval_batch_size must be positive".into());
        }
        if !(self.heatmap_sigma() > 0.0 && self.heatmap_sigma().is_finite()) {
            return fail("gaze_sigma must be positive".into());
        }
        if self.ablation.seeds.is_empty()
            || self.ablation.timesteps.iter().any(|t| !t.is_power_of_two())
            || self.ablation.timesteps.is_empty()
        {
            return fail("ablation needs at least one seed and power-of-two timestep counts".into());
        }
        self.model.validate()?;
        self.dataset.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.dataset.image_size != self.model.image_size {
            return fail(format!(
                "dataset.image_size {} differs from model.image_size {}",
                self.dataset.image_size, self.model.image_size
            ));
        }
        Ok(())
    }

    pub fn heatmap_sigma(&self) -> f64 {
        self.gaze_sigma.unwrap_or(self.model.patch_size as f64)
    }

    /// Parses TOML, applies `key = value` overrides (dotted keys reach nested
    /// tables) and validates.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut table, key, value)?;
        }
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from the defaults when `None`).
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// Every dotted key a configuration file may set, sorted.
pub fn config_keys() -> Vec<String> {
    fn walk(prefix: &str, table: &toml::Table, out: &mut Vec<String>) {
        for (k, v) in table {
            let key = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                toml::Value::Table(t) => walk(&key, t, out),
                _ => out.push(key),
            }
        }
    }
    let table = toml::Table::try_from(TrainConfig::default()).expect("defaults serialise");
    let mut keys = vec!["data_dir".to_string(), "gaze_sigma".to_string()];
    walk("", &table, &mut keys);
    keys.sort();
    keys
}

/// Interprets an override the way TOML would, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("probe key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let key = key.replace('-', "_");
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let defaults = toml::Table::try_from(TrainConfig::default()).expect("defaults serialise");
    let mut slot = table;
    let mut reference = Some(&defaults);
    for part in &parts[..parts.len() - 1] {
        reference = reference.and_then(|r| r.get(*part)).and_then(toml::Value::as_table);
        let entry = slot
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        slot = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    let leaf = parts[parts.len() - 1];
    let mut value = parse_value(raw);
    // integers given for real-valued keys
    if let (Some(toml::Value::Float(_)), toml::Value::Integer(i)) = (reference.and_then(|r| r.get(leaf)), &value) {
        value = toml::Value::Float(*i as f64);
    }
    if let (Some(toml::Value::String(_)), v) = (reference.and_then(|r| r.get(leaf)), &value) {
        if !v.is_str() {
            value = toml::Value::String(raw.to_string());
        }
    }
    slot.insert(leaf.to_string(), value);
    Ok(())
}
