//! Experiment configuration files.
//!
//! A config is a TOML document. The `model` and `train` tables are overlays
//! on a named preset, so a file only lists what it changes; unknown keys
//! anywhere are errors.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use semg_t2v::dataset::{load_dataset, Dataset, SyntheticSpec, DEFAULT_AMPLITUDE_SCALE};
use semg_t2v::encoder::ModelConfig;
use semg_t2v::training::TrainConfig;
use semg_t2v::windowing::{plan_folds, FoldPlan};
use semg_t2v::Error;

pub const OUTPUT_ROOT_ENV: &str = "SEMG_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Full-size model and schedule.
    #[default]
    Full,
    /// Small model with capped epochs, sized for a single CPU core.
    Desk,
}

impl Preset {
    fn model(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::default(),
            Preset::Desk => ModelConfig::desk(),
        }
    }

    fn train(self) -> TrainConfig {
        match self {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default = "default_subjects")]
    pub n_subjects: u32,
    #[serde(default = "default_dataset_seed")]
    pub seed: u64,
    /// Subjects given a channel swap and gain skew.
    #[serde(default)]
    pub shift_subjects: Vec<u32>,
    #[serde(default = "default_amplitude")]
    pub amplitude_scale: f64,
}

fn default_subjects() -> u32 {
    8
}

fn default_dataset_seed() -> u64 {
    SyntheticSpec::default().master_seed
}

fn default_amplitude() -> f64 {
    DEFAULT_AMPLITUDE_SCALE
}

impl SyntheticSource {
    pub fn spec(&self) -> SyntheticSpec {
        let mut spec = SyntheticSpec::with_subjects(self.n_subjects, self.seed);
        spec.amplitude_scale = self.amplitude_scale;
        for &s in &self.shift_subjects {
            spec = spec.with_adaptation_shift(s);
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// A dataset on disk, described by its manifest.
    Manifest { path: PathBuf },
    /// A synthetic dataset generated in memory.
    Synthetic(SyntheticSource),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub preset: Preset,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub fold: usize,
    #[serde(default)]
    pub all_folds: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default = "default_formats")]
    pub export_formats: Vec<ExportFormat>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_formats() -> Vec<ExportFormat> {
    vec![ExportFormat::Csv]
}

/// Recursively overlays `top` on `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

impl ExperimentConfig {
    /// Parses a config document, filling `model` and `train` from the preset.
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        let preset: Preset = match doc.get("preset") {
            Some(v) => v.clone().try_into().map_err(|e: toml::de::Error| config_err(format!("preset: {e}")))?,
            None => Preset::default(),
        };
        for (key, base) in [
            ("model", toml::Table::try_from(preset.model())?),
            ("train", toml::Table::try_from(preset.train())?),
        ] {
            let mut merged = base;
            match doc.remove(key) {
                Some(toml::Value::Table(t)) => merge(&mut merged, t),
                Some(_) => return Err(config_err(format!("`{key}` must be a table"))),
                None => {}
            }
            doc.insert(key.into(), toml::Value::Table(merged));
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies the output-root override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("in config {}", path.display()))?;
        if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
            cfg.output_dir = PathBuf::from(root);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(config_err(format!("run_id {:?} is not a plain directory name", self.run_id)));
        }
        self.model.validate()?;
        self.train.validate()?;
        match &self.dataset {
            DatasetSource::Manifest { path } if !path.is_file() => {
                return Err(config_err(format!("dataset.manifest.path {} does not exist", path.display())));
            }
            DatasetSource::Synthetic(s) => s.spec().validate()?,
            _ => {}
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        Ok(match &self.dataset {
            DatasetSource::Manifest { path } => load_dataset(path)?,
            DatasetSource::Synthetic(s) => s.spec().generate_in_memory()?,
        })
    }

    /// The folds this run covers, in fold order.
    pub fn select_folds(&self, ds: &Dataset) -> Result<Vec<FoldPlan>> {
        let folds = plan_folds(&ds.manifest)?;
        if self.all_folds {
            return Ok(folds);
        }
        let n = folds.len();
        folds
            .into_iter()
            .nth(self.fold)
            .map(|f| vec![f])
            .ok_or_else(|| config_err(format!("fold {} out of range for {n} folds", self.fold)))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// A complete config with every default spelled out.
pub fn default_config_text(preset: Preset) -> Result<String> {
    let cfg = ExperimentConfig {
        run_id: "example".into(),
        output_dir: default_output_dir(),
        preset,
        dataset: DatasetSource::Synthetic(SyntheticSource {
            n_subjects: default_subjects(),
            seed: default_dataset_seed(),
            shift_subjects: Vec::new(),
            amplitude_scale: DEFAULT_AMPLITUDE_SCALE,
        }),
        fold: 0,
        all_folds: false,
        model: preset.model(),
        train: preset.train(),
        export_formats: default_formats(),
    };
    Ok(toml::to_string(&cfg)?)
}
