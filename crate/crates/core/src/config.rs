//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchProtocol;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::imitation::ImitationConfig;
use crate::model::ModelSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub train: DatasetSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<DatasetSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub imitation: Option<ImitationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchProtocol>,
    /// Teacher checkpoint, resolved relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    /// Loads a config; relative teacher and dataset paths are taken relative
    /// to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(t) = &mut cfg.teacher {
            if t.is_relative() {
                *t = base.join(&*t);
            }
        }
        if let Some(d) = &mut cfg.data {
            for spec in std::iter::once(&mut d.train).chain(d.val.as_mut()) {
                if let crate::data::DataSource::Cifar10Binary { path, .. } = &mut spec.source {
                    if path.is_relative() {
                        *path = base.join(&*path);
                    }
                }
            }
        }
        Ok(cfg)
    }

    /// Training settings with the imitation block folded in.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = self.train.clone().ok_or_else(|| Error::Config("missing `train` block".into()))?;
        match (&t.imitation, &self.imitation) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config("`imitation` given both at top level and inside `train` with different values".into()))
            }
            (None, Some(b)) => t.imitation = Some(b.clone()),
            _ => {}
        }
        t.validate()?;
        if let Some(im) = &t.imitation {
            im.validate(&self.model)?;
        }
        Ok(t)
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data.as_ref().ok_or_else(|| Error::Config("missing `data` block".into()))
    }

    /// Applies overrides, flags winning over file values. Returns one notice
    /// per value that replaced a different one from the file.
    pub fn apply(&mut self, o: &Overrides) -> Vec<String> {
        let mut notices = Vec::new();
        let mut note = |what: &str, old: String, new: String| {
            if old != new {
                notices.push(format!("--{what} {new} overrides config value {old}"));
            }
        };
        if let Some(t) = &mut self.train {
            if let Some(s) = o.seed {
                note("seed", t.seed.to_string(), s.to_string());
                t.seed = s;
            }
            if let Some(e) = o.epochs {
                note("epochs", t.epochs.to_string(), e.to_string());
                t.epochs = e;
            }
            if let Some(b) = o.batch {
                note("batch", t.batch_size.to_string(), b.to_string());
                t.batch_size = b;
            }
        }
        if let (Some(b), Some(bench)) = (o.batch, &mut self.bench) {
            if self.train.is_none() {
                note("batch", bench.batch_size.to_string(), b.to_string());
            }
            bench.batch_size = b;
        }
        notices
    }
}
