//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{make_synthetic, Dataset, Split, SyntheticKind};
use super::idx::load_idx;
use crate::analysis::LandscapeConfig;
use crate::diffnet::ModelSpec;
use crate::ensemble::{EnsembleConfig, Strategy};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        kind: SyntheticKind,
        n_per_class: usize,
        classes: usize,
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        limit: usize,
    },
}

impl DatasetConfig {
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetConfig::Synthetic {
                kind,
                n_per_class,
                classes,
                noise,
            } => make_synthetic(*kind, *n_per_class, *classes, *noise, seed),
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
            } => Ok((
                load_idx(train_images, train_labels, *limit, Split::Train)?,
                load_idx(test_images, test_labels, *limit, Split::Test)?,
            )),
        }
    }
}

/// Ensemble strategies evaluated alongside one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSettings {
    pub strategies: Vec<Strategy>,
    pub start_fraction: f64,
    pub ema_decay: f64,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        let base = EnsembleConfig::default();
        EnsembleSettings {
            strategies: Strategy::ALL.to_vec(),
            start_fraction: base.start_fraction,
            ema_decay: base.ema_decay,
        }
    }
}

impl EnsembleSettings {
    pub fn config_for(&self, strategy: Strategy) -> EnsembleConfig {
        EnsembleConfig {
            strategy,
            start_fraction: self.start_fraction,
            ema_decay: self.ema_decay,
        }
    }
}

/// Attack radius tied to the data scale: ε is `epsilon_std_fraction` times
/// the mean per-feature standard deviation of the training set, and the PGD
/// step is `step_fraction · ε`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackScale {
    pub epsilon_std_fraction: f64,
    pub step_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub histogram: bool,
    pub histogram_bins: usize,
    pub landscape: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            histogram: true,
            histogram_bins: 41,
            landscape: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Master seed; copied into `train.seed` on resolution and used for data.
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub overwrite: bool,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack_scale: Option<AttackScale>,
    pub train: TrainConfig,
    pub ensemble: EnsembleSettings,
    pub landscape: LandscapeConfig,
    pub outputs: OutputConfig,
}

impl Default for ExperimentConfig {
    /// The desk-scale robust-overfitting benchmark.
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            overwrite: false,
            dataset: DatasetConfig::Synthetic {
                kind: SyntheticKind::Spirals,
                n_per_class: 100,
                classes: 3,
                noise: 0.2,
            },
            model: ModelSpec::default_mlp(2, 3),
            attack_scale: Some(AttackScale {
                epsilon_std_fraction: 0.1,
                step_fraction: 0.25,
            }),
            train: TrainConfig {
                total_epochs: 60,
                batch_size: 32,
                ..TrainConfig::default()
            },
            ensemble: EnsembleSettings::default(),
            landscape: LandscapeConfig::default(),
            outputs: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Set a dotted field such as `train.total_epochs` from its TOML text
    /// form; bare words that are not valid TOML are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Table::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut parts: Vec<&str> = key.split('.').collect();
        let leaf = parts
            .pop()
            .filter(|l| !l.is_empty())
            .ok_or_else(|| Error::Config(format!("empty override key `{key}`")))?;
        let mut table = &mut root;
        for p in parts {
            table = table
                .get_mut(p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Config(format!("unknown config section `{p}` in `{key}`")))?;
        }
        if !table.contains_key(leaf) && leaf != "attack_scale" {
            return Err(Error::Config(format!("unknown config field `{key}`")));
        }
        table.insert(leaf.to_string(), parsed);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{key}`: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.resolve()?;
        self.train.validate()?;
        self.config_check()?;
        self.landscape.validate()
    }

    fn config_check(&self) -> Result<()> {
        if self.ensemble.strategies.is_empty() {
            return Err(Error::Config("ensemble.strategies is empty".into()));
        }
        for s in &self.ensemble.strategies {
            self.ensemble.config_for(*s).validate()?;
        }
        if self.outputs.histogram_bins == 0 {
            return Err(Error::Config(
                "outputs.histogram_bins must be positive".into(),
            ));
        }
        if let Some(s) = self.attack_scale {
            if !(s.epsilon_std_fraction >= 0.0 && s.step_fraction >= 0.0) {
                return Err(Error::Config("attack_scale fractions must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Load the data and pin every derived value: the training seed, the
    /// attack input range, and (with `attack_scale`) the attack radius.
    /// Resolving a resolved config is a no-op.
    pub fn resolve(&self) -> Result<(ExperimentConfig, Dataset, Dataset)> {
        self.validate()?;
        let (train, test) = self.dataset.load(self.seed)?;
        if train.dim() != self.model.input_dim || train.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "model expects {} features and {} classes, dataset has {} and {}",
                self.model.input_dim,
                self.model.num_classes,
                train.dim(),
                train.num_classes
            )));
        }
        let mut cfg = self.clone();
        cfg.train.seed = self.seed;
        for a in [&mut cfg.train.attack, &mut cfg.train.eval_attack] {
            a.input_lo = train.lo;
            a.input_hi = train.hi;
        }
        if let Some(scale) = self.attack_scale {
            let std = train.feature_std();
            let eps = scale.epsilon_std_fraction * std.iter().sum::<f64>() / std.len() as f64;
            for a in [&mut cfg.train.attack, &mut cfg.train.eval_attack] {
                a.epsilon = eps as f32;
                a.step_size = (eps * scale.step_fraction) as f32;
            }
        }
        cfg.validate()?;
        Ok((cfg, train, test))
    }
}
