//! Run configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_mnist, synth_dataset, Dataset};
use crate::error::{CfpError, Result};
use crate::regularizer::RegConfig;
use crate::train::SgdConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    /// Procedural bar images, for tests and smoke runs.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub seed: u64,

    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    /// Caps the training portion (validation is always the tail of the full set).
    pub train_limit: Option<usize>,
    pub val_size: usize,
    pub synth_train: usize,
    pub synth_test: usize,
    /// Filters in conv1 and conv2, and hidden width of the first dense layer.
    pub lenet: [usize; 3],

    pub batch_size: usize,
    pub momentum: f64,
    pub train_epochs: f64,
    pub train_lr: f64,

    /// Allowed validation error increase over the baseline, in percentage points.
    pub epsilon: f64,
    pub lambda: f64,
    /// Pairs per global episode, split across conv layers by FLOPs share.
    pub pairs_per_episode: usize,
    /// Fixed per-conv-layer quotas; overrides `pairs_per_episode`.
    pub quotas: Option<Vec<usize>>,
    /// Per-conv-layer lower bound on surviving filters (default 1 each).
    pub min_filters: Option<Vec<usize>>,

    pub opt_epochs: f64,
    pub opt_max_steps: Option<usize>,
    pub opt_lr: f64,
    pub target_rho: f64,

    pub finetune_epochs: f64,
    pub finetune_lr: f64,
    pub final_finetune_epochs: f64,
    pub max_episodes: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            seed: 0,
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            train_limit: None,
            val_size: 5000,
            synth_train: 2000,
            synth_test: 500,
            lenet: [20, 50, 500],
            batch_size: 64,
            momentum: 0.9,
            train_epochs: 10.0,
            train_lr: 0.01,
            epsilon: 0.3,
            lambda: 1.0,
            pairs_per_episode: 8,
            quotas: None,
            min_filters: None,
            opt_epochs: 1.0,
            opt_max_steps: None,
            opt_lr: 0.01,
            target_rho: 0.99,
            finetune_epochs: 2.0,
            finetune_lr: 0.01,
            final_finetune_epochs: 1.0,
            max_episodes: 100,
        }
    }
}

/// Train / validation / test partitions.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl PruneConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PruneConfig = toml::from_str(text).map_err(|e| CfpError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CfpError::io(path, e))?;
        PruneConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CfpError::Config(m));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("train_epochs", self.train_epochs),
            ("finetune_epochs", self.finetune_epochs),
            ("final_finetune_epochs", self.final_finetune_epochs),
            ("opt_epochs", self.opt_epochs),
            ("train_lr", self.train_lr),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.lenet.contains(&0) {
            return bad("lenet widths must be positive".into());
        }
        if self.min_filters.as_ref().is_some_and(|m| m.contains(&0)) {
            return bad("min_filters entries must be at least 1".into());
        }
        self.reg_config().validate()
    }

    pub fn reg_config(&self) -> RegConfig {
        RegConfig {
            lambda: self.lambda,
            opt_epochs: self.opt_epochs,
            max_steps: self.opt_max_steps,
            opt_lr: self.opt_lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            target_rho: self.target_rho,
        }
    }

    pub fn train_sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.train_lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.train_epochs,
        }
    }

    pub fn finetune_sgd(&self, epochs: f64) -> SgdConfig {
        SgdConfig {
            lr: self.finetune_lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs,
        }
    }

    /// Floor for conv layer `ordinal`.
    pub fn floor(&self, ordinal: usize) -> usize {
        self.min_filters
            .as_ref()
            .and_then(|m| m.get(ordinal).copied())
            .unwrap_or(1)
            .max(1)
    }

    pub fn load_splits(&self) -> Result<Splits> {
        let (full, test) = match self.dataset {
            DatasetKind::Mnist => load_mnist(&self.data_dir)?,
            DatasetKind::Synthetic => (
                synth_dataset(self.synth_train + self.val_size, self.seed ^ 0x5EED_0001),
                synth_dataset(self.synth_test, self.seed ^ 0x5EED_0002),
            ),
        };
        if self.val_size >= full.len() {
            return Err(CfpError::Config(format!(
                "val_size {} leaves no training data out of {}",
                self.val_size,
                full.len()
            )));
        }
        let (mut train, val) = full.split_tail(self.val_size);
        if let Some(limit) = self.train_limit {
            train = train.slice(0, limit.min(train.len()));
        }
        Ok(Splits { train, val, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = PruneConfig::from_toml("seed = 7\nepsilon = 0.5\nmin_filters = [3, 5]\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.epsilon, 0.5);
        assert_eq!(cfg.lambda, 1.0);
        assert_eq!(cfg.finetune_epochs, 2.0);
        assert_eq!((cfg.floor(0), cfg.floor(1), cfg.floor(2)), (3, 5, 1));
        let back = PruneConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs() {
        assert!(PruneConfig::from_toml("epsilon = 0.0").is_err());
        assert!(PruneConfig::from_toml("epsilon = -1.0").is_err());
        assert!(PruneConfig::from_toml("no_such_key = 1").is_err());
        assert!(PruneConfig::from_toml("min_filters = [0, 2]").is_err());
        assert!(PruneConfig::from_toml("lambda = -1.0").is_err());
    }

    #[test]
    fn synthetic_splits() {
        let cfg = PruneConfig::from_toml(
            "dataset = \"synthetic\"\nsynth_train = 40\nval_size = 10\nsynth_test = 8\ntrain_limit = 30",
        )
        .unwrap();
        let s = cfg.load_splits().unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (30, 10, 8));
    }
}
