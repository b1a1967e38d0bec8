use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, Mode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of sequences assigned to the training split.
    pub split: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoding mode for reported metrics.
    pub eval_mode: Mode,
    /// Global gradient-norm cap; off when absent.
    pub clip_norm: Option<f64>,
    /// Use the worker pool for per-sequence work.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            epochs: 20,
            seed: 0,
            split: 0.8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_mode: Mode::TeacherForced,
            clip_norm: None,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split must lie in (0, 1), got {}", self.split));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Model and optimization settings of one run, as `[model]` and `[train]`
/// sections of a TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// One row of a hyperparameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRow {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl SweepRow {
    pub fn label(&self) -> String {
        format!("batch={} lr={} epochs={}", self.batch_size, self.learning_rate, self.epochs)
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.train.batch_size = self.batch_size;
        cfg.train.learning_rate = self.learning_rate;
        cfg.train.epochs = self.epochs;
        cfg
    }
}

/// Base configuration plus the rows to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub run: Vec<SweepRow>,
}

impl SweepGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if grid.run.is_empty() {
            return Err(Error::Config("sweep grid has no [[run]] rows".into()));
        }
        for row in &grid.run {
            row.apply(&grid.base()).validate()?;
        }
        Ok(grid)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sweep grid serializes")
    }

    pub fn base(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = ExperimentConfig::from_toml("[train]\nepochs = 3\neval_mode = \"ar\"\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.eval_mode, Mode::Autoregressive);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["[train]\nbatch_size = 0\n", "[train]\nsplit = 1.0\n", "[train]\nbogus = 1\n"] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }
}
