//! Experiment configuration files (TOML).
//!
//! Every section is optional and falls back to defaults:
//!
//! ```toml
//! [world]
//! group_reward_offsets = [0.0, -2.5]
//!
//! [train]
//! objective = "fr_rm"
//!
//! [train.fairness]
//! tau = -1.0
//! alpha = 0.1
//!
//! [eval]
//! n_values = [8, 16, 32, 64]
//!
//! [sweep]
//! taus = [-5.0, -1.0, 0.5, 2.0, 10.0]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::WorldConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out pairs per group generated when no dataset is given.
    pub heldout_pairs_per_group: usize,
    pub num_pools: usize,
    pub pool_size: usize,
    pub n_values: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heldout_pairs_per_group: 2000,
            num_pools: 2000,
            pool_size: 64,
            n_values: vec![1, 8, 16, 32, 64],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heldout_pairs_per_group == 0 {
            return Err(Error::invalid("eval.heldout_pairs_per_group", "must be >= 1"));
        }
        if self.num_pools == 0 {
            return Err(Error::invalid("eval.num_pools", "must be >= 1"));
        }
        if self.n_values.is_empty() || self.n_values.contains(&0) {
            return Err(Error::invalid("eval.n_values", "must be a non-empty list of n >= 1"));
        }
        let max_n = self.n_values.iter().copied().max().unwrap_or(0);
        if self.pool_size < max_n {
            return Err(Error::invalid(
                "eval.pool_size",
                format!("{} is smaller than the largest n ({max_n})", self.pool_size),
            ));
        }
        Ok(())
    }
}

/// Grid over fairness hyperparameters; the run is the cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub taus: Vec<f64>,
    pub alphas: Vec<f64>,
    pub gammas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            taus: vec![-5.0, -1.0, 0.5, 2.0, 10.0],
            alphas: vec![0.1],
            gammas: vec![0.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub tau: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl GridPoint {
    /// File-name friendly label, e.g. `tau-1_alpha0.1_gamma0.5`.
    pub fn label(&self) -> String {
        format!("tau{}_alpha{}_gamma{}", self.tau, self.alpha, self.gamma)
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, list) in [
            ("sweep.taus", &self.taus),
            ("sweep.alphas", &self.alphas),
            ("sweep.gammas", &self.gammas),
        ] {
            if list.is_empty() {
                return Err(Error::invalid(field, "must not be empty"));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &tau in &self.taus {
            for &alpha in &self.alphas {
                for &gamma in &self.gammas {
                    out.push(GridPoint { tau, alpha, gamma });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.sweep.validate()
    }

    /// Sets both the world and the training seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
                .unwrap_or(0);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                reason: e.message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }
}
