use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgoKind {
    Bc,
    Mbpo,
    Mopo,
    Cormpo,
}

impl AlgoKind {
    pub const ALL: [AlgoKind; 4] = [AlgoKind::Bc, AlgoKind::Mbpo, AlgoKind::Mopo, AlgoKind::Cormpo];

    pub fn name(self) -> &'static str {
        match self {
            AlgoKind::Bc => "bc",
            AlgoKind::Mbpo => "mbpo",
            AlgoKind::Mopo => "mopo",
            AlgoKind::Cormpo => "cormpo",
        }
    }
}

impl fmt::Display for AlgoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgoKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgoKind::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| invalid(format!("unknown algorithm '{s}' (expected bc, mbpo, mopo or cormpo)")))
    }
}

/// Offline RL hyperparameters. Defaults follow the MOPO-style base
/// configuration; [`OrlConfig::desk`] scales the loop down for one CPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrlConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    /// Polyak coefficient for the target critics.
    pub tau: f64,
    pub target_entropy: f64,
    pub alpha_lr: f64,
    pub init_alpha: f64,
    pub hidden: Vec<usize>,

    pub dynamics_lr: f64,
    pub dynamics_hidden: Vec<usize>,
    pub ensemble_size: usize,
    pub n_elites: usize,
    pub holdout_ratio: f64,
    pub dynamics_max_epochs: usize,
    pub dynamics_patience: usize,
    pub max_logvar: f64,
    pub min_logvar: f64,

    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub rollout_horizon: usize,
    pub rollout_batch: usize,
    pub rollout_freq: usize,
    /// Number of rollout generations kept in the synthetic buffer.
    pub model_retain: usize,
    pub real_ratio: f64,
    /// Episode length; transitions at this step index are terminal.
    pub episode_horizon: usize,
    /// Rollouts stop once any predicted feature leaves `[-box, box]` z-units.
    pub sanity_box: f64,
    pub lambda_mopo: f64,
    pub seed: u64,
}

impl Default for OrlConfig {
    fn default() -> Self {
        Self {
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            target_entropy: -1.0,
            alpha_lr: 3e-4,
            init_alpha: 0.1,
            hidden: vec![256, 256],
            dynamics_lr: 1e-3,
            dynamics_hidden: vec![200, 200, 200, 200],
            ensemble_size: 7,
            n_elites: 5,
            holdout_ratio: 0.2,
            dynamics_max_epochs: 200,
            dynamics_patience: 5,
            max_logvar: 0.5,
            min_logvar: -10.0,
            epochs: 100,
            steps_per_epoch: 1000,
            batch_size: 256,
            rollout_horizon: 5,
            rollout_batch: 10_000,
            rollout_freq: 1000,
            model_retain: 5,
            real_ratio: 0.05,
            episode_horizon: 6,
            sanity_box: 10.0,
            lambda_mopo: 1.0,
            seed: 0,
        }
    }
}

impl OrlConfig {
    /// Same algorithm, sized to finish a model-based run in well under a
    /// minute on a single core.
    pub fn desk() -> Self {
        Self {
            hidden: vec![64, 64],
            dynamics_hidden: vec![64, 64],
            dynamics_max_epochs: 60,
            epochs: 20,
            steps_per_epoch: 150,
            rollout_batch: 500,
            rollout_freq: 150,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            alpha_lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("gamma must lie in (0, 1)"));
        }
        if self.ensemble_size == 0 || self.n_elites == 0 || self.n_elites > self.ensemble_size {
            return Err(invalid("need 1 <= n_elites <= ensemble_size"));
        }
        if !(self.holdout_ratio > 0.0 && self.holdout_ratio < 1.0) {
            return Err(invalid("holdout ratio must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.real_ratio) {
            return Err(invalid("real ratio must lie in [0, 1]"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid("tau must lie in (0, 1]"));
        }
        if self.batch_size == 0 || self.rollout_freq == 0 || self.episode_horizon == 0 {
            return Err(invalid("batch size, rollout frequency and episode horizon must be positive"));
        }
        if !(self.init_alpha > 0.0) {
            return Err(invalid("initial temperature must be positive"));
        }
        if self.hidden.is_empty() || self.dynamics_hidden.is_empty() {
            return Err(invalid("networks need at least one hidden layer"));
        }
        if !(self.min_logvar < self.max_logvar) {
            return Err(invalid("min_logvar must be below max_logvar"));
        }
        if [self.actor_lr, self.critic_lr, self.alpha_lr, self.dynamics_lr, self.lambda_mopo].iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("learning rates and lambda_mopo must be non-negative"));
        }
        Ok(())
    }

    /// Real transitions per mixed batch: `ceil(real_ratio * batch)`.
    pub fn n_real(&self) -> usize {
        (self.real_ratio * self.batch_size as f64).ceil() as usize
    }
}
