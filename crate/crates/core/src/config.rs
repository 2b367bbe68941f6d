//! Run configuration merged from a JSON file and command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::eval::EvalConfig;
use crate::guardian::GuardianConfig;
use crate::rl::OrlConfig;
use crate::synth::{GeneratorConfig, NoiseConfig};
use crate::twin::{MlpParams, TrainConfig, TwinParams};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TwinKind {
    #[default]
    Transformer,
    Mlp,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinSection {
    pub kind: TwinKind,
    pub transformer: TwinParams,
    pub mlp: MlpParams,
    /// Carries the section seed.
    pub train: TrainConfig,
}

/// Reward shaping and density-penalty weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self { lambda1: 0.0, lambda2: 0.0, lambda: 0.08 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_episodes: usize,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    /// MC-dropout sampling in the twin during evaluation.
    pub stochastic: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalConfig::default();
        Self { n_episodes: e.n_episodes, horizon: e.horizon, seeds: e.seeds, stochastic: true }
    }
}

impl EvalSection {
    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig { n_episodes: self.n_episodes, horizon: self.horizon, seeds: self.seeds.clone() }
    }
}

/// Every pipeline stage's settings. Each section carries its own seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub noise: NoiseConfig,
    pub twin: TwinSection,
    pub guardian: GuardianConfig,
    pub orl: OrlConfig,
    pub reward: RewardSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if !(0.0..=1.0).contains(&self.noise.fraction) || !(self.noise.sigma >= 0.0) {
            return Err(invalid("noise needs sigma >= 0 and fraction in [0, 1]"));
        }
        self.twin.transformer.validate()?;
        self.twin.train.validate()?;
        if self.twin.mlp.hidden.is_empty() || !(0.0..1.0).contains(&self.twin.mlp.dropout_p) {
            return Err(invalid("MLP twin needs hidden layers and dropout in [0, 1)"));
        }
        self.guardian.validate()?;
        self.orl.validate()?;
        let r = &self.reward;
        if [r.lambda1, r.lambda2, r.lambda].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("reward weights must be finite and non-negative"));
        }
        self.eval.eval_config().validate()
    }
}
