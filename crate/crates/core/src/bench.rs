//! Desk-scale experiments: twin quality against an MLP baseline, and the
//! BC / MBPO / MOPO / CORMPO comparison with its noise-robustness protocol.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{invalid, Result};
use crate::eval::{drop_percent, evaluate_runs, DropRow, EvalReport, SynthOracle, TwinEnv};
use crate::guardian::{guardian_fit, DensityModel, GuardianConfig};
use crate::metrics::StabilityThresholds;
use crate::policy::Policy;
use crate::reward::RewardConfig;
use crate::rl::{build_shaped_buffer, train_dynamics_ensemble, train_policy, AlgoKind, OrlConfig, PolicyModel, TrainExtras};
use crate::rng::{derive_seed, rng_from};
use crate::synth::{inject_noise, GeneratorConfig, NoiseConfig, ScriptedExpert, SynthEnv};
use crate::twin::{
    train_forecaster, twin_eval, MlpForecaster, MlpParams, TrainConfig, TrainLog, TwinEvalReport, TwinModel, TwinParams,
};

/// Splits whole trajectories into `(train, test)`.
pub fn split_by_trajectory(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(invalid("test fraction must lie in (0, 1)"));
    }
    let mut ids: Vec<u64> = ds.episodes()?.iter().map(|e| e.traj_id).collect();
    ids.shuffle(&mut rng_from(seed));
    let n_test = ((ids.len() as f64 * test_fraction).round() as usize).clamp(1, ids.len().saturating_sub(1).max(1));
    let test: std::collections::HashSet<u64> = ids[..n_test].iter().copied().collect();
    let (te, tr): (Vec<_>, Vec<_>) = ds.records.iter().cloned().partition(|r| test.contains(&r.traj_id));
    Ok((Dataset::new(tr), Dataset::new(te)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinBenchConfig {
    pub generator: GeneratorConfig,
    pub test_fraction: f64,
    pub twin: TwinParams,
    pub mlp: MlpParams,
    pub train: TrainConfig,
    pub crps_samples: usize,
    pub eval_seed: u64,
}

impl Default for TwinBenchConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            test_fraction: 0.2,
            twin: TwinParams::default(),
            mlp: MlpParams::default(),
            train: TrainConfig::default(),
            crps_samples: 50,
            eval_seed: 0,
        }
    }
}

impl TwinBenchConfig {
    /// Sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            generator: GeneratorConfig { n_trajectories: 1000, ..Default::default() },
            twin: desk_twin(),
            mlp: MlpParams { hidden: vec![128, 64], dropout_p: 0.2 },
            train: TrainConfig { max_epochs: 30, patience: 5, ..Default::default() },
            crps_samples: 30,
            ..Default::default()
        }
    }
}

pub fn desk_twin() -> TwinParams {
    TwinParams { n_encoder_layers: 2, n_heads: 4, model_dim: 32, ffn_dim: 64, decoder_hidden: 64, dropout_p: 0.1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinBenchResult {
    pub transformer: TwinEvalReport,
    pub mlp: TwinEvalReport,
    pub transformer_log: TrainLog,
    pub mlp_log: TrainLog,
    pub seconds: f64,
}

pub fn twin_benchmark(cfg: &TwinBenchConfig) -> Result<(TwinModel, TwinBenchResult)> {
    let start = Instant::now();
    let ds = SynthEnv::new(cfg.generator.clone()).generate_dataset(&ScriptedExpert)?;
    let (train, test) = split_by_trajectory(&ds, cfg.test_fraction, derive_seed(cfg.generator.seed, 0x5B))?;
    let mut twin = TwinModel::new(cfg.twin, derive_seed(cfg.train.seed, 1))?;
    let transformer_log = train_forecaster(&mut twin, &train, &cfg.train)?;
    let mut mlp = MlpForecaster::new(cfg.mlp.clone(), derive_seed(cfg.train.seed, 2))?;
    let mlp_log = train_forecaster(&mut mlp, &train, &cfg.train)?;
    let transformer = twin_eval(&twin, &test, cfg.crps_samples, cfg.eval_seed)?;
    let mlp_report = twin_eval(&mlp, &test, cfg.crps_samples, cfg.eval_seed)?;
    let seconds = start.elapsed().as_secs_f64();
    Ok((twin, TwinBenchResult { transformer, mlp: mlp_report, transformer_log, mlp_log, seconds }))
}

/// CORMPO's shaping weights and penalty weight for one data setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CormpoSetting {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyBenchConfig {
    pub generator: GeneratorConfig,
    pub noise: NoiseConfig,
    pub twin: TwinParams,
    pub twin_train: TrainConfig,
    pub guardian: GuardianConfig,
    pub orl: OrlConfig,
    pub noisy: CormpoSetting,
    pub clean: CormpoSetting,
    /// Training seeds; each trained policy gets its own evaluation stream.
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub horizon: usize,
    pub eval_seed: u64,
    /// Also train on the noiseless data for the reward-drop table.
    pub robustness: bool,
}

impl Default for PolicyBenchConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig { n_trajectories: 500, seed: 7, ..Default::default() },
            noise: NoiseConfig { seed: 8, ..Default::default() },
            twin: desk_twin(),
            twin_train: TrainConfig { max_epochs: 30, patience: 5, ..Default::default() },
            guardian: GuardianConfig::default(),
            orl: OrlConfig::desk(),
            noisy: CormpoSetting { lambda1: 0.0, lambda2: 0.0, lambda: 0.08 },
            clean: CormpoSetting { lambda1: 0.5, lambda2: 0.3, lambda: 0.005 },
            seeds: vec![0, 1, 2],
            eval_episodes: 200,
            horizon: 6,
            eval_seed: 0xE7A1,
            robustness: true,
        }
    }
}

/// Results of one algorithm on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoRun {
    pub algo: AlgoKind,
    /// Evaluation in the twin.
    pub twin: EvalReport,
    /// Evaluation in the generating simulator.
    pub oracle: EvalReport,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBenchResult {
    pub noisy: Vec<AlgoRun>,
    pub clean: Vec<AlgoRun>,
    pub drops: Vec<DropRow>,
    pub seconds: f64,
}

impl PolicyBenchResult {
    pub fn noisy_run(&self, algo: AlgoKind) -> Option<&AlgoRun> {
        self.noisy.iter().find(|r| r.algo == algo)
    }

    pub fn drop_of(&self, algo: AlgoKind) -> Option<f64> {
        self.drops.iter().find(|d| d.algo == algo.name()).map(|d| d.drop_percent)
    }

    pub fn twin_rows(&self) -> Vec<(String, EvalReport)> {
        self.noisy.iter().map(|r| (r.algo.name().to_string(), r.twin.clone())).collect()
    }
}

fn reward_for(algo: AlgoKind, setting: &CormpoSetting) -> RewardConfig {
    match algo {
        AlgoKind::Cormpo => RewardConfig { lambda1: setting.lambda1, lambda2: setting.lambda2, ..Default::default() },
        _ => RewardConfig::default(),
    }
}

struct Setting<'a> {
    data: &'a Dataset,
    guardian: &'a DensityModel,
    weights: CormpoSetting,
}

fn run_setting(
    cfg: &PolicyBenchConfig,
    s: &Setting<'_>,
    algos: &[AlgoKind],
    twin: &TwinModel,
    oracle: &SynthOracle,
) -> Result<Vec<AlgoRun>> {
    let twin_env = TwinEnv { model: twin, init: SynthEnv::new(cfg.generator.clone()), stochastic: true };
    let mut policies: Vec<Vec<PolicyModel>> = vec![Vec::new(); algos.len()];
    let mut seconds = vec![0.0; algos.len()];
    for &seed in &cfg.seeds {
        let orl = OrlConfig { seed, ..cfg.orl.clone() };
        let start = Instant::now();
        let (real, _) = build_shaped_buffer(
            s.data,
            &RewardConfig::default(),
            &StabilityThresholds::clinical(),
            &crate::dataset::FeatureStats::from_dataset(s.data),
        )?;
        let ensemble = algos.iter().any(|a| *a != AlgoKind::Bc).then(|| train_dynamics_ensemble(&real, &orl)).transpose()?;
        let shared = start.elapsed().as_secs_f64() / algos.len() as f64;
        for (k, &algo) in algos.iter().enumerate() {
            let start = Instant::now();
            let extras = TrainExtras { guardian: Some(s.guardian), lambda: s.weights.lambda, ensemble: ensemble.as_ref() };
            let out = train_policy(algo, s.data, &orl, &reward_for(algo, &s.weights), extras)?;
            seconds[k] += shared + start.elapsed().as_secs_f64();
            log::info!("trained {algo} seed {seed} in {:.1}s", start.elapsed().as_secs_f64());
            policies[k].push(out.policy);
        }
    }
    algos
        .iter()
        .enumerate()
        .map(|(k, &algo)| {
            let runs: Vec<(u64, &dyn Policy)> = cfg
                .seeds
                .iter()
                .zip(&policies[k])
                .map(|(&seed, p)| (derive_seed(cfg.eval_seed, seed), p as &dyn Policy))
                .collect();
            Ok(AlgoRun {
                algo,
                twin: evaluate_runs(&runs, &twin_env, cfg.eval_episodes, cfg.horizon)?,
                oracle: evaluate_runs(&runs, oracle, cfg.eval_episodes, cfg.horizon)?,
                train_seconds: seconds[k],
            })
        })
        .collect()
}

/// Generates the benchmark data, trains the evaluation twin on the clean
/// data, then trains and evaluates every algorithm on the noisy data (and
/// on the clean data when `robustness` is set).
pub fn policy_benchmark(cfg: &PolicyBenchConfig) -> Result<PolicyBenchResult> {
    if cfg.seeds.is_empty() {
        return Err(invalid("benchmark needs at least one seed"));
    }
    let start = Instant::now();
    let env = SynthEnv::new(cfg.generator.clone());
    let clean = env.generate_dataset(&ScriptedExpert)?;
    let noisy = inject_noise(&clean, &cfg.noise)?;
    let mut twin = TwinModel::new(cfg.twin, derive_seed(cfg.twin_train.seed, 1))?;
    train_forecaster(&mut twin, &clean, &cfg.twin_train)?;
    log::info!("evaluation twin trained after {:.1}s", start.elapsed().as_secs_f64());
    let oracle = SynthOracle(env);

    let (g_noisy, _) = guardian_fit(&noisy, &cfg.guardian)?;
    let noisy_runs = run_setting(
        cfg,
        &Setting { data: &noisy, guardian: &g_noisy, weights: cfg.noisy },
        &AlgoKind::ALL,
        &twin,
        &oracle,
    )?;
    let mut clean_runs = Vec::new();
    let mut drops = Vec::new();
    if cfg.robustness {
        let (g_clean, _) = guardian_fit(&clean, &cfg.guardian)?;
        let algos = [AlgoKind::Mbpo, AlgoKind::Mopo, AlgoKind::Cormpo];
        clean_runs =
            run_setting(cfg, &Setting { data: &clean, guardian: &g_clean, weights: cfg.clean }, &algos, &twin, &oracle)?;
        for c in &clean_runs {
            let n = noisy_runs.iter().find(|r| r.algo == c.algo).expect("same algorithms");
            drops.push(DropRow {
                algo: c.algo.name().to_string(),
                clean: c.twin.reward.mean,
                noisy: n.twin.reward.mean,
                drop_percent: drop_percent(c.twin.reward.mean, n.twin.reward.mean)?,
            });
        }
    }
    Ok(PolicyBenchResult { noisy: noisy_runs, clean: clean_runs, drops, seconds: start.elapsed().as_secs_f64() })
}
