//! Policy evaluation in a simulated environment, the noise-robustness
//! protocol, report tables and exact checks of the value bounds.

pub mod tabular;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{PLevel, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::metrics::{episode_acp, episode_weaning_score, StabilityThresholds};
use crate::policy::Policy;
use crate::reward::physiological_reward;
use crate::rng::{child_rng, derive_seed};
use crate::synth::SynthEnv;
use crate::twin::{rollout, Forecaster};

pub use tabular::{
    check_theorem1, check_theorem2, delta_grid, exact_return, random_instance, random_policy, verify_bounds,
    verify_theorem1, verify_theorem2, BoundsReport, Dynamics, InstanceConfig, TabularMdp, TabularPolicy,
};

/// A played episode and the level in effect during its first window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub p0: PLevel,
    pub traj: Trajectory,
}

/// Something that can play one fixed-horizon episode from a seeded start.
pub trait EvalEnv: Sync {
    fn episode(&self, policy: &dyn Policy, horizon: usize, seed: u64) -> Result<EvalEpisode>;
}

/// Learned twin as the environment. Start windows and levels come from the
/// synthetic generator's patient draws.
pub struct TwinEnv<'a, F: Forecaster + ?Sized> {
    pub model: &'a F,
    pub init: SynthEnv,
    /// MC-dropout sampling on every step; deterministic means otherwise.
    pub stochastic: bool,
}

impl<F: Forecaster + ?Sized> EvalEnv for TwinEnv<'_, F> {
    fn episode(&self, policy: &dyn Policy, horizon: usize, seed: u64) -> Result<EvalEpisode> {
        let ic = self.init.init_patient(derive_seed(seed, 0));
        let traj = rollout(self.model, &ic.window, ic.plevel, policy, horizon, derive_seed(seed, 1), self.stochastic)?;
        Ok(EvalEpisode { p0: ic.plevel, traj })
    }
}

/// The synthetic simulator itself, used as an oracle environment.
pub struct SynthOracle(pub SynthEnv);

impl EvalEnv for SynthOracle {
    fn episode(&self, policy: &dyn Policy, horizon: usize, seed: u64) -> Result<EvalEpisode> {
        if horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        let ic = self.0.init_patient(derive_seed(seed, 0));
        let mut rng = child_rng(seed, 1);
        let mut latent = ic.latent;
        let mut states = vec![ic.window];
        let mut actions = Vec::with_capacity(horizon);
        let mut current = ic.plevel;
        for t in 0..horizon {
            let a = policy.act(&states[t], current, &mut rng);
            let next = self.0.env_step(&mut latent, &states[t], a);
            states.push(next);
            actions.push(a);
            current = a;
        }
        Ok(EvalEpisode { p0: ic.plevel, traj: Trajectory::new(states, actions)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub horizon: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_episodes: 1000, horizon: 6, seeds: (0..5).collect() }
    }
}

impl EvalConfig {
    /// 3 seeds, 200 episodes.
    pub fn desk() -> Self {
        Self { n_episodes: 200, horizon: 6, seeds: (0..3).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_episodes == 0 || self.horizon == 0 || self.seeds.is_empty() {
            return Err(invalid("evaluation needs episodes, a horizon and at least one seed"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Metrics of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// Per-step mean physiological reward.
    pub reward: f64,
    /// Gated action change penalty, first move from `p0` included.
    pub acp: f64,
    /// Weaning score under gradient stability, first move included.
    pub ws: f64,
}

pub fn episode_metrics(ep: &EvalEpisode) -> Result<EpisodeMetrics> {
    let traj = &ep.traj;
    let rewards: Vec<f64> = traj.states[1..].iter().map(physiological_reward).collect();
    Ok(EpisodeMetrics {
        reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
        acp: episode_acp(ep.p0, &traj.actions)?,
        ws: episode_weaning_score(ep.p0, traj, &StabilityThresholds::gradient()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub reward: MeanStd,
    pub acp: MeanStd,
    pub ws: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub horizon: usize,
    /// Over all episodes of all seeds.
    pub reward: MeanStd,
    pub acp: MeanStd,
    pub ws: MeanStd,
    pub per_seed: Vec<SeedReport>,
}

fn summarize(ms: &[EpisodeMetrics]) -> (MeanStd, MeanStd, MeanStd) {
    let col = |f: fn(&EpisodeMetrics) -> f64| MeanStd::of(&ms.iter().map(f).collect::<Vec<_>>());
    (col(|m| m.reward), col(|m| m.acp), col(|m| m.ws))
}

/// Plays `n_episodes` per seed; episode `i` of seed `k` uses stream
/// `derive_seed(k, i)`, so results do not depend on thread count.
pub fn evaluate_policy(policy: &dyn Policy, env: &dyn EvalEnv, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let runs: Vec<(u64, &dyn Policy)> = cfg.seeds.iter().map(|&s| (s, policy)).collect();
    evaluate_runs(&runs, env, cfg.n_episodes, cfg.horizon)
}

/// Like [`evaluate_policy`] with a different policy per seed, e.g. one
/// per training seed.
pub fn evaluate_runs(runs: &[(u64, &dyn Policy)], env: &dyn EvalEnv, n_episodes: usize, horizon: usize) -> Result<EvalReport> {
    if runs.is_empty() || n_episodes == 0 || horizon == 0 {
        return Err(invalid("evaluation needs episodes, a horizon and at least one seed"));
    }
    let mut all = Vec::with_capacity(n_episodes * runs.len());
    let mut per_seed = Vec::with_capacity(runs.len());
    for &(seed, policy) in runs {
        let ms: Vec<EpisodeMetrics> = (0..n_episodes as u64)
            .into_par_iter()
            .map(|i| episode_metrics(&env.episode(policy, horizon, derive_seed(seed, i))?))
            .collect::<Result<_>>()?;
        let (reward, acp, ws) = summarize(&ms);
        per_seed.push(SeedReport { seed, reward, acp, ws });
        all.extend(ms);
    }
    let (reward, acp, ws) = summarize(&all);
    Ok(EvalReport { n_episodes: all.len(), horizon, reward, acp, ws, per_seed })
}

/// `100 (R_clean - R_noisy) / |R_clean|` on mean physiological reward.
pub fn reward_drop(clean: &EvalReport, noisy: &EvalReport) -> Result<f64> {
    if clean.n_episodes == 0 || noisy.n_episodes == 0 {
        return Err(invalid("reward drop needs two nonempty reports"));
    }
    drop_percent(clean.reward.mean, noisy.reward.mean)
}

pub fn drop_percent(clean: f64, noisy: f64) -> Result<f64> {
    if clean == 0.0 {
        return Err(Error::UndefinedDrop);
    }
    Ok(100.0 * (clean - noisy) / clean.abs())
}

/// One CSV line: `seed` is empty for the all-seed aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub algo: String,
    pub metric: String,
    pub seed: Option<u64>,
    pub mean: f64,
    pub std: f64,
}

fn sorted(reports: &[(String, EvalReport)]) -> Vec<&(String, EvalReport)> {
    let mut v: Vec<_> = reports.iter().collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

pub fn report_rows(reports: &[(String, EvalReport)]) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (algo, r) in sorted(reports) {
        let metrics = [("reward", r.reward, 0), ("acp", r.acp, 1), ("ws", r.ws, 2)];
        for (name, agg, k) in metrics {
            rows.push(ReportRow { algo: algo.clone(), metric: name.into(), seed: None, mean: agg.mean, std: agg.std });
            for s in &r.per_seed {
                let m = [s.reward, s.acp, s.ws][k];
                rows.push(ReportRow { algo: algo.clone(), metric: name.into(), seed: Some(s.seed), mean: m.mean, std: m.std });
            }
        }
    }
    rows
}

/// Human-readable `mean ± std` table, one line per algorithm, sorted by name.
pub fn report_table(reports: &[(String, EvalReport)]) -> String {
    let mut out = format!("{:<10} {:>22} {:>22} {:>22}\n", "algo", "reward", "ACP", "WS");
    let cell = |m: MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
    for (algo, r) in sorted(reports) {
        out.push_str(&format!("{:<10} {:>22} {:>22} {:>22}\n", algo, cell(r.reward), cell(r.acp), cell(r.ws)));
    }
    out
}

pub fn write_report_csv(reports: &[(String, EvalReport)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in report_rows(reports) {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Noiseless versus noisy reward of one algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropRow {
    pub algo: String,
    pub clean: f64,
    pub noisy: f64,
    pub drop_percent: f64,
}

pub fn drop_table(rows: &[DropRow]) -> String {
    let mut v: Vec<&DropRow> = rows.iter().collect();
    v.sort_by(|a, b| a.algo.cmp(&b.algo));
    let mut out = format!("{:<10} {:>12} {:>12} {:>10}\n", "algo", "clean", "noisy", "drop %");
    for r in v {
        out.push_str(&format!("{:<10} {:>12.4} {:>12.4} {:>10.3}\n", r.algo, r.clean, r.noisy, r.drop_percent));
    }
    out
}
