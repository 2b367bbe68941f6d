//! End-to-end policy training for BC, MBPO, MOPO and CORMPO.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureStats};
use crate::error::{invalid, Result};
use crate::guardian::DensityModel;
use crate::metrics::StabilityThresholds;
use crate::nn::Adam;
use crate::reward::RewardConfig;
use crate::rng::{child_rng, derive_seed};

use super::buffer::{build_shaped_buffer, ReplayBuffer, ZTransition};
use super::config::{AlgoKind, OrlConfig};
use super::ensemble::{train_dynamics_ensemble, DynamicsEnsemble};
use super::rollout::{model_rollout, Penalty, RolloutEnv};
use super::sac::{bc_update, sac_update, PolicyModel, SacAgent};

/// One line of the training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub bc_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub entropy: Option<f64>,
    pub mean_penalty: Option<f64>,
    pub mean_synthetic_reward: Option<f64>,
    pub rollout_ood_fraction: Option<f64>,
    pub synthetic_buffer: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: PolicyModel,
    pub log: Vec<EpochLog>,
    /// Shaping weights with the frozen reward normalization.
    pub reward_cfg: RewardConfig,
    pub ensemble: Option<DynamicsEnsemble>,
}

pub fn write_log_jsonl(log: &[EpochLog], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in log {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Optional inputs of [`train_policy`].
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainExtras<'a> {
    /// Density model; required for CORMPO, used for OOD monitoring otherwise.
    pub guardian: Option<&'a DensityModel>,
    /// CORMPO penalty weight.
    pub lambda: f64,
    /// Reuse a fitted ensemble instead of training one.
    pub ensemble: Option<&'a DynamicsEnsemble>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn train_policy(
    algo: AlgoKind,
    dataset: &Dataset,
    cfg: &OrlConfig,
    reward_cfg: &RewardConfig,
    extras: TrainExtras<'_>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if algo == AlgoKind::Cormpo && extras.guardian.is_none() {
        return Err(invalid("CORMPO needs a fitted density guardian"));
    }
    if let Some(g) = extras.guardian {
        if g.tau().is_none() {
            return Err(invalid("density guardian has no threshold"));
        }
    }
    if !(extras.lambda >= 0.0 && extras.lambda.is_finite()) {
        return Err(invalid("lambda must be finite and non-negative"));
    }
    let stats = FeatureStats::from_dataset(dataset);
    let thr = StabilityThresholds::clinical();
    let (real, frozen) = build_shaped_buffer(dataset, reward_cfg, &thr, &stats)?;
    let mut rng = child_rng(cfg.seed, 0x7A);
    let total_steps = cfg.epochs * cfg.steps_per_epoch;

    if algo == AlgoKind::Bc {
        let mut policy = PolicyModel::new(algo, &cfg.hidden, stats, derive_seed(cfg.seed, 0xAC));
        let mut opt = Adam::new(&policy.actor.store, cfg.actor_lr);
        let mut log = Vec::with_capacity(cfg.epochs);
        let mut losses = Vec::with_capacity(cfg.steps_per_epoch);
        for step in 0..total_steps {
            let idx = real.sample_indices(cfg.batch_size, &mut rng);
            losses.push(bc_update(&mut policy, &mut opt, &real.batch(&idx), step)?);
            if (step + 1) % cfg.steps_per_epoch == 0 {
                log.push(EpochLog { epoch: step / cfg.steps_per_epoch, bc_loss: mean(&losses), ..Default::default() });
                losses.clear();
            }
        }
        return Ok(TrainOutput { policy, log, reward_cfg: frozen, ensemble: None });
    }

    let ensemble = match extras.ensemble {
        Some(e) => e.clone(),
        None => train_dynamics_ensemble(&real, cfg)?,
    };
    let penalty = match algo {
        AlgoKind::Mbpo => Penalty::None,
        AlgoKind::Mopo => Penalty::Mopo { lambda: cfg.lambda_mopo },
        AlgoKind::Cormpo => Penalty::Density { guardian: extras.guardian.expect("checked above"), lambda: extras.lambda },
        AlgoKind::Bc => unreachable!("handled above"),
    };
    let env = RolloutEnv {
        ensemble: &ensemble,
        stats: &stats,
        reward_cfg: &frozen,
        thresholds: &thr,
        episode_horizon: cfg.episode_horizon,
        sanity_box: cfg.sanity_box,
        monitor: extras.guardian,
    };
    let mut agent = SacAgent::new(algo, stats, cfg);
    let mut synthetic = ReplayBuffer::new(Some(cfg.rollout_batch * cfg.rollout_horizon * cfg.model_retain.max(1)));
    let n_real = cfg.n_real().min(cfg.batch_size);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut acc: Vec<[f64; 4]> = Vec::new();
    let (mut pens, mut rews, mut oods) = (Vec::new(), Vec::new(), Vec::new());

    for step in 0..total_steps {
        if step % cfg.rollout_freq == 0 {
            let (ts, st) =
                model_rollout(&env, &real, &agent.policy, penalty, cfg.rollout_horizon, cfg.rollout_batch, &mut rng)?;
            if st.n_transitions > 0 {
                pens.push(st.mean_penalty);
                rews.push(st.mean_reward);
            }
            if let Some(o) = st.ood_fraction {
                oods.push(o);
            }
            synthetic.extend(ts);
        }
        let (nr, ns) = if synthetic.is_empty() { (cfg.batch_size, 0) } else { (n_real, cfg.batch_size - n_real) };
        let ri = real.sample_indices(nr, &mut rng);
        let si = synthetic.sample_indices(ns, &mut rng);
        let items: Vec<&ZTransition> =
            ri.iter().map(|&i| real.get(i)).chain(si.iter().map(|&i| synthetic.get(i))).collect();
        let batch = super::buffer::stack(&items);
        let s = sac_update(&mut agent, &batch, cfg, step)?;
        acc.push([s.critic_loss, s.actor_loss, s.alpha, s.entropy]);
        if (step + 1) % cfg.steps_per_epoch == 0 {
            let col = |k: usize| mean(&acc.iter().map(|a| a[k]).collect::<Vec<_>>());
            log.push(EpochLog {
                epoch: step / cfg.steps_per_epoch,
                critic_loss: col(0),
                actor_loss: col(1),
                bc_loss: None,
                alpha: col(2),
                entropy: col(3),
                mean_penalty: mean(&pens),
                mean_synthetic_reward: mean(&rews),
                rollout_ood_fraction: mean(&oods),
                synthetic_buffer: synthetic.len(),
            });
            log::debug!("{algo} epoch {}: {:?}", step / cfg.steps_per_epoch, log.last());
            acc.clear();
            pens.clear();
            rews.clear();
            oods.clear();
        }
    }
    Ok(TrainOutput { policy: agent.policy, log, reward_cfg: frozen, ensemble: Some(ensemble) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guardian::{guardian_fit, GuardianConfig};
    use crate::policy::Policy;
    use crate::rng::rng_from;
    use crate::synth::{GeneratorConfig, ScriptedExpert, SynthEnv};

    fn data(n: usize, seed: u64) -> Dataset {
        SynthEnv::new(GeneratorConfig { n_trajectories: n, seed, ..Default::default() })
            .generate_dataset(&ScriptedExpert)
            .unwrap()
    }

    fn tiny() -> OrlConfig {
        OrlConfig {
            hidden: vec![32, 32],
            dynamics_hidden: vec![32, 32],
            dynamics_max_epochs: 10,
            epochs: 2,
            steps_per_epoch: 40,
            batch_size: 64,
            rollout_batch: 50,
            rollout_freq: 40,
            seed: 11,
            ..OrlConfig::desk()
        }
    }

    #[test]
    fn bc_imitates_the_scripted_expert() {
        let train = data(300, 1);
        let held = data(60, 2);
        let cfg = OrlConfig { hidden: vec![64, 64], epochs: 15, steps_per_epoch: 100, batch_size: 128, ..tiny() };
        let out = train_policy(AlgoKind::Bc, &train, &cfg, &RewardConfig::default(), TrainExtras::default()).unwrap();
        assert_eq!(out.log.len(), 15);
        let mut rng = rng_from(0);
        let hits = held
            .records
            .iter()
            .filter(|r| out.policy.act(&r.state, r.action, &mut rng) == r.action)
            .count();
        let acc = hits as f64 / held.len() as f64;
        assert!(acc >= 0.9, "agreement {acc}");
    }

    #[test]
    fn cormpo_without_penalty_is_mbpo() {
        let ds = data(60, 3);
        let cfg = tiny();
        let (g, _) = guardian_fit(&ds, &GuardianConfig { k: 50, ..Default::default() }).unwrap();
        let rc = RewardConfig::default();
        let mbpo = train_policy(AlgoKind::Mbpo, &ds, &cfg, &rc, TrainExtras { guardian: Some(&g), ..Default::default() })
            .unwrap();
        let cormpo =
            train_policy(AlgoKind::Cormpo, &ds, &cfg, &rc, TrainExtras { guardian: Some(&g), lambda: 0.0, ensemble: None })
                .unwrap();
        assert_eq!(mbpo.policy.actor.store, cormpo.policy.actor.store);
        let again = train_policy(AlgoKind::Mbpo, &ds, &cfg, &rc, TrainExtras { guardian: Some(&g), ..Default::default() })
            .unwrap();
        assert_eq!(mbpo.policy.actor.store, again.policy.actor.store);
        assert_eq!(mbpo.log, again.log);
        let last = mbpo.log.last().unwrap();
        assert!(last.critic_loss.unwrap().is_finite() && last.rollout_ood_fraction.is_some());
        assert!(last.synthetic_buffer > 0);
    }

    #[test]
    fn cormpo_requires_guardian() {
        let ds = data(10, 4);
        let err = train_policy(AlgoKind::Cormpo, &ds, &tiny(), &RewardConfig::default(), TrainExtras::default());
        assert!(err.is_err());
    }

    #[test]
    fn log_round_trips_as_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let log = vec![EpochLog { epoch: 0, bc_loss: Some(0.5), ..Default::default() }, EpochLog::default()];
        write_log_jsonl(&log, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let back: Vec<EpochLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, log);
    }
}
