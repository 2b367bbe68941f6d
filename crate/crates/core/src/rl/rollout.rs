//! Short branched rollouts in the learned dynamics with pluggable reward
//! penalties.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureStats;
use crate::domain::{PLevel, StateWindow, N_ACTIONS, WINDOW_LEN};
use crate::error::Result;
use crate::guardian::DensityModel;
use crate::metrics::{step_change_penalty, weaning_term, StabilityThresholds};
use crate::nn::Tensor;
use crate::reward::{normalize_reward, physiological_reward, shaped_reward, RewardConfig};
use crate::rng::Rng;

use super::buffer::{ReplayBuffer, ZTransition};
use super::ensemble::DynamicsEnsemble;
use super::sac::PolicyModel;

/// Reward penalty applied to synthetic transitions.
#[derive(Debug, Clone, Copy)]
pub enum Penalty<'a> {
    /// MBPO: no penalty.
    None,
    /// MOPO: `lambda * max_i ||sigma_i(s, a)||`.
    Mopo { lambda: f64 },
    /// CORMPO: `lambda * u(s, a)` from the density guardian.
    Density { guardian: &'a DensityModel, lambda: f64 },
}

/// Everything a rollout needs besides the policy and start states.
#[derive(Debug, Clone, Copy)]
pub struct RolloutEnv<'a> {
    pub ensemble: &'a DynamicsEnsemble,
    pub stats: &'a FeatureStats,
    pub reward_cfg: &'a RewardConfig,
    pub thresholds: &'a StabilityThresholds,
    pub episode_horizon: usize,
    pub sanity_box: f64,
    /// Optional guardian used only to report the OOD share of rollout pairs.
    pub monitor: Option<&'a DensityModel>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub n_started: usize,
    pub n_transitions: usize,
    pub n_out_of_box: usize,
    pub mean_penalty: f64,
    pub mean_reward: f64,
    pub ood_fraction: Option<f64>,
}

/// Samples a level from the actor's distribution at each row of `s`.
fn sample_actions(policy: &PolicyModel, s: &Tensor, rng: &mut Rng) -> Vec<PLevel> {
    let p = policy.probs_z(s);
    p.rows()
        .into_iter()
        .map(|row| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = N_ACTIONS - 1;
            for (i, v) in row.iter().enumerate() {
                acc += v;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            PLevel::from_index(pick).expect("valid index")
        })
        .collect()
}

fn rows_to_tensor(rows: &[[f64; WINDOW_LEN]]) -> Tensor {
    let mut t = Tensor::zeros((rows.len(), WINDOW_LEN));
    for (i, r) in rows.iter().enumerate() {
        t.row_mut(i).assign(&ndarray::ArrayView1::from(&r[..]));
    }
    t
}

/// Normalized shaped reward of a synthetic step (before any penalty).
pub fn synthetic_reward(
    s: &StateWindow,
    prev: PLevel,
    a: PLevel,
    next: &StateWindow,
    reward_cfg: &RewardConfig,
    thr: &StabilityThresholds,
) -> f64 {
    let raw = shaped_reward(
        physiological_reward(next),
        step_change_penalty(prev, a, true),
        weaning_term(s, prev, a, thr),
        reward_cfg,
    );
    normalize_reward(raw, reward_cfg)
}

/// Rolls `batch` start states drawn from `real` for up to `horizon` steps.
///
/// Each step samples an action from `policy`, a random elite member and a
/// Gaussian next state from it. A branch stops at the episode horizon or
/// when the prediction leaves the sanity box (that step is discarded).
pub fn model_rollout(
    env: &RolloutEnv<'_>,
    real: &ReplayBuffer,
    policy: &PolicyModel,
    penalty: Penalty<'_>,
    horizon: usize,
    batch: usize,
    rng: &mut Rng,
) -> Result<(Vec<ZTransition>, RolloutStats)> {
    let mut stats = RolloutStats::default();
    if real.is_empty() || horizon == 0 || batch == 0 {
        return Ok((Vec::new(), stats));
    }
    let starts = real.sample_indices(batch, rng);
    let mut s: Vec<[f64; WINDOW_LEN]> = starts.iter().map(|&i| real.get(i).s).collect();
    let mut prev: Vec<PLevel> = starts.iter().map(|&i| real.get(i).prev).collect();
    let mut t: Vec<u32> = starts.iter().map(|&i| real.get(i).t).collect();
    stats.n_started = s.len();

    let mut out = Vec::new();
    let (mut pen_sum, mut rew_sum, mut ood, mut monitored) = (0.0, 0.0, 0usize, 0usize);
    let elites = &env.ensemble.elites;
    for _ in 0..horizon {
        if s.is_empty() {
            break;
        }
        let st = rows_to_tensor(&s);
        let actions = sample_actions(policy, &st, rng);
        let preds = env.ensemble.predict_all(&st, &actions);
        let mopo = match penalty {
            Penalty::Mopo { .. } => env.ensemble.mopo_penalty_batch(&preds),
            _ => Vec::new(),
        };
        let mut next: Vec<[f64; WINDOW_LEN]> = Vec::with_capacity(s.len());
        for i in 0..s.len() {
            let m = &preds[elites[rng.random_range(0..elites.len())]];
            next.push(std::array::from_fn(|j| {
                let e: f64 = StandardNormal.sample(rng);
                m.mean[[i, j]] + m.std[[i, j]] * e
            }));
        }
        let raw_s: Vec<StateWindow> = s.iter().map(|z| env.stats.denormalize(z)).collect::<Result<_>>()?;
        let guardian = match penalty {
            Penalty::Density { guardian, .. } => Some(guardian),
            _ => env.monitor,
        };
        let u: Option<Vec<f64>> = guardian
            .map(|gd| {
                raw_s
                    .par_iter()
                    .zip(&actions)
                    .map(|(w, a)| gd.regularizer(w, *a).map(|r| r.u))
                    .collect::<Result<Vec<f64>>>()
            })
            .transpose()?;

        let (mut ns, mut nprev, mut nt) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..s.len() {
            if let Some(u) = &u {
                monitored += 1;
                if u[i] > 0.0 {
                    ood += 1;
                }
            }
            if next[i].iter().any(|v| !v.is_finite() || v.abs() > env.sanity_box) {
                stats.n_out_of_box += 1;
                continue;
            }
            let next_w = env.stats.denormalize(&next[i])?;
            let r = synthetic_reward(&raw_s[i], prev[i], actions[i], &next_w, env.reward_cfg, env.thresholds);
            let p = match penalty {
                Penalty::None => 0.0,
                Penalty::Mopo { lambda } => lambda * mopo[i],
                Penalty::Density { lambda, .. } => lambda * u.as_ref().expect("guardian present")[i],
            };
            let done = t[i] as usize + 1 >= env.episode_horizon;
            pen_sum += p;
            rew_sum += r - p;
            out.push(ZTransition { s: s[i], prev: prev[i], a: actions[i], r: r - p, s2: next[i], done, t: t[i] });
            if !done {
                ns.push(next[i]);
                nprev.push(actions[i]);
                nt.push(t[i] + 1);
            }
        }
        s = ns;
        prev = nprev;
        t = nt;
    }
    stats.n_transitions = out.len();
    if !out.is_empty() {
        stats.mean_penalty = pen_sum / out.len() as f64;
        stats.mean_reward = rew_sum / out.len() as f64;
    }
    stats.ood_fraction = (monitored > 0).then(|| ood as f64 / monitored as f64);
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guardian::{guardian_fit, GuardianConfig};
    use crate::rl::buffer::build_shaped_buffer;
    use crate::rl::config::{AlgoKind, OrlConfig};
    use crate::rl::ensemble::train_dynamics_ensemble;
    use crate::rng::rng_from;
    use crate::synth::{inject_noise, GeneratorConfig, NoiseConfig, ScriptedExpert, SynthEnv};

    struct Fixture {
        real: ReplayBuffer,
        stats: FeatureStats,
        reward_cfg: RewardConfig,
        ensemble: DynamicsEnsemble,
        guardian: DensityModel,
        policy: PolicyModel,
    }

    fn fixture(noise: Option<f64>) -> Fixture {
        let clean = SynthEnv::new(GeneratorConfig { n_trajectories: 80, seed: 3, ..Default::default() })
            .generate_dataset(&ScriptedExpert)
            .unwrap();
        let ds = match noise {
            Some(sigma) => inject_noise(&clean, &NoiseConfig { sigma, fraction: 1.0, seed: 4 }).unwrap(),
            None => clean,
        };
        let stats = FeatureStats::from_dataset(&ds);
        let (real, reward_cfg) =
            build_shaped_buffer(&ds, &RewardConfig::default(), &StabilityThresholds::clinical(), &stats).unwrap();
        let cfg = OrlConfig { dynamics_hidden: vec![32, 32], dynamics_max_epochs: 20, ..OrlConfig::desk() };
        let ensemble = train_dynamics_ensemble(&real, &cfg).unwrap();
        let (guardian, _) = guardian_fit(&ds, &GuardianConfig { k: 50, ..Default::default() }).unwrap();
        let policy = PolicyModel::new(AlgoKind::Mbpo, &[16], stats, 9);
        Fixture { real, stats, reward_cfg, ensemble, guardian, policy }
    }

    fn env<'a>(f: &'a Fixture, thr: &'a StabilityThresholds) -> RolloutEnv<'a> {
        RolloutEnv {
            ensemble: &f.ensemble,
            stats: &f.stats,
            reward_cfg: &f.reward_cfg,
            thresholds: thr,
            episode_horizon: 6,
            sanity_box: 10.0,
            monitor: None,
        }
    }

    #[test]
    fn count_bound_and_plain_rewards() {
        let f = fixture(None);
        let thr = StabilityThresholds::clinical();
        let e = env(&f, &thr);
        let (ts, st) = model_rollout(&e, &f.real, &f.policy, Penalty::None, 5, 10, &mut rng_from(1)).unwrap();
        assert!(!ts.is_empty() && ts.len() <= 50);
        assert_eq!(st.n_transitions, ts.len());
        assert_eq!(st.n_started, 10);
        for t in &ts {
            let s = f.stats.denormalize(&t.s).unwrap();
            let s2 = f.stats.denormalize(&t.s2).unwrap();
            assert_eq!(t.r, synthetic_reward(&s, t.prev, t.a, &s2, &f.reward_cfg, &thr));
            assert_eq!(t.done, t.t as usize + 1 >= 6);
        }
        assert_eq!(st.mean_penalty, 0.0);
    }

    #[test]
    fn density_penalty_matches_guardian_decomposition() {
        let f = fixture(None);
        let thr = StabilityThresholds::clinical();
        let e = env(&f, &thr);
        let lambda = 0.3;
        let pen = Penalty::Density { guardian: &f.guardian, lambda };
        let (ts, st) = model_rollout(&e, &f.real, &f.policy, pen, 3, 40, &mut rng_from(2)).unwrap();
        assert!(st.ood_fraction.is_some());
        for t in &ts {
            let s = f.stats.denormalize(&t.s).unwrap();
            let s2 = f.stats.denormalize(&t.s2).unwrap();
            let reg = f.guardian.regularizer(&s, t.a).unwrap();
            let r = synthetic_reward(&s, t.prev, t.a, &s2, &f.reward_cfg, &thr);
            assert!((t.r - (r - lambda * (reg.u_plus + reg.u_minus))).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_rollout() {
        let f = fixture(None);
        let thr = StabilityThresholds::clinical();
        let e = env(&f, &thr);
        let pen = Penalty::Mopo { lambda: 1.0 };
        let a = model_rollout(&e, &f.real, &f.policy, pen, 5, 20, &mut rng_from(5)).unwrap();
        let b = model_rollout(&e, &f.real, &f.policy, pen, 5, 20, &mut rng_from(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn density_penalty_spares_in_distribution_pairs_under_noise() {
        let f = fixture(Some(0.5));
        let thr = StabilityThresholds::clinical();
        let e = env(&f, &thr);
        let mopo = model_rollout(&e, &f.real, &f.policy, Penalty::Mopo { lambda: 1.0 }, 1, 300, &mut rng_from(7)).unwrap();
        let dens = Penalty::Density { guardian: &f.guardian, lambda: 0.08 };
        let cormpo = model_rollout(&e, &f.real, &f.policy, dens, 1, 300, &mut rng_from(7)).unwrap();
        assert_eq!(mopo.0.len(), cormpo.0.len());
        let id: Vec<usize> = (0..cormpo.0.len())
            .filter(|&i| {
                let t = &cormpo.0[i];
                let s = f.stats.denormalize(&t.s).unwrap();
                f.guardian.regularizer(&s, t.a).unwrap().u_plus == 0.0
            })
            .collect();
        assert!(id.len() > 10, "{} in-distribution pairs", id.len());
        let mean = |ts: &[ZTransition]| id.iter().map(|&i| ts[i].r).sum::<f64>() / id.len() as f64;
        assert!(mean(&cormpo.0) >= mean(&mopo.0));
    }
}
