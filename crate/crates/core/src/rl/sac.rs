//! Discrete soft actor-critic over the eight P-levels, plus behavioral
//! cloning on the same actor network.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{pack_store, unpack_meta, unpack_store, Container, MAGIC_POLICY};
use crate::dataset::FeatureStats;
use crate::domain::{PLevel, StateWindow, N_ACTIONS, WINDOW_LEN};
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, Mlp, ParamStore, Tensor, Var};
use crate::policy::Policy;
use crate::rng::{derive_seed, rng_from, Rng};

use super::buffer::Batch;
use super::config::{AlgoKind, OrlConfig};

/// Network mapping a z-normalized window to one value per action.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub store: ParamStore,
    pub mlp: Mlp,
}

impl Net {
    pub fn new(name: &str, hidden: &[usize], seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut sizes = vec![WINDOW_LEN];
        sizes.extend(hidden);
        sizes.push(N_ACTIONS);
        let mlp = Mlp::new(&mut store, name, &sizes, &mut rng_from(seed));
        Self { store, mlp }
    }

    pub fn predict(&self, x: &Tensor) -> Tensor {
        self.mlp.predict(&self.store, x)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        self.mlp.forward(g, store, x)
    }
}

/// Row-wise softmax and log-softmax of a logits matrix.
pub fn softmax_rows(logits: &Tensor) -> (Tensor, Tensor) {
    let mut logp = logits.clone();
    for mut row in logp.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    (logp.mapv(f64::exp), logp)
}

/// The deployable part of a trained agent: the actor and the window
/// normalization it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub algo: AlgoKind,
    pub stats: FeatureStats,
    pub hidden: Vec<usize>,
    pub actor: Net,
}

#[derive(Serialize, Deserialize)]
struct PolicyMeta {
    algo: AlgoKind,
    hidden: Vec<usize>,
    stats: FeatureStats,
}

impl PolicyModel {
    pub fn new(algo: AlgoKind, hidden: &[usize], stats: FeatureStats, seed: u64) -> Self {
        Self { algo, stats, hidden: hidden.to_vec(), actor: Net::new("actor", hidden, seed) }
    }

    /// Action probabilities for a batch of z-windows.
    pub fn probs_z(&self, s: &Tensor) -> Tensor {
        softmax_rows(&self.actor.predict(s)).0
    }

    pub fn distribution(&self, state: &StateWindow) -> [f64; N_ACTIONS] {
        let x = Tensor::from_shape_vec((1, WINDOW_LEN), self.stats.normalize(state).to_vec()).expect("one row");
        let p = self.probs_z(&x);
        std::array::from_fn(|i| p[[0, i]])
    }

    /// Most probable level; ties go to the lower level.
    pub fn greedy(&self, state: &StateWindow) -> PLevel {
        argmax_level(&self.distribution(state))
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = PolicyMeta { algo: self.algo, hidden: self.hidden.clone(), stats: self.stats };
        pack_store(MAGIC_POLICY, &meta, &self.actor.store)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: PolicyMeta = unpack_meta(c)?;
        let mut m = Self::new(meta.algo, &meta.hidden, meta.stats, 0);
        unpack_store(c, &mut m.actor.store)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, MAGIC_POLICY)?)
    }
}

pub fn argmax_level(p: &[f64]) -> PLevel {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    PLevel::from_index(best).expect("index below N_ACTIONS")
}

impl Policy for PolicyModel {
    fn act(&self, state: &StateWindow, _: PLevel, _: &mut Rng) -> PLevel {
        self.greedy(state)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SacStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub entropy: f64,
}

/// Actor, twin critics with Polyak targets and a learned temperature.
#[derive(Debug, Clone)]
pub struct SacAgent {
    pub policy: PolicyModel,
    pub q1: Net,
    pub q2: Net,
    pub q1_target: Net,
    pub q2_target: Net,
    /// `1 x 1` store holding `ln(alpha)`.
    pub log_alpha: ParamStore,
    actor_opt: Adam,
    q1_opt: Adam,
    q2_opt: Adam,
    alpha_opt: Adam,
}

impl SacAgent {
    pub fn new(algo: AlgoKind, stats: FeatureStats, cfg: &OrlConfig) -> Self {
        let policy = PolicyModel::new(algo, &cfg.hidden, stats, derive_seed(cfg.seed, 0xAC));
        let q1 = Net::new("q1", &cfg.hidden, derive_seed(cfg.seed, 0xC1));
        let q2 = Net::new("q2", &cfg.hidden, derive_seed(cfg.seed, 0xC2));
        let mut log_alpha = ParamStore::new();
        log_alpha.add_filled("log_alpha", 1, 1, cfg.init_alpha.ln());
        Self {
            actor_opt: Adam::new(&policy.actor.store, cfg.actor_lr),
            q1_opt: Adam::new(&q1.store, cfg.critic_lr),
            q2_opt: Adam::new(&q2.store, cfg.critic_lr),
            alpha_opt: Adam::new(&log_alpha, cfg.alpha_lr),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            log_alpha,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.iter().next().expect("one tensor")[[0, 0]].exp()
    }

    /// Soft Bellman target `r + gamma * (1 - done) * sum_a pi(a|s') (min Q'(s', a) - alpha log pi(a|s'))`.
    pub fn critic_target(&self, batch: &Batch, gamma: f64) -> Tensor {
        let (p, logp) = softmax_rows(&self.policy.actor.predict(&batch.s2));
        let q1 = self.q1_target.predict(&batch.s2);
        let q2 = self.q2_target.predict(&batch.s2);
        let alpha = self.alpha();
        let n = batch.s.nrows();
        Tensor::from_shape_fn((n, 1), |(i, _)| {
            let v: f64 = (0..N_ACTIONS).map(|a| p[[i, a]] * (q1[[i, a]].min(q2[[i, a]]) - alpha * logp[[i, a]])).sum();
            batch.r[[i, 0]] + gamma * batch.not_done[[i, 0]] * v
        })
    }
}

pub fn critic_loss(g: &mut Graph, net: &Net, store: &ParamStore, s: &Tensor, a: &[usize], y: &Tensor) -> Var {
    let x = g.input(s.clone());
    let q = net.forward(g, store, x);
    let qa = g.gather(q, a);
    let t = g.input(y.clone());
    let d = g.sub(qa, t);
    let sq = g.mul(d, d);
    g.mean(sq)
}

/// `mean_s sum_a pi(a|s) (alpha log pi(a|s) - min Q(s, a))`.
pub fn actor_loss(g: &mut Graph, net: &Net, store: &ParamStore, s: &Tensor, q_min: &Tensor, alpha: f64) -> Var {
    let x = g.input(s.clone());
    let logits = net.forward(g, store, x);
    let p = g.softmax_rows(logits);
    let lp = g.log_softmax_rows(logits);
    let t = g.scale(lp, alpha);
    let q = g.input(q_min.clone());
    let d = g.sub(t, q);
    let m = g.mul(p, d);
    let rs = g.row_sum(m);
    g.mean(rs)
}

fn ensure_finite(v: f64, what: &str, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingFailure { epoch: step, reason: format!("non-finite {what}") })
    }
}

/// One gradient step on both critics, the actor and the temperature,
/// followed by the target update.
pub fn sac_update(agent: &mut SacAgent, batch: &Batch, cfg: &OrlConfig, step: usize) -> Result<SacStats> {
    let y = agent.critic_target(batch, cfg.gamma);
    let mut critic_total = 0.0;
    for (net, opt) in [(&mut agent.q1, &mut agent.q1_opt), (&mut agent.q2, &mut agent.q2_opt)] {
        let mut g = Graph::new();
        let loss = critic_loss(&mut g, net, &net.store, &batch.s, &batch.a, &y);
        let lv = g.scalar(loss);
        ensure_finite(lv, "critic loss", step)?;
        g.backward(loss);
        let grads = g.param_grads(&net.store);
        opt.step(&mut net.store, &grads);
        critic_total += lv;
    }

    let q1 = agent.q1.predict(&batch.s);
    let q2 = agent.q2.predict(&batch.s);
    let q_min = ndarray::Zip::from(&q1).and(&q2).map_collect(|a, b| a.min(*b));
    let alpha = agent.alpha();
    let mut g = Graph::new();
    let actor = &agent.policy.actor;
    let loss = actor_loss(&mut g, actor, &actor.store, &batch.s, &q_min, alpha);
    let actor_lv = g.scalar(loss);
    ensure_finite(actor_lv, "actor loss", step)?;
    g.backward(loss);
    let grads = g.param_grads(&agent.policy.actor.store);
    agent.actor_opt.step(&mut agent.policy.actor.store, &grads);

    // temperature: d/d(log alpha) of log_alpha * (H - target)
    let (p, logp) = softmax_rows(&agent.policy.actor.predict(&batch.s));
    let entropy = -(&p * &logp).sum() / batch.s.nrows() as f64;
    ensure_finite(entropy, "policy entropy", step)?;
    let grad = Tensor::from_elem((1, 1), entropy - cfg.target_entropy);
    agent.alpha_opt.step(&mut agent.log_alpha, &[grad]);

    agent.q1_target.store.soft_update_from(&agent.q1.store, cfg.tau);
    agent.q2_target.store.soft_update_from(&agent.q2.store, cfg.tau);
    Ok(SacStats { critic_loss: critic_total / 2.0, actor_loss: actor_lv, alpha: agent.alpha(), entropy })
}

/// One cross-entropy step of behavioral cloning; returns the loss.
pub fn bc_update(policy: &mut PolicyModel, opt: &mut Adam, batch: &Batch, step: usize) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(batch.s.clone());
    let logits = policy.actor.forward(&mut g, &policy.actor.store, x);
    let lp = g.log_softmax_rows(logits);
    let picked = g.gather(lp, &batch.a);
    let mean = g.mean(picked);
    let loss = g.scale(mean, -1.0);
    let lv = g.scalar(loss);
    ensure_finite(lv, "behavior cloning loss", step)?;
    g.backward(loss);
    let grads = g.param_grads(&policy.actor.store);
    opt.step(&mut policy.actor.store, &grads);
    Ok(lv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;
    use rand::Rng as _;

    fn tiny_cfg() -> OrlConfig {
        OrlConfig { hidden: vec![6], ..OrlConfig::desk() }
    }

    fn random_batch(n: usize, seed: u64) -> Batch {
        let mut rng = rng_from(seed);
        Batch {
            s: Tensor::from_shape_simple_fn((n, WINDOW_LEN), || rng.random_range(-1.0..1.0)),
            a: (0..n).map(|_| rng.random_range(0..N_ACTIONS)).collect(),
            r: Tensor::from_shape_simple_fn((n, 1), || rng.random_range(-2.0..2.0)),
            s2: Tensor::from_shape_simple_fn((n, WINDOW_LEN), || rng.random_range(-1.0..1.0)),
            not_done: Tensor::from_shape_simple_fn((n, 1), || if rng.random::<f64>() < 0.2 { 0.0 } else { 1.0 }),
        }
    }

    #[test]
    fn critic_and_actor_gradients() {
        let agent = SacAgent::new(AlgoKind::Mbpo, FeatureStats::default(), &tiny_cfg());
        let b = random_batch(5, 1);
        let y = agent.critic_target(&b, 0.99);
        let net = &agent.q1;
        let mut g = Graph::new();
        let l = critic_loss(&mut g, net, &net.store, &b.s, &b.a, &y);
        g.backward(l);
        let grads = g.param_grads(&net.store);
        let rep = check_gradients(&net.store, &grads, |s| {
            let mut g = Graph::new();
            let l = critic_loss(&mut g, net, s, &b.s, &b.a, &y);
            g.scalar(l)
        }, 1e-6, 3);
        assert!(rep.max_rel_error <= 1e-4, "critic {rep:?}");

        let q = Tensor::from_shape_fn((5, N_ACTIONS), |(i, j)| (i as f64 - j as f64) * 0.3);
        let actor = &agent.policy.actor;
        let mut g = Graph::new();
        let l = actor_loss(&mut g, actor, &actor.store, &b.s, &q, 0.7);
        g.backward(l);
        let grads = g.param_grads(&actor.store);
        let rep = check_gradients(&actor.store, &grads, |s| {
            let mut g = Graph::new();
            let l = actor_loss(&mut g, actor, s, &b.s, &q, 0.7);
            g.scalar(l)
        }, 1e-6, 3);
        assert!(rep.max_rel_error <= 1e-4, "actor {rep:?}");
    }

    #[test]
    fn zero_learning_rates_leave_parameters_unchanged() {
        let cfg = OrlConfig { actor_lr: 0.0, critic_lr: 0.0, alpha_lr: 0.0, ..tiny_cfg() };
        let mut agent = SacAgent::new(AlgoKind::Mbpo, FeatureStats::default(), &cfg);
        let before = (agent.policy.actor.store.clone(), agent.q1.store.clone(), agent.q2_target.store.clone(), agent.alpha());
        sac_update(&mut agent, &random_batch(16, 2), &cfg, 0).unwrap();
        assert_eq!(agent.policy.actor.store, before.0);
        assert_eq!(agent.q1.store, before.1);
        assert_eq!(agent.q2_target.store, before.2);
        assert_eq!(agent.alpha(), before.3);
    }

    #[test]
    fn critic_targets_respect_reward_bound() {
        // with |r| <= 2 and gamma = 0.99, any soft value below c = 200 keeps targets bounded
        let mut agent = SacAgent::new(AlgoKind::Mbpo, FeatureStats::default(), &tiny_cfg());
        let b = random_batch(64, 3);
        for _ in 0..50 {
            sac_update(&mut agent, &b, &tiny_cfg(), 0).unwrap();
        }
        let y = agent.critic_target(&b, 0.99);
        assert!(y.iter().all(|v| v.abs() <= 200.0));
    }

    #[test]
    fn large_temperature_raises_entropy() {
        let b = random_batch(32, 4);
        let run = |alpha: f64| {
            let cfg = OrlConfig { init_alpha: alpha, alpha_lr: 0.0, actor_lr: 1e-2, ..tiny_cfg() };
            let mut agent = SacAgent::new(AlgoKind::Mbpo, FeatureStats::default(), &cfg);
            let mut last = 0.0;
            for _ in 0..30 {
                last = sac_update(&mut agent, &b, &cfg, 0).unwrap().entropy;
            }
            last
        };
        assert!(run(50.0) > run(1e-3));
    }

    #[test]
    fn actor_outputs_are_distributions_and_checkpoint_round_trips() {
        let cfg = tiny_cfg();
        let mut agent = SacAgent::new(AlgoKind::Cormpo, FeatureStats::default(), &cfg);
        let b = random_batch(16, 5);
        for _ in 0..5 {
            sac_update(&mut agent, &b, &cfg, 0).unwrap();
            let p = agent.policy.probs_z(&b.s);
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() <= 1e-9);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.cpol");
        agent.policy.save(&path).unwrap();
        assert_eq!(PolicyModel::load(&path).unwrap(), agent.policy);
    }

    #[test]
    fn argmax_prefers_lower_level_on_ties() {
        assert_eq!(argmax_level(&[0.1, 0.4, 0.4, 0.1, 0.0, 0.0, 0.0, 0.0]), PLevel::new(3).unwrap());
    }
}
