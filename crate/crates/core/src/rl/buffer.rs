use std::collections::VecDeque;

use rand::Rng as _;

use crate::dataset::{Dataset, FeatureStats};
use crate::domain::{PLevel, WINDOW_LEN};
use crate::error::{invalid, Result};
use crate::metrics::{step_change_penalty, weaning_term, StabilityThresholds};
use crate::nn::Tensor;
use crate::reward::{normalize_reward, shaped_reward, RewardConfig};
use crate::rng::Rng;

/// Transition over z-normalized windows. `prev` is the level applied
/// before `a`; `t` is the step index within the episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ZTransition {
    pub s: [f64; WINDOW_LEN],
    pub prev: PLevel,
    pub a: PLevel,
    pub r: f64,
    pub s2: [f64; WINDOW_LEN],
    pub done: bool,
    pub t: u32,
}

/// FIFO replay buffer; unbounded when `capacity` is `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBuffer {
    items: VecDeque<ZTransition>,
    capacity: Option<usize>,
}

/// Column-stacked mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub s: Tensor,
    pub a: Vec<usize>,
    pub r: Tensor,
    pub s2: Tensor,
    pub not_done: Tensor,
}

impl ReplayBuffer {
    pub fn new(capacity: Option<usize>) -> Self {
        Self { items: VecDeque::new(), capacity }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: ZTransition) {
        if let Some(cap) = self.capacity {
            if cap == 0 {
                return;
            }
            while self.items.len() >= cap {
                self.items.pop_front();
            }
        }
        self.items.push_back(t);
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = ZTransition>) {
        for t in ts {
            self.push(t);
        }
    }

    pub fn get(&self, i: usize) -> &ZTransition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ZTransition> {
        self.items.iter()
    }

    pub fn sample_indices(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let items: Vec<&ZTransition> = idx.iter().map(|&i| &self.items[i]).collect();
        stack(&items)
    }
}

pub fn stack(items: &[&ZTransition]) -> Batch {
    let n = items.len();
    let mut s = Tensor::zeros((n, WINDOW_LEN));
    let mut s2 = Tensor::zeros((n, WINDOW_LEN));
    for (i, t) in items.iter().enumerate() {
        s.row_mut(i).assign(&ndarray::ArrayView1::from(&t.s[..]));
        s2.row_mut(i).assign(&ndarray::ArrayView1::from(&t.s2[..]));
    }
    Batch {
        s,
        a: items.iter().map(|t| t.a.index()).collect(),
        r: Tensor::from_shape_fn((n, 1), |(i, _)| items[i].r),
        s2,
        not_done: Tensor::from_shape_fn((n, 1), |(i, _)| if items[i].done { 0.0 } else { 1.0 }),
    }
}

/// Raw shaped rewards `r_phys - lambda1 * ACP + lambda2 * WS` in dataset
/// order, plus each transition's previous level (`a_{-1} = a_0`).
pub fn shaped_raw_rewards(
    dataset: &Dataset,
    cfg: &RewardConfig,
    thr: &StabilityThresholds,
) -> Result<Vec<(f64, PLevel)>> {
    let episodes = dataset.episodes()?;
    let mut pos = std::collections::HashMap::with_capacity(dataset.len());
    for ep in &episodes {
        for (i, r) in ep.records.iter().enumerate() {
            let prev = if i == 0 { r.action } else { ep.records[i - 1].action };
            let raw = shaped_reward(
                r.reward,
                step_change_penalty(prev, r.action, true),
                weaning_term(&r.state, prev, r.action, thr),
                cfg,
            );
            pos.insert((r.traj_id, r.t), (raw, prev));
        }
    }
    Ok(dataset.records.iter().map(|r| pos[&(r.traj_id, r.t)]).collect())
}

/// Replay buffer of shaped, z-normalized and clipped rewards. Returns the
/// reward configuration with its normalization statistics frozen so model
/// rollouts can use the same scale.
pub fn build_shaped_buffer(
    dataset: &Dataset,
    reward_cfg: &RewardConfig,
    thr: &StabilityThresholds,
    stats: &FeatureStats,
) -> Result<(ReplayBuffer, RewardConfig)> {
    reward_cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("cannot build a replay buffer from an empty dataset"));
    }
    let shaped = shaped_raw_rewards(dataset, reward_cfg, thr)?;
    let raws: Vec<f64> = shaped.iter().map(|(r, _)| *r).collect();
    let cfg = reward_cfg.with_stats_from(&raws);
    let mut buf = ReplayBuffer::new(None);
    for (rec, (raw, prev)) in dataset.records.iter().zip(shaped) {
        buf.push(ZTransition {
            s: stats.normalize(&rec.state),
            prev,
            a: rec.action,
            r: normalize_reward(raw, &cfg),
            s2: stats.normalize(&rec.next_state),
            done: rec.done,
            t: rec.t,
        });
    }
    Ok((buf, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;
    use crate::domain::StateWindow;
    use crate::synth::{GeneratorConfig, ScriptedExpert, SynthEnv};

    fn data() -> Dataset {
        SynthEnv::new(GeneratorConfig { n_trajectories: 30, seed: 1, ..Default::default() })
            .generate_dataset(&ScriptedExpert)
            .unwrap()
    }

    #[test]
    fn unshaped_buffer_holds_normalized_physiological_reward() {
        let ds = data();
        let stats = FeatureStats::from_dataset(&ds);
        let (buf, cfg) = build_shaped_buffer(&ds, &RewardConfig::default(), &StabilityThresholds::clinical(), &stats).unwrap();
        assert_eq!(buf.len(), ds.len());
        let raws: Vec<f64> = ds.records.iter().map(|r| r.reward).collect();
        let expect = RewardConfig::default().with_stats_from(&raws);
        assert_eq!(cfg, expect);
        for (t, r) in buf.iter().zip(&ds.records) {
            assert_eq!(t.r, normalize_reward(r.reward, &expect));
        }
    }

    #[test]
    fn large_jump_costs_lambda1_times_delta() {
        let w = StateWindow::constant([50.0; 12]).unwrap();
        let mk = |t: u32, a: i64| Record {
            state: w,
            action: PLevel::new(a).unwrap(),
            reward: -1.0,
            next_state: w,
            done: t == 1,
            traj_id: 0,
            t,
        };
        let ds = Dataset::new(vec![mk(0, 8), mk(1, 3)]);
        let cfg = RewardConfig { lambda1: 0.5, ..Default::default() };
        let shaped = shaped_raw_rewards(&ds, &cfg, &StabilityThresholds::clinical()).unwrap();
        assert_eq!(shaped[0], (-1.0, PLevel::new(8).unwrap()));
        assert_eq!(shaped[1].0, -1.0 - 2.5);
        let bad = Dataset::new(vec![mk(0, 8), Record { t: 3, ..mk(1, 3) }]);
        assert!(build_shaped_buffer(&bad, &cfg, &StabilityThresholds::clinical(), &FeatureStats::default()).is_err());
    }

    #[test]
    fn fifo_capacity() {
        let ds = data();
        let stats = FeatureStats::from_dataset(&ds);
        let (buf, _) = build_shaped_buffer(&ds, &RewardConfig::default(), &StabilityThresholds::clinical(), &stats).unwrap();
        let mut small = ReplayBuffer::new(Some(5));
        small.extend(buf.iter().cloned());
        assert_eq!(small.len(), 5);
        assert_eq!(small.get(4), buf.get(buf.len() - 1));
    }
}
