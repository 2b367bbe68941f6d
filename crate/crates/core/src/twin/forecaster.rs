//! Shared machinery for next-window forecasters: batched inference,
//! MC-dropout sampling, autoregressive rollouts and supervised training.

use ndarray::Axis;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_action, Dataset, FeatureStats, Record};
use crate::domain::{PLevel, StateWindow, Trajectory, WINDOW_LEN};
use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, Graph, ParamStore, Tensor, Var};
use crate::policy::Policy;
use crate::rng::{child_rng, derive_seed, rng_from, Rng};

/// A model of `T(s' | s, a)` over z-normalized windows.
pub trait Forecaster: Send + Sync {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn stats(&self) -> &FeatureStats;
    fn set_stats(&mut self, stats: FeatureStats);
    fn dropout_p(&self) -> f64;

    /// Builds the forward pass for a batch. `x` is `B x 72` z-normalized,
    /// `actions` is `B x 1` normalized levels. One dropout RNG per row when
    /// `masks` is given; deterministic when `None`.
    fn build(&self, g: &mut Graph, store: &ParamStore, x: &Tensor, actions: &Tensor, masks: Option<&mut [Rng]>) -> Var;
}

pub(crate) fn action_column(actions: &[PLevel]) -> Tensor {
    Tensor::from_shape_fn((actions.len(), 1), |(i, _)| normalize_action(actions[i]))
}

pub(crate) fn window_rows(stats: &FeatureStats, windows: &[&StateWindow]) -> Tensor {
    let mut x = Tensor::zeros((windows.len(), WINDOW_LEN));
    for (mut row, w) in x.rows_mut().into_iter().zip(windows) {
        row.assign(&ndarray::ArrayView1::from(&stats.normalize(w)[..]));
    }
    x
}

/// Batched z-space prediction.
pub fn predict_z_batch<F: Forecaster + ?Sized>(
    model: &F,
    x: &Tensor,
    actions: &Tensor,
    masks: Option<&mut [Rng]>,
) -> Tensor {
    let mut g = Graph::new();
    let out = model.build(&mut g, model.store(), x, actions, masks);
    g.value(out).clone()
}

/// One forward pass. Deterministic unless `dropout_active`, in which case
/// the dropout masks come from `seed`.
pub fn forecast<F: Forecaster + ?Sized>(
    model: &F,
    state: &StateWindow,
    action: PLevel,
    dropout_active: bool,
    seed: u64,
) -> Result<StateWindow> {
    let x = window_rows(model.stats(), &[state]);
    let a = action_column(&[action]);
    let z = if dropout_active {
        let mut rngs = [rng_from(seed)];
        predict_z_batch(model, &x, &a, Some(&mut rngs))
    } else {
        predict_z_batch(model, &x, &a, None)
    };
    model.stats().denormalize(z.row(0).as_slice().expect("contiguous"))
}

/// `n` MC-dropout passes; pass `i` uses the stream `(seed, i)`.
pub fn sample<F: Forecaster + ?Sized>(
    model: &F,
    state: &StateWindow,
    action: PLevel,
    n: usize,
    seed: u64,
) -> Result<Vec<StateWindow>> {
    if n == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    let x1 = window_rows(model.stats(), &[state]);
    let x = x1.broadcast((n, WINDOW_LEN)).expect("row broadcast").to_owned();
    let a = Tensor::from_elem((n, 1), normalize_action(action));
    let mut rngs: Vec<Rng> = (0..n as u64).map(|i| child_rng(seed, i)).collect();
    let z = predict_z_batch(model, &x, &a, Some(&mut rngs));
    z.axis_iter(Axis(0))
        .map(|row| model.stats().denormalize(row.as_slice().expect("contiguous")))
        .collect()
}

/// Autoregressive rollout: every prediction becomes the next input.
///
/// With `stochastic`, step `t` draws one MC-dropout sample from stream
/// `(seed, t)`; otherwise dropout is off.
pub fn rollout<F: Forecaster + ?Sized>(
    model: &F,
    s0: &StateWindow,
    p0: PLevel,
    policy: &dyn Policy,
    horizon: usize,
    seed: u64,
    stochastic: bool,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(invalid("rollout horizon must be at least 1"));
    }
    let mut policy_rng = child_rng(seed, u64::MAX);
    let mut states = vec![*s0];
    let mut actions = Vec::with_capacity(horizon);
    let mut current = p0;
    for t in 0..horizon {
        let s = states[t];
        let a = policy.act(&s, current, &mut policy_rng);
        let next = forecast(model, &s, a, stochastic, derive_seed(seed, t as u64))?;
        states.push(next);
        actions.push(a);
        current = a;
    }
    Trajectory::new(states, actions)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub holdout_ratio: f64,
    pub patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 60,
            holdout_ratio: 0.2,
            patience: 10,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.holdout_ratio > 0.0 && self.holdout_ratio < 1.0) {
            return Err(invalid("holdout ratio must lie in (0, 1)"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(invalid("batch size and epochs must be positive"));
        }
        Ok(())
    }
}

/// Per-epoch record of a supervised training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Holdout MSE before any update.
    pub initial_holdout_mse: f64,
    pub train_mse: Vec<f64>,
    pub holdout_mse: Vec<f64>,
    /// Epoch whose weights were kept; `None` when no epoch beat the initial weights.
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn best_holdout_mse(&self) -> f64 {
        self.best_epoch.map_or(self.initial_holdout_mse, |e| self.holdout_mse[e])
    }
}

/// Seeded `(train, holdout)` index split. With a single record both sides
/// contain it.
pub fn split_indices(n: usize, holdout_ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    let n_hold = ((n as f64) * holdout_ratio).round() as usize;
    if n < 2 || n_hold == 0 {
        return (idx.clone(), idx);
    }
    let n_hold = n_hold.min(n - 1);
    let hold = idx[..n_hold].to_vec();
    let train = idx[n_hold..].to_vec();
    (train, hold)
}

struct Batch {
    x: Tensor,
    a: Tensor,
    y: Tensor,
}

fn make_batch(stats: &FeatureStats, records: &[&Record]) -> Batch {
    let states: Vec<&StateWindow> = records.iter().map(|r| &r.state).collect();
    let next: Vec<&StateWindow> = records.iter().map(|r| &r.next_state).collect();
    let actions: Vec<PLevel> = records.iter().map(|r| r.action).collect();
    Batch { x: window_rows(stats, &states), a: action_column(&actions), y: window_rows(stats, &next) }
}

fn mse_loss(g: &mut Graph, pred: Var, y: &Tensor) -> Var {
    let target = g.input(y.clone());
    let diff = g.sub(pred, target);
    let sq = g.mul(diff, diff);
    g.mean(sq)
}

/// Deterministic MSE of `model` over `records`, in z-units.
pub fn evaluate_mse<F: Forecaster + ?Sized>(model: &F, records: &[&Record]) -> f64 {
    if records.is_empty() {
        return f64::NAN;
    }
    let chunks: Vec<f64> = records
        .par_chunks(512)
        .map(|chunk| {
            let b = make_batch(model.stats(), chunk);
            let pred = predict_z_batch(model, &b.x, &b.a, None);
            (&pred - &b.y).mapv(|d| d * d).sum()
        })
        .collect();
    chunks.iter().sum::<f64>() / (records.len() * WINDOW_LEN) as f64
}

/// Fits `model` by minimizing next-window MSE with Adam; keeps the weights
/// of the best holdout epoch. Normalization statistics come from the
/// training split.
pub fn train_forecaster<F: Forecaster>(model: &mut F, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid("cannot train a forecaster on an empty dataset"));
    }
    let (train_idx, hold_idx) = split_indices(dataset.len(), cfg.holdout_ratio, cfg.seed);
    let train: Vec<&Record> = train_idx.iter().map(|&i| &dataset.records[i]).collect();
    let hold: Vec<&Record> = hold_idx.iter().map(|&i| &dataset.records[i]).collect();
    model.set_stats(FeatureStats::from_windows(train.iter().flat_map(|r| [&r.state, &r.next_state])));

    let mut log = TrainLog { initial_holdout_mse: evaluate_mse(model, &hold), ..Default::default() };
    let mut opt = Adam::new(model.store(), cfg.lr).with_clip(cfg.clip_norm);
    let mut rng = child_rng(cfg.seed, 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (log.initial_holdout_mse, model.store().clone());
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let recs: Vec<&Record> = chunk.iter().map(|&i| train[i]).collect();
            let b = make_batch(model.stats(), &recs);
            let mut masks: Vec<Rng> = (0..recs.len()).map(|_| child_rng(rand::Rng::random(&mut rng), 0)).collect();
            let mut g = Graph::new();
            let pred = model.build(&mut g, model.store(), &b.x, &b.a, Some(&mut masks));
            let loss = mse_loss(&mut g, pred, &b.y);
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::TrainingFailure { epoch, reason: "non-finite training loss".into() });
            }
            g.backward(loss);
            let grads = g.param_grads(model.store());
            opt.step(model.store_mut(), &grads);
            total += lv;
            batches += 1.0;
        }
        let hold_mse = evaluate_mse(model, &hold);
        if !hold_mse.is_finite() || !model.store().all_finite() {
            return Err(Error::TrainingFailure { epoch, reason: "non-finite holdout loss".into() });
        }
        log.train_mse.push(total / batches);
        log.holdout_mse.push(hold_mse);
        log::debug!("forecaster epoch {epoch}: train {:.5} holdout {hold_mse:.5}", total / batches);
        if hold_mse < best.0 {
            best = (hold_mse, model.store().clone());
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    *model.store_mut() = best.1;
    Ok(log)
}
