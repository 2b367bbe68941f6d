//! Forecast-quality metrics for twins and baselines.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureStats};
use crate::domain::{Feature, PLevel, StateWindow, WINDOW_LEN};
use crate::error::{invalid, Result};
use crate::metrics::ols_slope;
use crate::rng::derive_seed;

use super::forecaster::{forecast, sample, Forecaster};

/// MAP slope (mmHg per 10-minute step) at or above which a window is "increasing".
pub const TREND_SLOPE: f64 = 2.0;

/// Empirical CRPS: `mean|x - y| - 0.5 * mean|x - x'|` over all ordered pairs.
pub fn crps(samples: &[f64], y: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(invalid("CRPS needs at least one sample"));
    }
    let n = samples.len() as f64;
    let term1 = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / n;
    // sum over ordered pairs via sorted prefix sums: sum_{i,j}|x_i - x_j| = 2 sum_i (2i - n + 1) x_(i)
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    Ok(term1 - 0.5 * pair_sum / (n * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    Increasing,
    Decreasing,
    Flat,
}

pub fn map_trend(w: &StateWindow) -> Trend {
    let slope = ols_slope(&w.column(Feature::Map));
    if slope >= TREND_SLOPE {
        Trend::Increasing
    } else if slope <= -TREND_SLOPE {
        Trend::Decreasing
    } else {
        Trend::Flat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinEvalReport {
    /// MAE over all 72 entries in z-units of the test set.
    pub mae_all: f64,
    /// MAE of MAP in mmHg.
    pub mae_map: f64,
    /// `mae_all` restricted to transitions that kept the previous P-level.
    pub mae_static_pl: f64,
    /// `mae_all` restricted to transitions that changed the P-level.
    pub mae_changing_pl: f64,
    pub trend_accuracy: f64,
    /// Mean per-entry CRPS of MC-dropout samples, z-units.
    pub crps: f64,
    /// CRPS of a zero-spread forecast at the sample mean (its MAE), z-units.
    pub crps_point_mean: f64,
    /// CRPS of the sample mean plus homoscedastic Gaussian noise of the
    /// twin's average spread, z-units.
    pub crps_noise_baseline: f64,
    pub n_transitions: usize,
}

#[derive(Default, Clone, Copy)]
struct Acc {
    abs_all: f64,
    abs_map: f64,
    static_abs: f64,
    static_n: f64,
    change_abs: f64,
    change_n: f64,
    trend_hits: f64,
    crps: f64,
    crps_point: f64,
    spread_sq: f64,
}

impl Acc {
    fn merge(mut self, o: Acc) -> Acc {
        self.abs_all += o.abs_all;
        self.abs_map += o.abs_map;
        self.static_abs += o.static_abs;
        self.static_n += o.static_n;
        self.change_abs += o.change_abs;
        self.change_n += o.change_n;
        self.trend_hits += o.trend_hits;
        self.crps += o.crps;
        self.crps_point += o.crps_point;
        self.spread_sq += o.spread_sq;
        self
    }
}

/// Evaluates one-hour-ahead forecasts over every transition of `test`.
///
/// The level change of a transition is judged against the previous action
/// of the same trajectory; first transitions count as neither static nor
/// changing.
pub fn twin_eval<F: Forecaster + ?Sized>(model: &F, test: &Dataset, n_samples: usize, seed: u64) -> Result<TwinEvalReport> {
    if test.is_empty() {
        return Err(invalid("test dataset is empty"));
    }
    if n_samples == 0 {
        return Err(invalid("n_samples must be positive"));
    }
    let stats = FeatureStats::from_dataset(test);
    let mut items: Vec<(usize, Option<PLevel>)> = Vec::with_capacity(test.len());
    let mut index = std::collections::HashMap::new();
    for (i, r) in test.records.iter().enumerate() {
        index.insert((r.traj_id, r.t), i);
    }
    for (i, r) in test.records.iter().enumerate() {
        let prev = if r.t == 0 { None } else { index.get(&(r.traj_id, r.t - 1)).map(|&j| test.records[j].action) };
        items.push((i, prev));
    }

    let per: Vec<(Acc, Vec<f64>, Vec<f64>)> = items
        .par_iter()
        .map(|&(i, prev)| -> Result<(Acc, Vec<f64>, Vec<f64>)> {
            let r = &test.records[i];
            let point = forecast(model, &r.state, r.action, false, 0)?;
            let draws = sample(model, &r.state, r.action, n_samples, derive_seed(seed, i as u64))?;
            let truth = stats.normalize(&r.next_state);
            let pz = stats.normalize(&point);
            let dz: Vec<[f64; WINDOW_LEN]> = draws.iter().map(|d| stats.normalize(d)).collect();
            let mut acc = Acc::default();
            let abs: f64 = pz.iter().zip(&truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / WINDOW_LEN as f64;
            acc.abs_all = abs;
            acc.abs_map = point
                .column(Feature::Map)
                .iter()
                .zip(r.next_state.column(Feature::Map))
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>()
                / point.column(Feature::Map).len() as f64;
            match prev {
                Some(p) if p == r.action => {
                    acc.static_abs = abs;
                    acc.static_n = 1.0;
                }
                Some(_) => {
                    acc.change_abs = abs;
                    acc.change_n = 1.0;
                }
                None => {}
            }
            acc.trend_hits = f64::from(map_trend(&point) == map_trend(&r.next_state));
            let mut means = vec![0.0; WINDOW_LEN];
            let mut column = vec![0.0; n_samples];
            for j in 0..WINDOW_LEN {
                for (k, d) in dz.iter().enumerate() {
                    column[k] = d[j];
                }
                let mean = column.iter().sum::<f64>() / n_samples as f64;
                means[j] = mean;
                acc.crps += crps(&column, truth[j])?;
                acc.crps_point += (mean - truth[j]).abs();
                acc.spread_sq += column.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n_samples as f64;
            }
            acc.crps /= WINDOW_LEN as f64;
            acc.crps_point /= WINDOW_LEN as f64;
            Ok((acc, means, truth.to_vec()))
        })
        .collect::<Result<_>>()?;

    let n = test.len() as f64;
    let total = per.iter().fold(Acc::default(), |a, (b, _, _)| a.merge(*b));
    let spread = (total.spread_sq / (n * WINDOW_LEN as f64)).sqrt();

    // homoscedastic baseline: same average spread, placed uniformly
    let noise_crps: f64 = per
        .par_iter()
        .enumerate()
        .map(|(i, (_, means, truth))| -> Result<f64> {
            let mut rng = crate::rng::child_rng(seed ^ 0x5EED, i as u64);
            let mut s = 0.0;
            let mut column = vec![0.0; n_samples];
            for j in 0..WINDOW_LEN {
                for c in column.iter_mut() {
                    let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                    *c = means[j] + spread * e;
                }
                s += crps(&column, truth[j])?;
            }
            Ok(s / WINDOW_LEN as f64)
        })
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();

    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    Ok(TwinEvalReport {
        mae_all: total.abs_all / n,
        mae_map: total.abs_map / n,
        mae_static_pl: ratio(total.static_abs, total.static_n),
        mae_changing_pl: ratio(total.change_abs, total.change_n),
        trend_accuracy: total.trend_hits / n,
        crps: total.crps / n,
        crps_point_mean: total.crps_point / n,
        crps_noise_baseline: noise_crps / n,
        n_transitions: test.len(),
    })
}

/// Per-step MAE (z-units) of autoregressive rollouts that replay each
/// test trajectory's recorded actions from its first state.
pub fn rollout_error_profile<F: Forecaster + ?Sized>(model: &F, test: &Dataset) -> Result<Vec<f64>> {
    let stats = FeatureStats::from_dataset(test);
    let episodes = test.episodes()?;
    let horizon = episodes.iter().map(|e| e.records.len()).max().unwrap_or(0);
    let mut sums = vec![0.0; horizon];
    let mut counts = vec![0.0; horizon];
    for ep in &episodes {
        let mut s = ep.records[0].state;
        for (t, r) in ep.records.iter().enumerate() {
            s = forecast(model, &s, r.action, false, 0)?;
            let err: f64 = stats
                .normalize(&s)
                .iter()
                .zip(stats.normalize(&r.next_state))
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / WINDOW_LEN as f64;
            sums[t] += err;
            counts[t] += 1.0;
        }
    }
    Ok(sums.iter().zip(&counts).map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 }).collect())
}
