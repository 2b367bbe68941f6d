//! Density guardian: a k-NN truncated Gaussian KDE over `(state, action)`
//! vectors, a percentile threshold on its log-density and the resulting
//! out-of-distribution regularizer.
//!
//! The regularizer enters rewards as `r - lambda * u`. In the theory
//! `lambda = gamma * c * C` with `c = r_max / (1 - gamma)` and `C` the
//! dynamics-error constant; here it is a plain hyperparameter.

mod vptree;

use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, MAGIC_GUARDIAN};
use crate::dataset::{normalize_action, Dataset, FeatureStats};
use crate::domain::{PLevel, StateWindow, WINDOW_LEN};
use crate::error::{invalid, Error, Result};
use crate::rng::rng_from;

pub use vptree::{euclidean, VpTree};

/// Dimension of a `(state, action)` query vector.
pub const QUERY_DIM: usize = WINDOW_LEN + 1;

/// Lower bound on the density, `ln(1e-300)`.
pub fn log_density_floor() -> f64 {
    1e-300f64.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardianConfig {
    /// Percentile of validation log-densities used as the threshold.
    pub percentile: f64,
    pub lambda: f64,
    pub bandwidth: f64,
    pub k: usize,
    pub split_seed: u64,
}

impl Default for GuardianConfig {
    fn default() -> Self {
        Self { percentile: 20.0, lambda: 0.08, bandwidth: 1.0, k: 100, split_seed: 0 }
    }
}

impl GuardianConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(invalid("percentile must lie in (0, 100)"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda must be finite and non-negative"));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(invalid("bandwidth must be positive"));
        }
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        Ok(())
    }
}

/// Normalization applied to `(state, action)` before indexing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryStats {
    pub state: FeatureStats,
    pub action_mean: f64,
    pub action_std: f64,
}

impl Default for QueryStats {
    fn default() -> Self {
        Self { state: FeatureStats::default(), action_mean: 0.0, action_std: 1.0 }
    }
}

impl QueryStats {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a crate::dataset::Record> + Clone) -> Self {
        let state = FeatureStats::from_windows(records.clone().into_iter().map(|r| &r.state));
        let acts: Vec<f64> = records.into_iter().map(|r| normalize_action(r.action)).collect();
        if acts.is_empty() {
            return Self::default();
        }
        let n = acts.len() as f64;
        let mean = acts.iter().sum::<f64>() / n;
        let var = acts.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Self { state, action_mean: mean, action_std: if var > 1e-12 { var.sqrt() } else { 1.0 } }
    }

    pub fn vector(&self, state: &StateWindow, action: PLevel) -> [f64; QUERY_DIM] {
        let mut out = [0.0; QUERY_DIM];
        out[..WINDOW_LEN].copy_from_slice(&self.state.normalize(state));
        out[WINDOW_LEN] = (normalize_action(action) - self.action_mean) / self.action_std;
        out
    }
}

/// `u = tau - log p` split into its positive and negative parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularizer {
    pub u: f64,
    pub u_plus: f64,
    pub u_minus: f64,
}

impl Regularizer {
    pub fn from_u(u: f64) -> Self {
        Self { u, u_plus: u.max(0.0), u_minus: u.min(0.0) }
    }
}

/// `r - lambda * u`.
pub fn penalized_reward(r: f64, u: f64, lambda: f64) -> f64 {
    r - lambda * u
}

/// Log of the averaged unnormalized kernel `exp(-d^2 / (2 h^2))` over the
/// given distances, floored at `ln(1e-300)`.
pub fn log_mean_kernel(distances: &[f64], h: f64) -> f64 {
    if distances.is_empty() {
        return log_density_floor();
    }
    let logs: Vec<f64> = distances.iter().map(|d| -d * d / (2.0 * h * h)).collect();
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logs.iter().map(|l| (l - m).exp()).sum();
    (m + s.ln() - (distances.len() as f64).ln()).max(log_density_floor())
}

/// Linear-interpolation percentile (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(invalid("percentile must lie in [0, 100]"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    pub stats: QueryStats,
    pub bandwidth: f64,
    pub k: usize,
    tau: Option<f64>,
    tree: VpTree,
}

#[derive(Serialize, Deserialize)]
struct DensityMeta {
    d: usize,
    n: usize,
    k: usize,
    h: f64,
    tau: Option<f64>,
    stats: QueryStats,
}

/// Summary printed after fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub tau: f64,
    pub n_reference: usize,
    pub n_validation: usize,
    /// Share of validation points with `u > 0`.
    pub validation_ood_fraction: f64,
}

impl DensityModel {
    /// Index over already-normalized vectors (row-major, `QUERY_DIM` wide).
    pub fn from_vectors(points: Vec<f64>, stats: QueryStats, bandwidth: f64, k: usize) -> Result<Self> {
        Self::with_dim(points, QUERY_DIM, stats, bandwidth, k)
    }

    /// As [`DensityModel::from_vectors`] with an arbitrary dimension; only
    /// the raw-vector queries are meaningful when `dim != QUERY_DIM`.
    pub fn with_dim(points: Vec<f64>, dim: usize, stats: QueryStats, bandwidth: f64, k: usize) -> Result<Self> {
        if dim == 0 || !points.len().is_multiple_of(dim) {
            return Err(invalid("point buffer is not a whole number of vectors"));
        }
        let n = points.len() / dim;
        if k == 0 || k > n {
            return Err(invalid(format!("need 1 <= k <= N, got k = {k}, N = {n}")));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(invalid("bandwidth must be positive"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(invalid("reference points must be finite"));
        }
        Ok(Self { stats, bandwidth, k, tau: None, tree: VpTree::build(points, dim) })
    }

    pub fn n_points(&self) -> usize {
        self.tree.len()
    }

    pub fn dim(&self) -> usize {
        self.tree.dim()
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.tau = Some(tau);
    }

    pub fn log_density_vector(&self, q: &[f64]) -> Result<f64> {
        if q.len() != self.dim() {
            return Err(invalid(format!("query must have {} entries", self.dim())));
        }
        let nn = self.tree.knn(q, self.k);
        let d: Vec<f64> = nn.iter().map(|(d, _)| *d).collect();
        Ok(log_mean_kernel(&d, self.bandwidth))
    }

    pub fn log_density(&self, state: &StateWindow, action: PLevel) -> Result<f64> {
        self.log_density_vector(&self.stats.vector(state, action))
    }

    /// Parallel log-densities of row-major query vectors.
    pub fn log_density_batch(&self, queries: &[f64]) -> Result<Vec<f64>> {
        if !queries.len().is_multiple_of(self.dim()) {
            return Err(invalid("query buffer is not a whole number of vectors"));
        }
        queries.par_chunks(self.dim()).map(|q| self.log_density_vector(q)).collect()
    }

    fn tau_or_err(&self) -> Result<f64> {
        self.tau.ok_or_else(|| Error::State("density threshold has not been selected".into()))
    }

    pub fn regularizer(&self, state: &StateWindow, action: PLevel) -> Result<Regularizer> {
        let tau = self.tau_or_err()?;
        Ok(Regularizer::from_u(tau - self.log_density(state, action)?))
    }

    /// Regularizer from a log-density computed elsewhere.
    pub fn regularizer_from_log_density(&self, log_p: f64) -> Result<Regularizer> {
        Ok(Regularizer::from_u(self.tau_or_err()? - log_p))
    }

    /// Sets `tau` to the `pct` percentile of the validation log-densities.
    pub fn select_threshold(&mut self, validation: &[f64], pct: f64) -> Result<f64> {
        let logs = self.log_density_batch(validation)?;
        let tau = percentile(&logs, pct)?;
        self.tau = Some(tau);
        Ok(tau)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = DensityMeta {
            d: self.dim(),
            n: self.n_points(),
            k: self.k,
            h: self.bandwidth,
            tau: self.tau,
            stats: self.stats,
        };
        Container::new(MAGIC_GUARDIAN, &meta, self.tree.points().to_vec())
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: DensityMeta = c.manifest_as()?;
        if c.data.len() != meta.d * meta.n {
            return Err(Error::Format("guardian point count does not match its header".into()));
        }
        let mut m = Self::with_dim(c.data.clone(), meta.d, meta.stats, meta.h, meta.k)?;
        m.tau = meta.tau;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, MAGIC_GUARDIAN)?)
    }
}

/// Fits on a seeded 80% split, selects `tau` on the next 10%.
pub fn guardian_fit(dataset: &Dataset, cfg: &GuardianConfig) -> Result<(DensityModel, FitSummary)> {
    cfg.validate()?;
    if dataset.len() < cfg.k {
        return Err(invalid(format!("dataset has {} transitions, fewer than k = {}", dataset.len(), cfg.k)));
    }
    let n = dataset.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(cfg.split_seed));
    let n_train = (n * 8 / 10).max(cfg.k).min(n);
    let n_val = (n / 10).max(1).min(n - n_train.min(n - 1));
    let train: Vec<&crate::dataset::Record> = idx[..n_train].iter().map(|&i| &dataset.records[i]).collect();
    let val_idx: Vec<usize> = if n_train < n { idx[n_train..n_train + n_val.min(n - n_train)].to_vec() } else { idx[..n_val].to_vec() };
    let stats = QueryStats::from_records(train.iter().copied());
    let points: Vec<f64> = train.iter().flat_map(|r| stats.vector(&r.state, r.action)).collect();
    let mut model = DensityModel::from_vectors(points, stats, cfg.bandwidth, cfg.k)?;
    let val: Vec<f64> = val_idx
        .iter()
        .flat_map(|&i| {
            let r = &dataset.records[i];
            stats.vector(&r.state, r.action)
        })
        .collect();
    let tau = model.select_threshold(&val, cfg.percentile)?;
    let logs = model.log_density_batch(&val)?;
    let ood = logs.iter().filter(|l| tau - **l > 0.0).count() as f64 / logs.len() as f64;
    Ok((model, FitSummary { tau, n_reference: n_train, n_validation: logs.len(), validation_ood_fraction: ood }))
}
