//! Probabilistic dynamics ensemble: each member maps `(s, a)` to a
//! diagonal Gaussian over the next window's change, in z-units.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, MAGIC_ENSEMBLE};
use crate::dataset::normalize_action;
use crate::domain::{PLevel, WINDOW_LEN};
use crate::error::{invalid, Error, Result};
use crate::nn::graph::softplus;
use crate::nn::{Adam, Graph, Mlp, ParamStore, Tensor, Var};
use crate::rng::{child_rng, derive_seed, rng_from};
use crate::twin::split_indices;

use super::buffer::{ReplayBuffer, ZTransition};
use super::config::OrlConfig;

const IN_DIM: usize = WINDOW_LEN + 1;
const OUT_DIM: usize = 2 * WINDOW_LEN;

#[derive(Debug, Clone, PartialEq)]
struct Member {
    store: ParamStore,
    mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleLog {
    pub initial_holdout_mse: Vec<f64>,
    pub holdout_mse: Vec<f64>,
    pub epochs_trained: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsEnsemble {
    members: Vec<Member>,
    pub hidden: Vec<usize>,
    pub max_logvar: f64,
    pub min_logvar: f64,
    /// Indices of the members with the lowest holdout error, best first.
    pub elites: Vec<usize>,
    pub log: EnsembleLog,
}

/// Mean next window and per-entry standard deviation of one member.
#[derive(Debug, Clone)]
pub struct MemberPrediction {
    pub mean: Tensor,
    pub std: Tensor,
}

pub(crate) fn inputs(items: &[&ZTransition]) -> (Tensor, Tensor) {
    let n = items.len();
    let mut x = Tensor::zeros((n, IN_DIM));
    let mut y = Tensor::zeros((n, WINDOW_LEN));
    for (i, t) in items.iter().enumerate() {
        for j in 0..WINDOW_LEN {
            x[[i, j]] = t.s[j];
            y[[i, j]] = t.s2[j] - t.s[j];
        }
        x[[i, WINDOW_LEN]] = normalize_action(t.a);
    }
    (x, y)
}

pub(crate) fn query(s: &Tensor, actions: &[PLevel]) -> Tensor {
    let n = s.nrows();
    let mut x = Tensor::zeros((n, IN_DIM));
    x.slice_mut(ndarray::s![.., ..WINDOW_LEN]).assign(s);
    for (i, a) in actions.iter().enumerate() {
        x[[i, WINDOW_LEN]] = normalize_action(*a);
    }
    x
}

fn soft_clamp(v: f64, lo: f64, hi: f64) -> f64 {
    let v = hi - softplus(hi - v);
    lo + softplus(v - lo)
}

impl Member {
    fn new(hidden: &[usize], seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut sizes = vec![IN_DIM];
        sizes.extend(hidden);
        sizes.push(OUT_DIM);
        let mlp = Mlp::new(&mut store, "dyn", &sizes, &mut rng_from(seed));
        Self { store, mlp }
    }

    fn build(&self, g: &mut Graph, x: &Tensor, lo: f64, hi: f64) -> (Var, Var) {
        let xi = g.input(x.clone());
        let out = self.mlp.forward(g, &self.store, xi);
        let mean = g.slice_cols(out, 0, WINDOW_LEN);
        let raw = g.slice_cols(out, WINDOW_LEN, OUT_DIM);
        let shape = (x.nrows(), WINDOW_LEN);
        let c_hi = g.input(Tensor::from_elem(shape, hi));
        let c_lo = g.input(Tensor::from_elem(shape, lo));
        let t = g.sub(c_hi, raw);
        let t = g.softplus(t);
        let lv = g.sub(c_hi, t);
        let t = g.sub(lv, c_lo);
        let t = g.softplus(t);
        let lv = g.add(c_lo, t);
        (mean, lv)
    }

    fn predict(&self, x: &Tensor, lo: f64, hi: f64) -> (Tensor, Tensor) {
        let out = self.mlp.predict(&self.store, x);
        let mean = out.slice(ndarray::s![.., ..WINDOW_LEN]).to_owned();
        let lv = out.slice(ndarray::s![.., WINDOW_LEN..]).mapv(|v| soft_clamp(v, lo, hi));
        (mean, lv)
    }

    fn mse(&self, x: &Tensor, y: &Tensor, lo: f64, hi: f64) -> f64 {
        let (mean, _) = self.predict(x, lo, hi);
        (&mean - y).mapv(|d| d * d).mean().unwrap_or(f64::NAN)
    }

    /// Gaussian NLL (without the constant) of the holdout targets.
    fn nll(&self, x: &Tensor, y: &Tensor, lo: f64, hi: f64) -> f64 {
        let (mean, lv) = self.predict(x, lo, hi);
        ndarray::Zip::from(&mean)
            .and(y)
            .and(&lv)
            .fold(0.0, |acc, m, t, l| acc + (m - t) * (m - t) * (-l).exp() + l)
            / mean.len() as f64
    }
}

fn gaussian_nll(g: &mut Graph, mean: Var, logvar: Var, y: &Tensor) -> Var {
    let target = g.input(y.clone());
    let diff = g.sub(mean, target);
    let sq = g.mul(diff, diff);
    let neg = g.scale(logvar, -1.0);
    let inv_var = g.exp(neg);
    let weighted = g.mul(sq, inv_var);
    let total = g.add(weighted, logvar);
    g.mean(total)
}

/// Trains every member on its own bootstrap resample of the training split,
/// early-stopping on holdout NLL, and ranks them on the shared holdout
/// split by mean-prediction MSE.
pub fn train_dynamics_ensemble(buffer: &ReplayBuffer, cfg: &OrlConfig) -> Result<DynamicsEnsemble> {
    cfg.validate()?;
    if buffer.is_empty() {
        return Err(invalid("cannot train dynamics on an empty buffer"));
    }
    let all: Vec<&ZTransition> = buffer.iter().collect();
    let (train_idx, hold_idx) = split_indices(all.len(), cfg.holdout_ratio, derive_seed(cfg.seed, 0xD1));
    let hold: Vec<&ZTransition> = hold_idx.iter().map(|&i| all[i]).collect();
    let (hx, hy) = inputs(&hold);
    let (lo, hi) = (cfg.min_logvar, cfg.max_logvar);

    let trained: Vec<(Member, f64, f64, usize)> = (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|m| -> Result<(Member, f64, f64, usize)> {
            let seed = derive_seed(cfg.seed, 0xE0 + m as u64);
            let mut member = Member::new(&cfg.dynamics_hidden, seed);
            let mut rng = child_rng(seed, 1);
            let boot: Vec<&ZTransition> =
                (0..train_idx.len()).map(|_| all[train_idx[rng.random_range(0..train_idx.len())]]).collect();
            let initial = member.mse(&hx, &hy, lo, hi);
            let mut best = (member.nll(&hx, &hy, lo, hi), member.store.clone());
            let mut opt = Adam::new(&member.store, cfg.dynamics_lr);
            let mut order: Vec<usize> = (0..boot.len()).collect();
            let mut since = 0;
            let mut epochs = 0;
            for epoch in 0..cfg.dynamics_max_epochs {
                order.shuffle(&mut rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let items: Vec<&ZTransition> = chunk.iter().map(|&i| boot[i]).collect();
                    let (x, y) = inputs(&items);
                    let mut g = Graph::new();
                    let (mean, lv) = member.build(&mut g, &x, lo, hi);
                    let loss = gaussian_nll(&mut g, mean, lv, &y);
                    if !g.scalar(loss).is_finite() {
                        return Err(Error::TrainingFailure { epoch, reason: format!("dynamics member {m}: non-finite loss") });
                    }
                    g.backward(loss);
                    let grads = g.param_grads(&member.store);
                    opt.step(&mut member.store, &grads);
                }
                epochs = epoch + 1;
                let h = member.nll(&hx, &hy, lo, hi);
                if !h.is_finite() {
                    return Err(Error::TrainingFailure { epoch, reason: format!("dynamics member {m}: non-finite holdout") });
                }
                if h < best.0 {
                    best = (h, member.store.clone());
                    since = 0;
                } else {
                    since += 1;
                    if since >= cfg.dynamics_patience {
                        break;
                    }
                }
            }
            member.store = best.1;
            let mse = member.mse(&hx, &hy, lo, hi);
            Ok((member, initial, mse, epochs))
        })
        .collect::<Result<_>>()?;

    let mut log = EnsembleLog { initial_holdout_mse: vec![], holdout_mse: vec![], epochs_trained: vec![] };
    let mut members = Vec::with_capacity(trained.len());
    for (m, init, best, ep) in trained {
        members.push(m);
        log.initial_holdout_mse.push(init);
        log.holdout_mse.push(best);
        log.epochs_trained.push(ep);
    }
    let mut rank: Vec<usize> = (0..members.len()).collect();
    rank.sort_by(|&a, &b| log.holdout_mse[a].total_cmp(&log.holdout_mse[b]).then(a.cmp(&b)));
    rank.truncate(cfg.n_elites);
    Ok(DynamicsEnsemble {
        members,
        hidden: cfg.dynamics_hidden.clone(),
        max_logvar: hi,
        min_logvar: lo,
        elites: rank,
        log,
    })
}

#[derive(Serialize, Deserialize)]
struct EnsembleMeta {
    hidden: Vec<usize>,
    n_members: usize,
    max_logvar: f64,
    min_logvar: f64,
    elites: Vec<usize>,
    log: EnsembleLog,
    tensors: Vec<crate::nn::TensorSpec>,
}

impl DynamicsEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member_params(&self, i: usize) -> Vec<f64> {
        self.members[i].store.to_flat()
    }

    /// Predictions of every member for a batch of z-states.
    pub fn predict_all(&self, s: &Tensor, actions: &[PLevel]) -> Vec<MemberPrediction> {
        let x = query(s, actions);
        self.members
            .iter()
            .map(|m| {
                let (delta, lv) = m.predict(&x, self.min_logvar, self.max_logvar);
                MemberPrediction { mean: s + &delta, std: lv.mapv(|v| (0.5 * v).exp()) }
            })
            .collect()
    }

    /// Max over members of the L2 norm of the predicted standard deviation.
    pub fn mopo_penalty_batch(&self, preds: &[MemberPrediction]) -> Vec<f64> {
        let n = preds.first().map_or(0, |p| p.std.nrows());
        (0..n)
            .map(|i| {
                preds
                    .iter()
                    .map(|p| p.std.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    pub fn mopo_penalty(&self, s: &[f64; WINDOW_LEN], action: PLevel) -> f64 {
        let x = Tensor::from_shape_vec((1, WINDOW_LEN), s.to_vec()).expect("one row");
        self.mopo_penalty_batch(&self.predict_all(&x, &[action]))[0]
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut data = Vec::new();
        let mut tensors = Vec::new();
        for m in &self.members {
            data.extend(m.store.to_flat());
            tensors.extend(m.store.specs());
        }
        let meta = EnsembleMeta {
            hidden: self.hidden.clone(),
            n_members: self.members.len(),
            max_logvar: self.max_logvar,
            min_logvar: self.min_logvar,
            elites: self.elites.clone(),
            log: self.log.clone(),
            tensors,
        };
        Container::new(MAGIC_ENSEMBLE, &meta, data)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: EnsembleMeta = c.manifest_as()?;
        let mut members: Vec<Member> = (0..meta.n_members).map(|_| Member::new(&meta.hidden, 0)).collect();
        let per = members.first().map_or(0, |m| m.store.n_scalars());
        if c.data.len() != per * meta.n_members {
            return Err(Error::Format("ensemble parameter count mismatch".into()));
        }
        let expected: Vec<_> = members.iter().flat_map(|m| m.store.specs()).collect();
        if expected != meta.tensors {
            return Err(Error::Format("ensemble tensor manifest does not match".into()));
        }
        for (i, m) in members.iter_mut().enumerate() {
            m.store.load_flat(&c.data[i * per..(i + 1) * per])?;
        }
        if meta.elites.iter().any(|&e| e >= meta.n_members) || meta.elites.is_empty() {
            return Err(Error::Format("elite index out of range".into()));
        }
        Ok(Self {
            members,
            hidden: meta.hidden,
            max_logvar: meta.max_logvar,
            min_logvar: meta.min_logvar,
            elites: meta.elites,
            log: meta.log,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, MAGIC_ENSEMBLE)?)
    }

    #[cfg(test)]
    pub(crate) fn zeroed_for_test(n: usize, hidden: &[usize], logvar: f64) -> Self {
        let mut members: Vec<Member> = (0..n).map(|i| Member::new(hidden, i as u64)).collect();
        for m in &mut members {
            for t in m.store.iter_mut() {
                t.fill(0.0);
            }
        }
        Self {
            members,
            hidden: hidden.to_vec(),
            max_logvar: logvar + 1e-9,
            min_logvar: logvar - 1e-9,
            elites: (0..n).collect(),
            log: EnsembleLog { initial_holdout_mse: vec![], holdout_mse: vec![], epochs_trained: vec![] },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureStats;
    use crate::metrics::StabilityThresholds;
    use crate::nn::check_gradients;
    use crate::reward::RewardConfig;
    use crate::rl::buffer::build_shaped_buffer;
    use crate::synth::{inject_noise, GeneratorConfig, NoiseConfig, ScriptedExpert, SynthEnv};

    fn small_cfg() -> OrlConfig {
        OrlConfig { dynamics_hidden: vec![32, 32], dynamics_max_epochs: 30, ..OrlConfig::desk() }
    }

    #[test]
    fn trains_distinct_members_and_improves() {
        let ds = SynthEnv::new(GeneratorConfig { n_trajectories: 100, seed: 2, ..Default::default() })
            .generate_dataset(&ScriptedExpert)
            .unwrap();
        let stats = FeatureStats::from_dataset(&ds);
        let (buf, _) = build_shaped_buffer(&ds, &RewardConfig::default(), &StabilityThresholds::clinical(), &stats).unwrap();
        let ens = train_dynamics_ensemble(&buf, &small_cfg()).unwrap();
        assert_eq!(ens.len(), 7);
        assert_eq!(ens.elites.len(), 5);
        for i in 0..7 {
            assert!(ens.log.holdout_mse[i].is_finite());
            assert!(ens.log.holdout_mse[i] <= ens.log.initial_holdout_mse[i]);
            for j in 0..i {
                assert_ne!(ens.member_params(i), ens.member_params(j));
            }
        }
        let again = train_dynamics_ensemble(&buf, &small_cfg()).unwrap();
        assert_eq!(again, ens);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.cens");
        ens.save(&p).unwrap();
        assert_eq!(DynamicsEnsemble::load(&p).unwrap(), ens);

        // the penalty responds to aleatoric noise in the data
        let noisy = inject_noise(&ds, &NoiseConfig { sigma: 0.5, fraction: 1.0, seed: 3 }).unwrap();
        let (nbuf, _) = build_shaped_buffer(&noisy, &RewardConfig::default(), &StabilityThresholds::clinical(), &stats).unwrap();
        let nens = train_dynamics_ensemble(&nbuf, &small_cfg()).unwrap();
        let probe: Vec<&ZTransition> = buf.iter().take(200).collect();
        let mean_pen = |e: &DynamicsEnsemble| {
            probe.iter().map(|t| e.mopo_penalty(&t.s, t.a)).sum::<f64>() / probe.len() as f64
        };
        assert!(mean_pen(&nens) > mean_pen(&ens));
    }

    #[test]
    fn zero_variance_identical_members_have_no_penalty() {
        let e = DynamicsEnsemble::zeroed_for_test(3, &[4], -60.0);
        let p = e.mopo_penalty(&[0.3; WINDOW_LEN], PLevel::MIN);
        assert!((0.0..1e-10).contains(&p));
    }

    #[test]
    fn nll_gradients() {
        let m = Member::new(&[5], 3);
        let mut rng = rng_from(9);
        let x = Tensor::from_shape_simple_fn((4, IN_DIM), || rng.random_range(-1.0..1.0));
        let y = Tensor::from_shape_simple_fn((4, WINDOW_LEN), || rng.random_range(-1.0..1.0));
        let loss_of = |store: &ParamStore| {
            let mm = Member { store: store.clone(), mlp: m.mlp.clone() };
            let mut g = Graph::new();
            let (mean, lv) = mm.build(&mut g, &x, -3.0, 0.5);
            let l = gaussian_nll(&mut g, mean, lv, &y);
            (g, l)
        };
        let (mut g, l) = loss_of(&m.store);
        g.backward(l);
        let grads = g.param_grads(&m.store);
        let report = check_gradients(&m.store, &grads, |s| { let (g, l) = loss_of(s); g.scalar(l) }, 1e-6, 7);
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
