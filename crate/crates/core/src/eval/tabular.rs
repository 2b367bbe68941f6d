//! Exactly solvable tabular MDPs for checking the conservative value bound
//! and the optimality gap of the density-penalized objective.
//!
//! Occupancies are unnormalized: `rho(s, a) = sum_t gamma^t P(s_t = s, a_t = a)`
//! sums to `1 / (1 - gamma)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{child_rng, Rng};

const PROB_TOL: f64 = 1e-12;

/// Finite MDP with true dynamics `t`, learned dynamics `t_hat` and a signed
/// regularizer table `u`. Transition tables are indexed `[(s * n_a + a) * n_s + s']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub t: Vec<f64>,
    pub t_hat: Vec<f64>,
    /// Reward `r(s, a)`, indexed `[s * n_a + a]`.
    pub r: Vec<f64>,
    pub r_max: f64,
    pub mu0: Vec<f64>,
    pub gamma: f64,
    /// Regularizer `u(s, a)`; positive where data is scarce.
    pub u: Vec<f64>,
    pub c_hat: f64,
    pub eps_approx: f64,
    pub lambda: f64,
}

/// Which model to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    /// `T` with reward `r`.
    True,
    /// `T_hat` with reward `r`.
    Learned,
    /// `T_hat` with reward `r - lambda * u`.
    Penalized,
}

/// Per-state action distributions, `n_states x n_actions`.
pub type TabularPolicy = DMatrix<f64>;

#[derive(Debug, Clone)]
pub struct Solution {
    pub eta: f64,
    pub values: DVector<f64>,
    /// Unnormalized discounted occupancy, `n_states x n_actions`.
    pub occupancy: DMatrix<f64>,
}

fn is_distribution(p: &[f64]) -> bool {
    p.iter().all(|v| *v >= 0.0 && v.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-9
}

/// Total variation distance `0.5 * ||p - q||_1`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

impl TabularMdp {
    pub fn row<'a>(&self, table: &'a [f64], s: usize, a: usize) -> &'a [f64] {
        let k = (s * self.n_actions + a) * self.n_states;
        &table[k..k + self.n_states]
    }

    /// Bound on `|V|` under any policy.
    pub fn c(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(invalid("tabular MDP needs at least one state and one action"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("gamma must lie in (0, 1)"));
        }
        if self.t.len() != ns * na * ns || self.t_hat.len() != ns * na * ns {
            return Err(invalid("transition table has the wrong size"));
        }
        if self.r.len() != ns * na || self.u.len() != ns * na || self.mu0.len() != ns {
            return Err(invalid("reward, regularizer or initial distribution has the wrong size"));
        }
        if !is_distribution(&self.mu0) {
            return Err(invalid("mu0 is not a probability vector"));
        }
        for s in 0..ns {
            for a in 0..na {
                if !is_distribution(self.row(&self.t, s, a)) || !is_distribution(self.row(&self.t_hat, s, a)) {
                    return Err(invalid(format!("transition row ({s}, {a}) is not a probability vector")));
                }
            }
        }
        if self.r.iter().any(|r| !(r.abs() <= self.r_max)) {
            return Err(invalid("reward exceeds r_max"));
        }
        if self.u.iter().any(|u| !u.is_finite()) || !(self.lambda >= 0.0) {
            return Err(invalid("regularizer and lambda must be finite, lambda non-negative"));
        }
        Ok(())
    }

    /// `d_F(T_hat(s, a), T(s, a))` for `F = {||f||_inf <= 1}`, i.e. twice the
    /// total variation distance.
    pub fn model_error(&self, s: usize, a: usize) -> f64 {
        2.0 * total_variation(self.row(&self.t_hat, s, a), self.row(&self.t, s, a))
    }

    /// Checks `d_F <= C * u_+ + eps` at every pair.
    pub fn check_model_error(&self) -> Result<()> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let k = s * self.n_actions + a;
                let bound = self.c_hat * self.u[k].max(0.0) + self.eps_approx;
                if self.model_error(s, a) > bound + 1e-12 {
                    return Err(Error::Construction(format!(
                        "model error {} exceeds {} at ({s}, {a})",
                        self.model_error(s, a),
                        bound
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn u_minus_sup(&self) -> f64 {
        self.u.iter().map(|u| (-u).max(0.0)).fold(0.0, f64::max)
    }

    /// Every deterministic policy, as one-hot matrices.
    pub fn deterministic_policies(&self) -> Vec<TabularPolicy> {
        let total = (self.n_actions as u64).checked_pow(self.n_states as u32).expect("enumerable instance");
        (0..total)
            .map(|mut code| {
                let mut p = DMatrix::zeros(self.n_states, self.n_actions);
                for s in 0..self.n_states {
                    p[(s, (code % self.n_actions as u64) as usize)] = 1.0;
                    code /= self.n_actions as u64;
                }
                p
            })
            .collect()
    }
}

/// Samples a point on the simplex (normalized exponentials).
fn simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Random stochastic policy.
pub fn random_policy(n_states: usize, n_actions: usize, rng: &mut Rng) -> TabularPolicy {
    let mut p = DMatrix::zeros(n_states, n_actions);
    for s in 0..n_states {
        for (a, v) in simplex(n_actions, rng).into_iter().enumerate() {
            p[(s, a)] = v;
        }
    }
    p
}

/// Moves probability mass `d` of `p` onto `target`, shrinking the other
/// entries proportionally. Returns the realized total variation.
fn shift_mass(p: &[f64], target: usize, d: f64) -> (Vec<f64>, f64) {
    let rest = 1.0 - p[target];
    let d = d.min(rest).max(0.0);
    if rest <= 0.0 || d == 0.0 {
        return (p.to_vec(), 0.0);
    }
    let keep = 1.0 - d / rest;
    let mut q: Vec<f64> = p.iter().map(|v| v * keep).collect();
    q[target] = p[target] + d;
    (q, d)
}

/// Knobs of [`random_instance`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: (f64, f64),
    pub r_max: f64,
    /// `u` is drawn uniformly from `[-u_minus_max, u_plus_max]`.
    pub u_minus_max: f64,
    pub u_plus_max: f64,
    pub c_hat: (f64, f64),
    pub eps: (f64, f64),
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            n_states: 6,
            n_actions: 3,
            gamma: (0.8, 0.95),
            r_max: 1.0,
            u_minus_max: 0.5,
            u_plus_max: 1.0,
            c_hat: (0.05, 0.6),
            eps: (0.0, 0.05),
        }
    }
}

/// Random instance satisfying the density-dependent model-error assumption
/// by construction.
///
/// `T_hat(s, a)` is `T(s, a)` with mass moved onto a random next state so
/// that `d_F = 2 TV` equals `min(2, C u_+ + eps)` whenever that much mass can
/// move, and is smaller otherwise. `lambda = gamma * c * C`.
pub fn random_instance(cfg: &InstanceConfig, seed: u64) -> Result<TabularMdp> {
    let mut rng = child_rng(seed, 0x7AB);
    let (ns, na) = (cfg.n_states, cfg.n_actions);
    let gamma = rng.random_range(cfg.gamma.0..=cfg.gamma.1);
    let c_hat = rng.random_range(cfg.c_hat.0..=cfg.c_hat.1);
    let eps = rng.random_range(cfg.eps.0..=cfg.eps.1);
    let mut t = Vec::with_capacity(ns * na * ns);
    let mut t_hat = Vec::with_capacity(ns * na * ns);
    let mut u = Vec::with_capacity(ns * na);
    let mut r = Vec::with_capacity(ns * na);
    for _ in 0..ns * na {
        let row = simplex(ns, &mut rng);
        let uk = rng.random_range(-cfg.u_minus_max..=cfg.u_plus_max);
        let target_tv = ((c_hat * uk.max(0.0) + eps) / 2.0).min(1.0);
        let (hat, _) = shift_mass(&row, rng.random_range(0..ns), target_tv);
        t.extend(row);
        t_hat.extend(hat);
        u.push(uk);
        r.push(rng.random_range(-cfg.r_max..=cfg.r_max));
    }
    let mdp = TabularMdp {
        n_states: ns,
        n_actions: na,
        t,
        t_hat,
        r,
        r_max: cfg.r_max,
        mu0: simplex(ns, &mut rng),
        gamma,
        u,
        c_hat,
        eps_approx: eps,
        lambda: gamma * (cfg.r_max / (1.0 - gamma)) * c_hat,
    };
    mdp.validate()?;
    mdp.check_model_error()?;
    Ok(mdp)
}

/// Exact policy evaluation by a linear solve; also returns the occupancy.
pub fn exact_return(mdp: &TabularMdp, policy: &TabularPolicy, dynamics: Dynamics) -> Result<Solution> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    if policy.nrows() != ns || policy.ncols() != na {
        return Err(invalid("policy shape does not match the MDP"));
    }
    for s in 0..ns {
        let row: Vec<f64> = policy.row(s).iter().copied().collect();
        if !is_distribution(&row) {
            return Err(invalid(format!("policy row {s} is not a distribution")));
        }
    }
    let table = match dynamics {
        Dynamics::True => &mdp.t,
        Dynamics::Learned | Dynamics::Penalized => &mdp.t_hat,
    };
    let reward = |k: usize| match dynamics {
        Dynamics::Penalized => mdp.r[k] - mdp.lambda * mdp.u[k],
        _ => mdp.r[k],
    };
    let mut p = DMatrix::<f64>::zeros(ns, ns);
    let mut r_pi = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            let w = policy[(s, a)];
            if w == 0.0 {
                continue;
            }
            r_pi[s] += w * reward(s * na + a);
            for (s2, q) in mdp.row(table, s, a).iter().enumerate() {
                p[(s, s2)] += w * q;
            }
        }
    }
    let m = DMatrix::<f64>::identity(ns, ns) - p * mdp.gamma;
    let lu = m.clone().lu();
    let values = lu.solve(&r_pi).ok_or_else(|| Error::Internal("singular policy evaluation system".into()))?;
    let mu0 = DVector::from_column_slice(&mdp.mu0);
    let d = m
        .transpose()
        .lu()
        .solve(&mu0)
        .ok_or_else(|| Error::Internal("singular occupancy system".into()))?;
    let occupancy = DMatrix::from_fn(ns, na, |s, a| d[s] * policy[(s, a)]);
    Ok(Solution { eta: mu0.dot(&values), values, occupancy })
}

/// `G(s, a) = E_{T_hat}[V_M] - E_T[V_M]` with `V_M` the true-model values.
pub fn value_gap(mdp: &TabularMdp, values_true: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(mdp.n_states, mdp.n_actions, |s, a| {
        let e = |table: &[f64]| mdp.row(table, s, a).iter().zip(values_true.iter()).map(|(p, v)| p * v).sum::<f64>();
        e(&mdp.t_hat) - e(&mdp.t)
    })
}

fn occ_mean(occ: &DMatrix<f64>, f: impl Fn(usize) -> f64, na: usize) -> f64 {
    let mut acc = 0.0;
    for s in 0..occ.nrows() {
        for a in 0..na {
            acc += occ[(s, a)] * f(s * na + a);
        }
    }
    acc
}

/// Outcome of the conservative-value-bound check for one policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Check {
    pub eta_true: f64,
    pub eta_penalized: f64,
    pub beta: f64,
    /// `eta_true - (eta_penalized - (gamma c eps + beta) / (1 - gamma))`.
    pub slack: f64,
    /// `|(eta_learned - eta_true) - gamma E_rho[G]|`.
    pub telescoping_error: f64,
}

/// `beta = lambda * E[|u_-|]` under the normalized occupancy `(1 - gamma) rho`.
pub fn check_theorem1(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Theorem1Check> {
    let na = mdp.n_actions;
    let truth = exact_return(mdp, policy, Dynamics::True)?;
    let learned = exact_return(mdp, policy, Dynamics::Learned)?;
    let pen = exact_return(mdp, policy, Dynamics::Penalized)?;
    let g = value_gap(mdp, &truth.values);
    let tele = mdp.gamma * occ_mean(&learned.occupancy, |k| g[(k / na, k % na)], na);
    let telescoping_error = ((learned.eta - truth.eta) - tele).abs();
    let beta = mdp.lambda * (1.0 - mdp.gamma) * occ_mean(&learned.occupancy, |k| (-mdp.u[k]).max(0.0), na);
    let bound = pen.eta - (mdp.gamma * mdp.c() * mdp.eps_approx + beta) / (1.0 - mdp.gamma);
    Ok(Theorem1Check { eta_true: truth.eta, eta_penalized: pen.eta, beta, slack: truth.eta - bound, telescoping_error })
}

/// Outcome of the optimality-gap check at one density budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Check {
    pub delta: f64,
    pub delta_min: f64,
    pub n_feasible: usize,
    pub eta_hat: f64,
    pub best_feasible: f64,
    /// Slack of `eta(pi_hat) >= best - 2 lambda delta - gamma c eps / (1 - gamma)
    /// - lambda ||u_-|| / (1 - gamma)`.
    pub slack: f64,
    /// Slack of the same inequality with the model-error term counted twice,
    /// which is what chaining the two one-sided bounds gives.
    pub slack_two_sided: f64,
}

/// Optimality gap of `pi_hat = argmax eta_penalized` over deterministic
/// policies, checked at each `delta` against the deterministic policies
/// plus `extra` (e.g. random stochastic ones). `E[u_+] <= delta` uses the
/// unnormalized occupancy under `T_hat`.
pub fn check_theorem2(mdp: &TabularMdp, deltas: &[f64], extra: &[TabularPolicy]) -> Result<Vec<Theorem2Check>> {
    let na = mdp.n_actions;
    let det = mdp.deterministic_policies();
    let mut best_pen = f64::NEG_INFINITY;
    let mut pi_hat = 0;
    let mut rows = Vec::with_capacity(det.len() + extra.len());
    for (i, pi) in det.iter().chain(extra).enumerate() {
        let truth = exact_return(mdp, pi, Dynamics::True)?;
        let learned = exact_return(mdp, pi, Dynamics::Learned)?;
        let pen = exact_return(mdp, pi, Dynamics::Penalized)?;
        let u_plus = occ_mean(&learned.occupancy, |k| mdp.u[k].max(0.0), na);
        if i < det.len() && pen.eta > best_pen + PROB_TOL {
            best_pen = pen.eta;
            pi_hat = i;
        }
        rows.push((truth.eta, u_plus));
    }
    let delta_min = rows[..det.len()].iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let eta_hat = rows[pi_hat].0;
    let eps_term = mdp.gamma * mdp.c() * mdp.eps_approx / (1.0 - mdp.gamma);
    let bonus_term = mdp.lambda * mdp.u_minus_sup() / (1.0 - mdp.gamma);
    deltas
        .iter()
        .map(|&delta| {
            if delta < delta_min - PROB_TOL {
                return Err(invalid(format!("delta {delta} is below delta_min {delta_min}")));
            }
            let feasible: Vec<f64> = rows.iter().filter(|r| r.1 <= delta + PROB_TOL).map(|r| r.0).collect();
            let best = feasible.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let rhs = best - 2.0 * mdp.lambda * delta - eps_term - bonus_term;
            Ok(Theorem2Check {
                delta,
                delta_min,
                n_feasible: feasible.len(),
                eta_hat,
                best_feasible: best,
                slack: eta_hat - rhs,
                slack_two_sided: eta_hat - (rhs - eps_term),
            })
        })
        .collect()
}

/// Three budgets: `delta_min`, the midpoint to the largest deterministic
/// budget, and the largest.
pub fn delta_grid(mdp: &TabularMdp) -> Result<Vec<f64>> {
    let na = mdp.n_actions;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for pi in mdp.deterministic_policies() {
        let learned = exact_return(mdp, &pi, Dynamics::Learned)?;
        let v = occ_mean(&learned.occupancy, |k| mdp.u[k].max(0.0), na);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(vec![lo, 0.5 * (lo + hi), hi])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Summary {
    pub instances: usize,
    pub construction_errors: usize,
    pub policies_checked: usize,
    pub violations: usize,
    pub telescoping_violations: usize,
    pub min_slack: f64,
    pub max_slack: f64,
    pub max_telescoping_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Summary {
    pub instances: usize,
    pub construction_errors: usize,
    pub checks: usize,
    pub violations: usize,
    pub violations_two_sided: usize,
    pub min_slack: f64,
    pub max_slack: f64,
}

/// JSON summary of a verification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub instances: usize,
    pub violations: usize,
    pub max_slack: f64,
    pub min_slack: f64,
    pub theorem1: Theorem1Summary,
    pub theorem2: Theorem2Summary,
}

pub const SLACK_TOL: f64 = 1e-9;
pub const TELESCOPING_TOL: f64 = 1e-10;

/// Checks the conservative value bound and the telescoping identity on
/// `instances`, each against `policies_per_instance` random stochastic
/// policies plus the uniform one.
pub fn verify_theorem1(instances: &[TabularMdp], policies_per_instance: usize, seed: u64) -> Result<Theorem1Summary> {
    let mut out = Theorem1Summary {
        instances: instances.len(),
        construction_errors: 0,
        policies_checked: 0,
        violations: 0,
        telescoping_violations: 0,
        min_slack: f64::INFINITY,
        max_slack: f64::NEG_INFINITY,
        max_telescoping_error: 0.0,
    };
    for (i, mdp) in instances.iter().enumerate() {
        if mdp.validate().and_then(|_| mdp.check_model_error()).is_err() {
            out.construction_errors += 1;
            continue;
        }
        let mut rng = child_rng(seed, i as u64);
        let uniform = DMatrix::from_element(mdp.n_states, mdp.n_actions, 1.0 / mdp.n_actions as f64);
        let mut policies = vec![uniform];
        policies.extend((0..policies_per_instance).map(|_| random_policy(mdp.n_states, mdp.n_actions, &mut rng)));
        for pi in &policies {
            let c = check_theorem1(mdp, pi)?;
            out.policies_checked += 1;
            out.violations += usize::from(c.slack < -SLACK_TOL);
            out.telescoping_violations += usize::from(c.telescoping_error > TELESCOPING_TOL);
            out.min_slack = out.min_slack.min(c.slack);
            out.max_slack = out.max_slack.max(c.slack);
            out.max_telescoping_error = out.max_telescoping_error.max(c.telescoping_error);
        }
    }
    Ok(out)
}

/// Checks the optimality gap on each instance at its [`delta_grid`].
pub fn verify_theorem2(instances: &[TabularMdp], extra_policies: usize, seed: u64) -> Result<Theorem2Summary> {
    let mut out = Theorem2Summary {
        instances: instances.len(),
        construction_errors: 0,
        checks: 0,
        violations: 0,
        violations_two_sided: 0,
        min_slack: f64::INFINITY,
        max_slack: f64::NEG_INFINITY,
    };
    for (i, mdp) in instances.iter().enumerate() {
        if mdp.validate().and_then(|_| mdp.check_model_error()).is_err() {
            out.construction_errors += 1;
            continue;
        }
        let mut rng = child_rng(seed, i as u64);
        let extra: Vec<TabularPolicy> =
            (0..extra_policies).map(|_| random_policy(mdp.n_states, mdp.n_actions, &mut rng)).collect();
        for c in check_theorem2(mdp, &delta_grid(mdp)?, &extra)? {
            out.checks += 1;
            out.violations += usize::from(c.slack < -SLACK_TOL);
            out.violations_two_sided += usize::from(c.slack_two_sided < -SLACK_TOL);
            out.min_slack = out.min_slack.min(c.slack);
            out.max_slack = out.max_slack.max(c.slack);
        }
    }
    Ok(out)
}

/// Full suite: `n` six-state instances for the value bound and `n / 2`
/// four-state instances for the optimality gap.
pub fn verify_bounds(n: usize, seed: u64) -> Result<BoundsReport> {
    let big = InstanceConfig::default();
    let small = InstanceConfig { n_states: 4, n_actions: 3, ..big };
    let mut construction_errors = (0, 0);
    let build = |cfg: &InstanceConfig, count: usize, stream: u64, errs: &mut usize| -> Vec<TabularMdp> {
        (0..count as u64)
            .filter_map(|i| match random_instance(cfg, crate::rng::derive_seed(seed ^ stream, i)) {
                Ok(m) => Some(m),
                Err(e) => {
                    log::warn!("skipping instance {i}: {e}");
                    *errs += 1;
                    None
                }
            })
            .collect()
    };
    let one = build(&big, n, 0x71, &mut construction_errors.0);
    let two = build(&small, n.div_ceil(2), 0x72, &mut construction_errors.1);
    let mut t1 = verify_theorem1(&one, 5, seed)?;
    t1.instances = n;
    t1.construction_errors += construction_errors.0;
    let mut t2 = verify_theorem2(&two, 5, seed)?;
    t2.instances = n.div_ceil(2);
    t2.construction_errors += construction_errors.1;
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    Ok(BoundsReport {
        instances: n,
        violations: t1.violations + t1.telescoping_violations + t2.violations,
        max_slack: finite(t1.max_slack.max(t2.max_slack)),
        min_slack: finite(t1.min_slack.min(t2.min_slack)),
        theorem1: t1,
        theorem2: t2,
    })
}
