//! Parametric stochastic patient generator.
//!
//! A hidden recovery level in `[0, 1]` drifts upward hour by hour. Pump
//! support raises MAP and lowers HR and pulsatility, so weaning early (low
//! recovery, low P-level) drops MAP below the clinical floor while weaning
//! a recovered patient is safe.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, FeatureStats, Record};
use crate::domain::{Feature, PLevel, StateWindow, N_FEATURES, WINDOW_STEPS};
use crate::error::{invalid, Result};
use crate::metrics::{is_stable, StabilityThresholds};
use crate::policy::Policy;
use crate::reward::physiological_reward;
use crate::rng::{child_rng, rng_from, Rng};

/// AR(1) coefficient of the slowly varying ventricular features.
const AR_COEF: f64 = 0.7;

/// Per-feature observation noise standard deviations.
pub const DEFAULT_NOISE_SCALE: [f64; N_FEATURES] = [
    0.5,  // MAP
    50.0, // pump speed
    5.0,  // motor current
    0.05, // pump flow
    0.5,  // LVP
    0.3,  // LVEDP
    0.5,  // HR
    0.5,  // SBP
    0.5,  // DBP
    0.4,  // pulsatility
    0.5,  // tau
    0.02, // ESE
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_trajectories: usize,
    pub horizon: usize,
    pub noise_scale: [f64; N_FEATURES],
    /// Mean hourly recovery gain.
    pub recovery_drift: f64,
    /// Standard deviation of the hourly recovery gain.
    pub recovery_volatility: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_trajectories: 5000,
            horizon: 6,
            noise_scale: DEFAULT_NOISE_SCALE,
            recovery_drift: 0.02,
            recovery_volatility: 0.015,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trajectories == 0 {
            return Err(invalid("n_trajectories must be positive"));
        }
        if self.horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if self.noise_scale.iter().any(|s| !(*s >= 0.0)) {
            return Err(invalid("noise scales must be non-negative"));
        }
        Ok(())
    }
}

/// Hidden patient condition plus its private random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientLatent {
    pub recovery: f64,
    pub rng: Rng,
}

/// Starting point of an episode.
#[derive(Debug, Clone)]
pub struct InitialCondition {
    pub latent: PatientLatent,
    pub window: StateWindow,
    pub plevel: PLevel,
}

#[derive(Debug, Clone, Default)]
pub struct SynthEnv {
    pub cfg: GeneratorConfig,
}

struct Setpoints {
    lvp: f64,
    lvedp: f64,
    tau: f64,
    ese: f64,
}

fn setpoints(recovery: f64, p: f64) -> Setpoints {
    Setpoints {
        lvp: 20.0 + 50.0 * recovery,
        lvedp: 24.0 - 12.0 * recovery - 0.5 * (p - 2.0),
        tau: 65.0 - 25.0 * recovery,
        ese: 0.6 + 1.6 * recovery,
    }
}

impl SynthEnv {
    pub fn new(cfg: GeneratorConfig) -> Self {
        Self { cfg }
    }

    fn noise(&self, rng: &mut Rng, f: Feature) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        z * self.cfg.noise_scale[f.index()]
    }

    /// Six ten-minute rows at a fixed recovery and support level. The
    /// ventricular features start from `carry` (last row of the previous hour).
    fn observe(&self, recovery: f64, plevel: PLevel, carry: Option<[f64; 4]>, rng: &mut Rng) -> StateWindow {
        let p = plevel.as_f64();
        let sp = setpoints(recovery, p);
        let [mut lvp, mut lvedp, mut tau, mut ese] = carry.unwrap_or([sp.lvp, sp.lvedp, sp.tau, sp.ese]);
        let mut rows = [[0.0; N_FEATURES]; WINDOW_STEPS];
        for row in rows.iter_mut() {
            let map = 52.0 + 28.0 * recovery + 1.5 * (p - 2.0) + self.noise(rng, Feature::Map);
            let hr = 98.0 - 28.0 * recovery - 0.6 * (p - 2.0) + self.noise(rng, Feature::Hr);
            let pulsat = (6.0 + 32.0 * recovery - 1.4 * (p - 2.0) + self.noise(rng, Feature::Pulsatility)).max(0.0);
            lvp = sp.lvp + AR_COEF * (lvp - sp.lvp) + self.noise(rng, Feature::Lvp);
            lvedp = sp.lvedp + AR_COEF * (lvedp - sp.lvedp) + self.noise(rng, Feature::Lvedp);
            tau = sp.tau + AR_COEF * (tau - sp.tau) + self.noise(rng, Feature::TauLv);
            ese = sp.ese + AR_COEF * (ese - sp.ese) + self.noise(rng, Feature::EseLv);

            row[Feature::Map.index()] = map;
            row[Feature::PumpSpeed.index()] = 21000.0 + 3000.0 * (p - 2.0) + self.noise(rng, Feature::PumpSpeed);
            row[Feature::MotorCurrent.index()] = 350.0 + 60.0 * (p - 2.0) + self.noise(rng, Feature::MotorCurrent);
            row[Feature::PumpFlow.index()] = 1.0 + 0.45 * (p - 2.0) + self.noise(rng, Feature::PumpFlow);
            row[Feature::Lvp.index()] = lvp;
            row[Feature::Lvedp.index()] = lvedp;
            row[Feature::Hr.index()] = hr;
            row[Feature::Sbp.index()] = map + pulsat / 2.0 + self.noise(rng, Feature::Sbp);
            row[Feature::Dbp.index()] = map - pulsat / 2.0 + self.noise(rng, Feature::Dbp);
            row[Feature::Pulsatility.index()] = pulsat;
            row[Feature::TauLv.index()] = tau;
            row[Feature::EseLv.index()] = ese;
        }
        StateWindow::new(rows).expect("generator produces finite values")
    }

    /// Samples a patient with recovery in `[0.1, 0.9]` under a level from P4..P9.
    pub fn init_patient(&self, seed: u64) -> InitialCondition {
        let mut rng = rng_from(seed);
        let recovery = rng.random_range(0.1..0.9);
        let plevel = PLevel::new(rng.random_range(4..=9)).expect("range is valid");
        let window = self.observe(recovery, plevel, None, &mut rng);
        InitialCondition { latent: PatientLatent { recovery, rng }, window, plevel }
    }

    /// Advances one hour under `action` and returns the new window.
    pub fn env_step(&self, latent: &mut PatientLatent, state: &StateWindow, action: PLevel) -> StateWindow {
        let xi: f64 = StandardNormal.sample(&mut latent.rng);
        latent.recovery =
            (latent.recovery + self.cfg.recovery_drift + self.cfg.recovery_volatility * xi).clamp(0.0, 1.0);
        let last = state.rows()[WINDOW_STEPS - 1];
        let carry = [
            last[Feature::Lvp.index()],
            last[Feature::Lvedp.index()],
            last[Feature::TauLv.index()],
            last[Feature::EseLv.index()],
        ];
        let recovery = latent.recovery;
        self.observe(recovery, action, Some(carry), &mut latent.rng)
    }

    /// Rolls `n_trajectories` fixed-horizon episodes under `policy`.
    /// Rewards are raw physiological rewards of the next window.
    pub fn generate_dataset(&self, policy: &dyn Policy) -> Result<Dataset> {
        self.cfg.validate()?;
        let episodes: Vec<Vec<Record>> = (0..self.cfg.n_trajectories as u64)
            .into_par_iter()
            .map(|idx| self.rollout_episode(idx, policy))
            .collect();
        Ok(Dataset::new(episodes.into_iter().flatten().collect()))
    }

    fn rollout_episode(&self, idx: u64, policy: &dyn Policy) -> Vec<Record> {
        let ic = self.init_patient(crate::rng::derive_seed(self.cfg.seed, idx));
        let mut policy_rng = child_rng(self.cfg.seed ^ 0xA5A5_5A5A, idx);
        let mut latent = ic.latent;
        let mut state = ic.window;
        let mut current = ic.plevel;
        let mut out = Vec::with_capacity(self.cfg.horizon);
        for t in 0..self.cfg.horizon {
            let action = policy.act(&state, current, &mut policy_rng);
            let next_state = self.env_step(&mut latent, &state, action);
            out.push(Record {
                state,
                action,
                reward: physiological_reward(&next_state),
                next_state,
                done: t + 1 == self.cfg.horizon,
                traj_id: idx,
                t: t as u32,
            });
            state = next_state;
            current = action;
        }
        out
    }
}

/// Rule-based clinician: wean by one level when stable with pulsatility
/// above 15, escalate by one when unstable, otherwise hold.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedExpert;

impl ScriptedExpert {
    pub fn decide(state: &StateWindow, current: PLevel) -> PLevel {
        let stable = is_stable(state, &StabilityThresholds::clinical());
        if stable && state.min_of(Feature::Pulsatility) > 15.0 {
            current.saturating_add(-1)
        } else if !stable {
            current.saturating_add(1)
        } else {
            current
        }
    }
}

impl Policy for ScriptedExpert {
    fn act(&self, state: &StateWindow, current: PLevel, _: &mut Rng) -> PLevel {
        Self::decide(state, current)
    }
}

/// Gaussian perturbation of a fraction of next-state windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Standard deviation in z-normalized feature units.
    pub sigma: f64,
    pub fraction: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma: 0.2, fraction: 0.8, seed: 0 }
    }
}

/// Returns a copy with `floor(fraction * N)` next-states perturbed.
///
/// Noise is added in z-normalized units (statistics of the input dataset)
/// and mapped back; rewards of perturbed transitions are recomputed from
/// the perturbed window.
pub fn inject_noise(dataset: &Dataset, cfg: &NoiseConfig) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&cfg.fraction) {
        return Err(invalid("noise fraction must lie in [0, 1]"));
    }
    if !(cfg.sigma >= 0.0) {
        return Err(invalid("noise sigma must be non-negative"));
    }
    let mut out = dataset.clone();
    let n = dataset.len();
    let count = (cfg.fraction * n as f64).floor() as usize;
    if count == 0 || cfg.sigma == 0.0 {
        return Ok(out);
    }
    let stats = FeatureStats::from_dataset(dataset);
    let mut rng = rng_from(cfg.seed);
    let mut chosen = sample(&mut rng, n, count).into_vec();
    chosen.sort_unstable();
    for idx in chosen {
        let rec = &mut out.records[idx];
        let mut z = stats.normalize(&rec.next_state);
        for v in z.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += cfg.sigma * e;
        }
        rec.next_state = stats.denormalize(&z)?;
        rec.reward = physiological_reward(&rec.next_state);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ConstantPolicy;

    fn env() -> SynthEnv {
        SynthEnv::default()
    }

    fn latent(recovery: f64, seed: u64) -> PatientLatent {
        PatientLatent { recovery, rng: rng_from(seed) }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let e = env();
        let a = e.init_patient(11);
        let b = e.init_patient(11);
        assert_eq!(a.window, b.window);
        assert_eq!(a.latent, b.latent);
        let mut sum = 0.0;
        for s in 0..1000 {
            let ic = e.init_patient(s);
            assert!((0.1..=0.9).contains(&ic.latent.recovery));
            assert!((4..=9).contains(&ic.plevel.level()));
            sum += ic.latent.recovery;
        }
        let mean = sum / 1000.0;
        assert!((0.45..=0.55).contains(&mean), "mean recovery {mean}");
    }

    #[test]
    fn recovered_patient_at_minimum_support() {
        let e = env();
        let start = e.init_patient(0).window;
        let p2 = PLevel::MIN;
        let mut total = 0.0;
        for s in 0..1000 {
            let mut l = latent(1.0, s);
            total += e.env_step(&mut l, &start, p2).min_of(Feature::Map);
        }
        let mean_min = total / 1000.0;
        assert!((mean_min - 80.0).abs() <= 1.0, "mean min MAP {mean_min}");

        let mut total = 0.0;
        for s in 0..1000 {
            // volatility can only push recovery up from the clamp at zero
            let mut l = latent(0.0, s);
            l.recovery = 0.0;
            let w = e.observe(0.0, p2, None, &mut l.rng);
            total += w.mean_of(Feature::Map);
        }
        assert!((total / 1000.0 - 52.0).abs() < 0.5);
    }

    #[test]
    fn zero_noise_step_is_deterministic() {
        let e = SynthEnv::new(GeneratorConfig {
            noise_scale: [0.0; N_FEATURES],
            recovery_volatility: 0.0,
            ..Default::default()
        });
        let start = e.init_patient(3).window;
        let a = e.env_step(&mut latent(0.4, 1), &start, PLevel::MAX);
        let b = e.env_step(&mut latent(0.4, 2), &start, PLevel::MAX);
        assert_eq!(a, b);
    }

    #[test]
    fn support_raises_expected_map() {
        let e = env();
        let start = e.init_patient(5).window;
        let mut prev = f64::NEG_INFINITY;
        for p in PLevel::all() {
            let mut total = 0.0;
            for s in 0..200 {
                total += e.env_step(&mut latent(0.5, s), &start, p).mean_of(Feature::Map);
            }
            let m = total / 200.0;
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn weaning_is_learnable() {
        let e = env();
        let start = e.init_patient(9).window;
        let thr = StabilityThresholds::clinical();
        let n = 10_000u64;
        let rate = |recovery: f64| {
            (0..n)
                .filter(|s| is_stable(&e.env_step(&mut latent(recovery, *s), &start, PLevel::MIN), &thr))
                .count() as f64
                / n as f64
        };
        assert!(rate(0.8) > 0.9);
        assert!(rate(0.2) < 0.1);
    }

    #[test]
    fn expert_rule() {
        let mut rows = [[0.0; 12]; 6];
        for row in rows.iter_mut() {
            row[Feature::Map.index()] = 80.0;
            row[Feature::Hr.index()] = 75.0;
            row[Feature::Pulsatility.index()] = 25.0;
        }
        let stable = StateWindow::new(rows).unwrap();
        let p = |l| PLevel::new(l).unwrap();
        assert_eq!(ScriptedExpert::decide(&stable, p(5)), p(4));
        assert_eq!(ScriptedExpert::decide(&stable, p(2)), p(2));
        for row in rows.iter_mut() {
            row[Feature::Map.index()] = 50.0;
        }
        let unstable = StateWindow::new(rows).unwrap();
        assert_eq!(ScriptedExpert::decide(&unstable, p(5)), p(6));
        assert_eq!(ScriptedExpert::decide(&unstable, p(9)), p(9));
    }

    #[test]
    fn dataset_counts_and_reproducibility() {
        let cfg = GeneratorConfig { n_trajectories: 10, seed: 7, ..Default::default() };
        let e = SynthEnv::new(cfg);
        let a = e.generate_dataset(&ScriptedExpert).unwrap();
        let b = e.generate_dataset(&ScriptedExpert).unwrap();
        assert_eq!(a.len(), 60);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.records.iter().all(|r| r.done == (r.t == 5)));
        assert!(a.records.iter().all(|r| r.reward == physiological_reward(&r.next_state)));
    }

    #[test]
    fn expert_weans_stable_episodes() {
        let e = SynthEnv::new(GeneratorConfig { n_trajectories: 400, seed: 1, ..Default::default() });
        let ds = e.generate_dataset(&ScriptedExpert).unwrap();
        let thr = StabilityThresholds::clinical();
        let mut sums = [0.0; 6];
        let mut count = 0.0;
        for ep in ds.episodes().unwrap() {
            if ep.records.iter().all(|r| is_stable(&r.state, &thr)) {
                for (t, r) in ep.records.iter().enumerate() {
                    sums[t] += r.action.as_f64();
                }
                count += 1.0;
            }
        }
        assert!(count > 10.0);
        let means: Vec<f64> = sums.iter().map(|s| s / count).collect();
        assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    }

    #[test]
    fn generated_values_are_valid() {
        let e = SynthEnv::new(GeneratorConfig { n_trajectories: 50, seed: 2, ..Default::default() });
        for policy in [&ScriptedExpert as &dyn Policy, &ConstantPolicy(PLevel::MIN), &ConstantPolicy(PLevel::MAX)] {
            let ds = e.generate_dataset(policy).unwrap();
            assert!(ds.records.iter().all(|r| r.next_state.to_flat().iter().all(|v| v.is_finite())));
        }
    }

    #[test]
    fn noise_injection() {
        let e = SynthEnv::new(GeneratorConfig { n_trajectories: 200, seed: 3, ..Default::default() });
        let ds = e.generate_dataset(&ScriptedExpert).unwrap();
        assert_eq!(inject_noise(&ds, &NoiseConfig { fraction: 0.0, ..Default::default() }).unwrap(), ds);
        assert_eq!(inject_noise(&ds, &NoiseConfig { fraction: 1.0, sigma: 0.0, seed: 1 }).unwrap(), ds);
        let noisy = inject_noise(&ds, &NoiseConfig { fraction: 0.8, sigma: 0.2, seed: 1 }).unwrap();
        let changed = ds.records.iter().zip(&noisy.records).filter(|(a, b)| a.next_state != b.next_state).count();
        assert_eq!(changed, (0.8 * ds.len() as f64).floor() as usize);
        assert!(ds.records.iter().zip(&noisy.records).all(|(a, b)| a.state == b.state));
        assert!(inject_noise(&ds, &NoiseConfig { fraction: 1.5, ..Default::default() }).is_err());
    }
}
