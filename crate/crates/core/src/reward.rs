//! Smooth physiological reward, z-score normalization and the shaped
//! reward `r_phys - lambda1 * ACP + lambda2 * WS`.

use serde::{Deserialize, Serialize};

use crate::domain::{Feature, StateWindow};
use crate::error::{invalid, Result};

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Quadratic penalty around 75 bpm, flat while `(hr-75)^2 <= 250`.
pub fn heart_rate_penalty(hr: f64) -> f64 {
    relu((hr - 75.0).powi(2) / 250.0 - 1.0)
}

/// Linear penalty below 60 mmHg.
pub fn min_map_penalty(map: f64) -> f64 {
    relu(7.0 * (60.0 - map) / 20.0)
}

/// Penalizes pulsatility outside `[20, 50]`.
pub fn pulsatility_penalty(p: f64) -> f64 {
    relu(7.0 * (20.0 - p) / 20.0) + relu((p - 50.0) / 20.0)
}

/// Linear penalty on mean MAP above 106 mmHg.
pub fn hypertension_penalty(mean_map: f64) -> f64 {
    relu((mean_map - 106.0) / 18.0)
}

/// Negated sum of the four penalties over one window. Always `<= 0`.
pub fn physiological_reward(window: &StateWindow) -> f64 {
    -(min_map_penalty(window.min_of(Feature::Map))
        + hypertension_penalty(window.mean_of(Feature::Map))
        + heart_rate_penalty(window.min_of(Feature::Hr))
        + pulsatility_penalty(window.min_of(Feature::Pulsatility)))
}

/// Shaping weights plus the frozen z-normalization of the raw reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// ACP weight.
    pub lambda1: f64,
    /// WS weight.
    pub lambda2: f64,
    pub znorm_mean: f64,
    pub znorm_std: f64,
    pub clip: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            znorm_mean: 0.0,
            znorm_std: 1.0,
            clip: 2.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(invalid("reward weights must be non-negative"));
        }
        if !(self.znorm_std > 0.0 && self.znorm_std.is_finite()) {
            return Err(invalid("znorm_std must be positive"));
        }
        if !(self.clip > 0.0) {
            return Err(invalid("clip must be positive"));
        }
        Ok(())
    }

    /// Freezes mean and standard deviation of the given raw rewards.
    /// A zero spread falls back to unit scale.
    pub fn with_stats_from(mut self, raw: &[f64]) -> Self {
        if raw.is_empty() {
            return self;
        }
        let n = raw.len() as f64;
        let mean = raw.iter().sum::<f64>() / n;
        let var = raw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        self.znorm_mean = mean;
        self.znorm_std = if var > 1e-12 { var.sqrt() } else { 1.0 };
        self
    }
}

/// `clip((raw - mean) / std, -clip, clip)`.
pub fn normalize_reward(raw: f64, cfg: &RewardConfig) -> f64 {
    ((raw - cfg.znorm_mean) / cfg.znorm_std).clamp(-cfg.clip, cfg.clip)
}

pub fn shaped_reward(phys: f64, acp_term: f64, ws_term: f64, cfg: &RewardConfig) -> f64 {
    phys - cfg.lambda1 * acp_term + cfg.lambda2 * ws_term
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window(min_map: f64, mean_map: f64, min_hr: f64, min_pulsat: f64) -> StateWindow {
        // first row carries the minima, the rest are chosen so the MAP mean is exact
        let mut rows = [[0.0; 12]; 6];
        let rest_map = (6.0 * mean_map - min_map) / 5.0;
        for (t, row) in rows.iter_mut().enumerate() {
            row[Feature::Map.index()] = if t == 0 { min_map } else { rest_map };
            row[Feature::Hr.index()] = if t == 0 { min_hr } else { min_hr + 1.0 };
            row[Feature::Pulsatility.index()] = if t == 0 { min_pulsat } else { min_pulsat + 1.0 };
        }
        StateWindow::new(rows).unwrap()
    }

    #[test]
    fn safe_window_has_zero_reward() {
        assert_eq!(physiological_reward(&window(70.0, 80.0, 75.0, 30.0)), 0.0);
    }

    #[test]
    fn hand_evaluated_penalties() {
        assert!((physiological_reward(&window(40.0, 80.0, 75.0, 30.0)) + 7.0).abs() < 1e-9);
        assert!((physiological_reward(&window(70.0, 80.0, 100.0, 30.0)) + 1.5).abs() < 1e-9);
        assert!((physiological_reward(&window(70.0, 80.0, 75.0, 10.0)) + 3.5).abs() < 1e-9);
    }

    #[test]
    fn heart_rate_plateau_follows_formula() {
        // zero exactly on 75 +- sqrt(250)
        let half = 250f64.sqrt();
        assert_eq!(heart_rate_penalty(75.0 - half + 1e-9), 0.0);
        assert!(heart_rate_penalty(55.0) > 0.0);
        assert!(heart_rate_penalty(95.0) > 0.0);
        assert_eq!(hypertension_penalty(106.0), 0.0);
        assert!(hypertension_penalty(110.0) > 0.0);
    }

    #[test]
    fn normalization_examples() {
        let cfg = RewardConfig { znorm_mean: -1.0, znorm_std: 0.5, ..Default::default() };
        assert_eq!(normalize_reward(-1.0, &cfg), 0.0);
        assert_eq!(normalize_reward(-1.0 + 10.0 * 0.5, &cfg), 2.0);
        assert!((normalize_reward(-1.5, &cfg) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn shaped_examples() {
        let mut cfg = RewardConfig::default();
        assert_eq!(shaped_reward(0.7, 3.0, 1.0, &cfg), 0.7);
        cfg.lambda1 = 0.5;
        cfg.lambda2 = 0.3;
        assert!((shaped_reward(1.0, 3.0, 1.0, &cfg) + 0.2).abs() < 1e-12);
        cfg.lambda1 = 1.0;
        cfg.lambda2 = 0.0;
        assert!((shaped_reward(0.5, 0.0, 1.0, &cfg) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stats_fallback_on_constant_rewards() {
        let cfg = RewardConfig::default().with_stats_from(&[-2.0, -2.0]);
        assert_eq!(cfg.znorm_mean, -2.0);
        assert_eq!(cfg.znorm_std, 1.0);
        assert!(RewardConfig { znorm_std: 0.0, ..cfg }.validate().is_err());
    }

    proptest! {
        #[test]
        fn reward_is_never_positive(rows in proptest::collection::vec(-50.0f64..250.0, 72)) {
            let w = StateWindow::from_flat(&rows).unwrap();
            prop_assert!(physiological_reward(&w) <= 0.0);
        }

        #[test]
        fn normalized_reward_is_clipped(raw in -1e6f64..1e6, mean in -10.0f64..10.0, std in 1e-3f64..10.0) {
            let cfg = RewardConfig { znorm_mean: mean, znorm_std: std, ..Default::default() };
            let z = normalize_reward(raw, &cfg);
            prop_assert!((-2.0..=2.0).contains(&z));
        }

        #[test]
        fn penalties_are_continuous(x in 0.0f64..200.0) {
            // value jumps would show up as a large difference across a tiny step
            let h = 1e-7;
            for f in [heart_rate_penalty, min_map_penalty, pulsatility_penalty, hypertension_penalty] {
                prop_assert!((f(x + h) - f(x - h)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn no_jumps_at_breakpoints() {
        let h = 1e-8;
        let cases: [(fn(f64) -> f64, f64); 6] = [
            (min_map_penalty, 60.0),
            (heart_rate_penalty, 75.0 - 250f64.sqrt()),
            (heart_rate_penalty, 75.0 + 250f64.sqrt()),
            (pulsatility_penalty, 20.0),
            (pulsatility_penalty, 50.0),
            (hypertension_penalty, 106.0),
        ];
        for (f, x) in cases {
            assert!((f(x + h) - f(x - h)).abs() < 1e-6, "jump at {x}");
        }
    }
}
