//! Clinical metrics: action change penalty (ACP), hemodynamic stability,
//! the per-step weaning reward and the weaning score (WS).

use serde::{Deserialize, Serialize};

use crate::domain::{Feature, PLevel, StateWindow, Trajectory, WINDOW_STEPS};
use crate::error::{invalid, Result};

/// Jumps of at most this many levels are ignored by the gated ACP.
pub const ACP_GATE: f64 = 2.0;

/// Which stability definition to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StabilityMode {
    /// Minima over the window above clinical safety limits.
    Clinical,
    /// Least-squares slopes of MAP, HR and pulsatility below per-step bounds.
    Gradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityThresholds {
    pub mode: StabilityMode,
    pub map_floor: f64,
    pub hr_floor: f64,
    pub pulsat_floor: f64,
    pub map_slope: f64,
    pub hr_slope: f64,
    pub pulsat_slope: f64,
}

impl StabilityThresholds {
    pub fn clinical() -> Self {
        Self { mode: StabilityMode::Clinical, ..Self::base() }
    }

    pub fn gradient() -> Self {
        Self { mode: StabilityMode::Gradient, ..Self::base() }
    }

    fn base() -> Self {
        Self {
            mode: StabilityMode::Clinical,
            map_floor: 60.0,
            hr_floor: 50.0,
            pulsat_floor: 10.0,
            map_slope: 1.36,
            hr_slope: 2.16,
            pulsat_slope: 1.95,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.map_floor,
            self.hr_floor,
            self.pulsat_floor,
            self.map_slope,
            self.hr_slope,
            self.pulsat_slope,
        ];
        if all.iter().all(|t| *t > 0.0) {
            Ok(())
        } else {
            Err(invalid("stability thresholds must be positive"))
        }
    }
}

/// Sum of `|a_i - a_{i-1}|` over consecutive pairs whose jump exceeds 2 levels.
pub fn action_change_penalty(actions: &[PLevel]) -> Result<f64> {
    acp_impl(actions, true)
}

/// ACP variant that counts every change, without the `> 2` gate.
pub fn action_change_penalty_ungated(actions: &[PLevel]) -> Result<f64> {
    acp_impl(actions, false)
}

fn acp_impl(actions: &[PLevel], gated: bool) -> Result<f64> {
    if actions.is_empty() {
        return Err(invalid("ACP needs at least one action"));
    }
    Ok(actions.windows(2).map(|w| step_change_penalty(w[0], w[1], gated)).sum())
}

/// ACP contribution of a single `prev -> next` change.
pub fn step_change_penalty(prev: PLevel, next: PLevel, gated: bool) -> f64 {
    let delta = (next.as_f64() - prev.as_f64()).abs();
    if !gated || delta > ACP_GATE {
        delta
    } else {
        0.0
    }
}

/// Ordinary least-squares slope of `values` against time indices `1..=n`.
pub fn ols_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let t_mean = (n + 1.0) / 2.0;
    let y_mean = values.iter().sum::<f64>() / n;
    let (num, den) = values.iter().enumerate().fold((0.0, 0.0), |(num, den), (i, y)| {
        let dt = (i + 1) as f64 - t_mean;
        (num + dt * (y - y_mean), den + dt * dt)
    });
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn is_stable(window: &StateWindow, thr: &StabilityThresholds) -> bool {
    match thr.mode {
        StabilityMode::Clinical => {
            window.min_of(Feature::Map) > thr.map_floor
                && window.min_of(Feature::Hr) > thr.hr_floor
                && window.min_of(Feature::Pulsatility) > thr.pulsat_floor
        }
        StabilityMode::Gradient => {
            let slope = |f: Feature| -> f64 {
                let col: [f64; WINDOW_STEPS] = window.column(f);
                ols_slope(&col).abs()
            };
            slope(Feature::Map) < thr.map_slope
                && slope(Feature::Hr) < thr.hr_slope
                && slope(Feature::Pulsatility) < thr.pulsat_slope
        }
    }
}

/// `-1` for any increase, the size of a 1- or 2-level decrease, otherwise 0.
pub fn weaned(current: PLevel, next: PLevel) -> f64 {
    let decrease = current.level() as i64 - next.level() as i64;
    if decrease < 0 {
        -1.0
    } else if decrease == 1 || decrease == 2 {
        decrease as f64
    } else {
        0.0
    }
}

/// Stability-conditioned mean of [`weaned`] over the level changes of a trajectory.
///
/// The change `a_{i-1} -> a_i` is made at state `s_i`, so it is weighted by
/// the stability of `s_i`. Returns 0 when no decision state is stable.
pub fn weaning_score(traj: &Trajectory, thr: &StabilityThresholds) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 1..traj.actions.len() {
        if is_stable(&traj.states[i], thr) {
            num += weaned(traj.actions[i - 1], traj.actions[i]);
            den += 1.0;
        }
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// ACP of an episode that starts under level `p0`: the first move
/// `p0 -> a_1` counts like any other.
pub fn episode_acp(p0: PLevel, actions: &[PLevel]) -> Result<f64> {
    let mut all = Vec::with_capacity(actions.len() + 1);
    all.push(p0);
    all.extend_from_slice(actions);
    action_change_penalty(&all)
}

/// WS of an episode that starts under level `p0`. The move into
/// `actions[i]` is decided at `states[i]` and weighted by its stability.
pub fn episode_weaning_score(p0: PLevel, traj: &Trajectory, thr: &StabilityThresholds) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut prev = p0;
    for (s, &a) in traj.states.iter().zip(&traj.actions) {
        if is_stable(s, thr) {
            num += weaned(prev, a);
            den += 1.0;
        }
        prev = a;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-transition weaning term used in reward shaping.
pub fn weaning_term(state: &StateWindow, prev: PLevel, action: PLevel, thr: &StabilityThresholds) -> f64 {
    if is_stable(state, thr) {
        weaned(prev, action)
    } else {
        0.0
    }
}
