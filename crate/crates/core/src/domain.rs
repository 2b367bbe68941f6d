//! Domain types for MCS weaning: the hourly hemodynamic window, pump
//! support levels, transitions and trajectories.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Number of 10-minute samples in one observation window.
pub const WINDOW_STEPS: usize = 6;
/// Number of hemodynamic features per sample.
pub const N_FEATURES: usize = 12;
/// Length of a flattened window.
pub const WINDOW_LEN: usize = WINDOW_STEPS * N_FEATURES;

pub const MIN_PLEVEL: u8 = 2;
pub const MAX_PLEVEL: u8 = 9;
/// Number of admissible pump levels (P2..=P9).
pub const N_ACTIONS: usize = (MAX_PLEVEL - MIN_PLEVEL + 1) as usize;

/// Column index of each feature inside a [`StateWindow`] row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Feature {
    Map = 0,
    PumpSpeed = 1,
    MotorCurrent = 2,
    PumpFlow = 3,
    Lvp = 4,
    Lvedp = 5,
    Hr = 6,
    Sbp = 7,
    Dbp = 8,
    Pulsatility = 9,
    TauLv = 10,
    EseLv = 11,
}

impl Feature {
    pub const ALL: [Feature; N_FEATURES] = [
        Feature::Map,
        Feature::PumpSpeed,
        Feature::MotorCurrent,
        Feature::PumpFlow,
        Feature::Lvp,
        Feature::Lvedp,
        Feature::Hr,
        Feature::Sbp,
        Feature::Dbp,
        Feature::Pulsatility,
        Feature::TauLv,
        Feature::EseLv,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Feature::Map => "MAP",
            Feature::PumpSpeed => "pump_speed",
            Feature::MotorCurrent => "motor_current",
            Feature::PumpFlow => "pump_flow",
            Feature::Lvp => "LVP",
            Feature::Lvedp => "LVEDP",
            Feature::Hr => "HR",
            Feature::Sbp => "SBP",
            Feature::Dbp => "DBP",
            Feature::Pulsatility => "pulsatility",
            Feature::TauLv => "tau_LV",
            Feature::EseLv => "ESE_LV",
        }
    }
}

/// One hour of patient state: 6 ten-minute rows of 12 features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; N_FEATURES]; WINDOW_STEPS]", into = "[[f64; N_FEATURES]; WINDOW_STEPS]")]
pub struct StateWindow([[f64; N_FEATURES]; WINDOW_STEPS]);

impl StateWindow {
    pub fn new(rows: [[f64; N_FEATURES]; WINDOW_STEPS]) -> Result<Self> {
        if rows.iter().flatten().all(|v| v.is_finite()) {
            Ok(Self(rows))
        } else {
            Err(invalid("state window contains non-finite values"))
        }
    }

    /// Builds a window from a row-major slice of length 72.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != WINDOW_LEN {
            return Err(invalid(format!(
                "expected {WINDOW_LEN} values for a 6x12 window, got {}",
                values.len()
            )));
        }
        let mut rows = [[0.0; N_FEATURES]; WINDOW_STEPS];
        for (t, row) in rows.iter_mut().enumerate() {
            row.copy_from_slice(&values[t * N_FEATURES..(t + 1) * N_FEATURES]);
        }
        Self::new(rows)
    }

    /// Builds a window from nested rows of arbitrary shape, rejecting anything but 6x12.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != WINDOW_STEPS || rows.iter().any(|r| r.len() != N_FEATURES) {
            let cols = rows.first().map_or(0, Vec::len);
            return Err(invalid(format!(
                "state window must be 6x12, got {}x{}",
                rows.len(),
                cols
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_flat(&flat)
    }

    pub fn rows(&self) -> &[[f64; N_FEATURES]; WINDOW_STEPS] {
        &self.0
    }

    pub fn get(&self, t: usize, feature: Feature) -> f64 {
        self.0[t][feature.index()]
    }

    pub fn set(&mut self, t: usize, feature: Feature, value: f64) {
        self.0[t][feature.index()] = value;
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    /// The six samples of one feature, in time order.
    pub fn column(&self, feature: Feature) -> [f64; WINDOW_STEPS] {
        let mut out = [0.0; WINDOW_STEPS];
        for (t, v) in out.iter_mut().enumerate() {
            *v = self.0[t][feature.index()];
        }
        out
    }

    pub fn min_of(&self, feature: Feature) -> f64 {
        self.column(feature).into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_of(&self, feature: Feature) -> f64 {
        self.column(feature).iter().sum::<f64>() / WINDOW_STEPS as f64
    }

    /// Window with every row equal to `row`.
    pub fn constant(row: [f64; N_FEATURES]) -> Result<Self> {
        Self::new([row; WINDOW_STEPS])
    }
}

impl TryFrom<[[f64; N_FEATURES]; WINDOW_STEPS]> for StateWindow {
    type Error = Error;

    fn try_from(rows: [[f64; N_FEATURES]; WINDOW_STEPS]) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<StateWindow> for [[f64; N_FEATURES]; WINDOW_STEPS] {
    fn from(w: StateWindow) -> Self {
        w.0
    }
}

/// Pump performance level, P2 through P9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct PLevel(u8);

impl PLevel {
    pub const MIN: PLevel = PLevel(MIN_PLEVEL);
    pub const MAX: PLevel = PLevel(MAX_PLEVEL);

    pub fn new(level: i64) -> Result<Self> {
        if (MIN_PLEVEL as i64..=MAX_PLEVEL as i64).contains(&level) {
            Ok(Self(level as u8))
        } else {
            Err(invalid(format!("P-level {level} outside 2..=9")))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64
    }

    /// Zero-based action index used by policy heads.
    pub fn index(self) -> usize {
        (self.0 - MIN_PLEVEL) as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::new(index as i64 + MIN_PLEVEL as i64)
    }

    pub fn all() -> impl Iterator<Item = PLevel> {
        (MIN_PLEVEL..=MAX_PLEVEL).map(PLevel)
    }

    /// Level shifted by `delta`, saturating at P2 and P9.
    pub fn saturating_add(self, delta: i64) -> PLevel {
        let v = (self.0 as i64 + delta).clamp(MIN_PLEVEL as i64, MAX_PLEVEL as i64);
        PLevel(v as u8)
    }
}

impl TryFrom<i64> for PLevel {
    type Error = Error;

    fn try_from(v: i64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PLevel> for i64 {
    fn from(p: PLevel) -> i64 {
        p.0 as i64
    }
}

impl std::fmt::Display for PLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// A single `(s, a, r, s', done)` sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateWindow,
    pub action: PLevel,
    pub reward: f64,
    pub next_state: StateWindow,
    pub done: bool,
}

/// States visited and the levels applied between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<StateWindow>,
    pub actions: Vec<PLevel>,
}

impl Trajectory {
    pub fn new(states: Vec<StateWindow>, actions: Vec<PLevel>) -> Result<Self> {
        if states.is_empty() || actions.len() + 1 != states.len() {
            return Err(invalid(format!(
                "trajectory needs len(actions) = len(states) - 1, got {} states and {} actions",
                states.len(),
                actions.len()
            )));
        }
        Ok(Self { states, actions })
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }
}
