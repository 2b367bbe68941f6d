use crate::domain::{PLevel, StateWindow};
use crate::rng::Rng;

/// Anything that picks the next pump level from the current hour.
///
/// `current` is the level applied during the window that produced `state`.
pub trait Policy: Send + Sync {
    fn act(&self, state: &StateWindow, current: PLevel, rng: &mut Rng) -> PLevel;
}

impl<F> Policy for F
where
    F: Fn(&StateWindow, PLevel, &mut Rng) -> PLevel + Send + Sync,
{
    fn act(&self, state: &StateWindow, current: PLevel, rng: &mut Rng) -> PLevel {
        self(state, current, rng)
    }
}

/// Always applies the same level.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPolicy(pub PLevel);

impl Policy for ConstantPolicy {
    fn act(&self, _: &StateWindow, _: PLevel, _: &mut Rng) -> PLevel {
        self.0
    }
}

/// Keeps whatever level is currently applied.
#[derive(Debug, Clone, Copy)]
pub struct HoldPolicy;

impl Policy for HoldPolicy {
    fn act(&self, _: &StateWindow, current: PLevel, _: &mut Rng) -> PLevel {
        current
    }
}
