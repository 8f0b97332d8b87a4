//! Closed-form kinetic battery model in (delta, gamma) coordinates.
//!
//! Units are minutes, amperes and ampere-minutes. `delta` is the height
//! difference between the bound and available wells, `gamma` the total charge.

use crate::load_profiles::LoadProfile;

/// Absolute time tolerance (minutes) for root finding and boundary checks.
pub const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid battery parameters: {0}")]
    InvalidParams(String),
    #[error("negative or non-finite duration {0}")]
    NegativeDuration(f64),
    #[error("negative or non-finite current {0}")]
    NegativeCurrent(f64),
    #[error("battery dies {at} min into the interval")]
    DiesWithinInterval { at: f64 },
    #[error("battery is already dead")]
    AlreadyDead,
    #[error("batteries have differing c or k'; no single-battery equivalent exists")]
    MixedKinetics,
    #[error("no batteries given")]
    NoBatteries,
    #[error(transparent)]
    Profile(#[from] crate::load_profiles::ProfileError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryParams {
    capacity: f64,
    c: f64,
    k_prime: f64,
}

impl BatteryParams {
    pub fn new(capacity: f64, c: f64, k_prime: f64) -> Result<Self, ModelError> {
        if !(capacity.is_finite() && capacity > 0.0) {
            return Err(ModelError::InvalidParams(format!("capacity {capacity} must be positive")));
        }
        if !(c > 0.0 && c < 1.0) {
            return Err(ModelError::InvalidParams(format!("fraction c {c} must lie in (0, 1)")));
        }
        if !(k_prime.is_finite() && k_prime > 0.0) {
            return Err(ModelError::InvalidParams(format!("rate k' {k_prime} must be positive")));
        }
        Ok(Self { capacity, c, k_prime })
    }

    /// 5.5 A·min cell used for the two-battery benchmarks.
    pub fn b1() -> Self {
        Self { capacity: 5.5, c: 0.166, k_prime: 0.122 }
    }

    /// 11 A·min cell with the same kinetics as [`BatteryParams::b1`].
    pub fn b2() -> Self {
        Self { capacity: 11.0, c: 0.166, k_prime: 0.122 }
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn fraction_c(&self) -> f64 {
        self.c
    }

    pub fn rate_k_prime(&self) -> f64 {
        self.k_prime
    }

    /// Valve conductance k = k'·c·(1 − c).
    pub fn conductance(&self) -> f64 {
        self.k_prime * self.c * (1.0 - self.c)
    }

    pub fn fresh_state(&self) -> BatteryState {
        BatteryState { delta: 0.0, gamma: self.capacity }
    }

    pub fn same_kinetics(&self, other: &BatteryParams) -> bool {
        self.c == other.c && self.k_prime == other.k_prime
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState {
    pub delta: f64,
    pub gamma: f64,
}

impl BatteryState {
    /// Available-well charge y1.
    pub fn available(&self, p: &BatteryParams) -> f64 {
        available_charge(self, p)
    }

    /// Bound-well charge y2 = gamma − y1.
    pub fn bound(&self, p: &BatteryParams) -> f64 {
        self.gamma - self.available(p)
    }

    pub fn is_alive(&self, p: &BatteryParams) -> bool {
        self.gamma > (1.0 - p.c) * self.delta
    }
}

pub fn available_charge(state: &BatteryState, params: &BatteryParams) -> f64 {
    params.c * (state.gamma - (1.0 - params.c) * state.delta)
}

/// Unchecked closed-form evolution. Valid for any state, including past death.
pub fn evolve(state: &BatteryState, params: &BatteryParams, current: f64, dt: f64) -> BatteryState {
    let asym = current / (params.c * params.k_prime);
    BatteryState {
        delta: asym + (state.delta - asym) * (-params.k_prime * dt).exp(),
        gamma: state.gamma - current * dt,
    }
}

/// Margin f(t) = gamma(t) − (1−c)·delta(t); the battery is dead where f ≤ 0.
fn margin(state: &BatteryState, params: &BatteryParams, current: f64, t: f64) -> f64 {
    let s = evolve(state, params, current, t);
    s.gamma - (1.0 - params.c) * s.delta
}

fn check_inputs(current: f64, dt: f64) -> Result<(), ModelError> {
    if !(current.is_finite() && current >= 0.0) {
        return Err(ModelError::NegativeCurrent(current));
    }
    if !(dt.is_finite() && dt >= 0.0) {
        return Err(ModelError::NegativeDuration(dt));
    }
    Ok(())
}

/// Advances a live battery by `dt` at constant `current`, refusing to cross death.
/// A death landing within [`TIME_TOL`] of `dt` counts as the closed end of the interval.
pub fn advance(
    state: &BatteryState,
    params: &BatteryParams,
    current: f64,
    dt: f64,
) -> Result<BatteryState, ModelError> {
    check_inputs(current, dt)?;
    if current > 0.0 {
        if !state.is_alive(params) {
            return Err(ModelError::AlreadyDead);
        }
        if let Some(at) = death_within(state, params, current, dt) {
            if at < dt - TIME_TOL {
                return Err(ModelError::DiesWithinInterval { at });
            }
        }
    }
    Ok(evolve(state, params, current, dt))
}

/// Start of the interval on which the margin is monotonically decreasing.
/// Before it the margin only rises, so no root can lie there.
fn decreasing_from(state: &BatteryState, params: &BatteryParams, current: f64) -> f64 {
    let asym = current / (params.c * params.k_prime);
    let excess = (1.0 - params.c) * (state.delta - asym) * params.k_prime;
    if excess > current {
        (excess / current).ln() / params.k_prime
    } else {
        0.0
    }
}

/// Refines the unique root of the margin on a bracket where it decreases.
fn refine_root(state: &BatteryState, params: &BatteryParams, current: f64, mut lo: f64, mut hi: f64) -> f64 {
    // Safeguarded Newton: keep the bracket, bisect whenever the step leaves it.
    let asym = current / (params.c * params.k_prime);
    let mut t = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = margin(state, params, current, t);
        if f > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let df = -current
            + (1.0 - params.c) * (state.delta - asym) * params.k_prime * (-params.k_prime * t).exp();
        let newton = if df < 0.0 { t - f / df } else { f64::NAN };
        let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        let scale = t.abs().max(1.0);
        if (next - t).abs() <= 1e-14 * scale || hi - lo <= 1e-14 * scale {
            return next;
        }
        t = next;
    }
    t
}

/// First death time within [0, horizon] under constant current, if any.
fn death_within(state: &BatteryState, params: &BatteryParams, current: f64, horizon: f64) -> Option<f64> {
    if current <= 0.0 {
        return None;
    }
    if margin(state, params, current, horizon) > 0.0 {
        return None;
    }
    let lo = decreasing_from(state, params, current);
    if lo >= horizon {
        return None;
    }
    Some(refine_root(state, params, current, lo, horizon))
}

/// Time until the battery empties under constant current; `None` means never.
pub fn time_to_death(state: &BatteryState, params: &BatteryParams, current: f64) -> Result<Option<f64>, ModelError> {
    check_inputs(current, 0.0)?;
    if current == 0.0 {
        return Ok(None);
    }
    if !state.is_alive(params) {
        return Err(ModelError::AlreadyDead);
    }
    // delta stays non-negative, so gamma alone runs out by gamma0 / current.
    let hi = state.gamma / current;
    let lo = decreasing_from(state, params, current).min(hi);
    Ok(Some(refine_root(state, params, current, lo, hi)))
}

/// Death time of one battery against a profile from time 0, or `None` if it survives the
/// profile. Repeating profiles whose period draws no charge also return `None`.
pub fn lifetime_on_profile(params: &BatteryParams, profile: &LoadProfile) -> Result<Option<f64>, ModelError> {
    let mut state = params.fresh_state();
    let mut t = 0.0;
    let horizon = match profile.horizon() {
        Some(h) => h,
        None => {
            if profile.charge_per_period() <= 0.0 {
                return Ok(None);
            }
            f64::INFINITY
        }
    };
    while t < horizon {
        let (current, end) = profile.segment_at(t)?;
        let end = end.min(horizon);
        let dt = end - t;
        if current > 0.0 {
            if let Some(at) = death_within(&state, params, current, dt) {
                return Ok(Some(t + at));
            }
        }
        state = evolve(&state, params, current, dt);
        t = end;
    }
    Ok(None)
}

/// Lifetime of one battery holding the summed capacity: the switching upper bound.
/// Returns the profile length when it survives a finite profile and infinity when it
/// never dies on a repeating one.
pub fn single_equivalent_lifetime(params_list: &[BatteryParams], profile: &LoadProfile) -> Result<f64, ModelError> {
    let first = params_list.first().ok_or(ModelError::NoBatteries)?;
    if params_list.iter().any(|p| !p.same_kinetics(first)) {
        return Err(ModelError::MixedKinetics);
    }
    let total: f64 = params_list.iter().map(|p| p.capacity).sum();
    let combined = BatteryParams::new(total, first.c, first.k_prime)?;
    Ok(match lifetime_on_profile(&combined, profile)? {
        Some(t) => t,
        None => profile.horizon().unwrap_or(f64::INFINITY),
    })
}
