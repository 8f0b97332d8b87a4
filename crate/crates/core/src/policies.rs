//! Battery-selection policies and the rollout simulator that scores them.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::battery_model::{
    evolve, single_equivalent_lifetime, time_to_death, BatteryParams, BatteryState, ModelError, TIME_TOL,
};
use crate::load_profiles::{LoadProfile, ProfileError, BOUNDARY_EPS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("no battery has available charge")]
    AllDead,
    #[error("policy expects {expected} features, observation gives {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("unknown policy '{0}'")]
    UnknownPolicy(String),
    #[error("invalid rollout setting: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// What a policy sees at a decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub time: f64,
    /// Available charge per battery.
    pub sigma: Vec<f64>,
    /// Total charge per battery.
    pub gamma: Vec<f64>,
    pub alive: Vec<bool>,
    /// Battery in use just before this decision; `None` after idling or at the start.
    pub active: Option<usize>,
    pub load: f64,
    /// Minutes since each battery was last in use.
    pub rest: Vec<f64>,
}

impl Observation {
    pub fn from_states(
        states: &[BatteryState],
        params: &[BatteryParams],
        active: Option<usize>,
        load: f64,
    ) -> Self {
        Self {
            time: 0.0,
            sigma: states.iter().zip(params).map(|(s, p)| s.available(p)).collect(),
            gamma: states.iter().map(|s| s.gamma).collect(),
            alive: states.iter().zip(params).map(|(s, p)| s.is_alive(p)).collect(),
            active,
            load,
            rest: vec![0.0; states.len()],
        }
    }

    pub fn batteries(&self) -> usize {
        self.sigma.len()
    }

    /// Batteries that can take the load right now.
    pub fn usable(&self, b: usize) -> bool {
        b < self.sigma.len() && self.alive[b] && self.sigma[b] > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub battery: usize,
    /// The policy overrode its own suggestion with its default rule.
    pub fallback: bool,
}

pub trait Policy {
    fn decide(&mut self, obs: &Observation) -> Result<Decision, PolicyError>;

    fn name(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BuiltinPolicy {
    /// Highest available charge.
    Vmax,
    /// Lowest positive available charge.
    Vmin,
    /// Longest rested.
    Tmax,
    /// Most recently used.
    Tmin,
    /// Lowest index still usable.
    Sequential,
}

impl BuiltinPolicy {
    pub const ALL: [BuiltinPolicy; 5] =
        [BuiltinPolicy::Vmax, BuiltinPolicy::Vmin, BuiltinPolicy::Tmax, BuiltinPolicy::Tmin, BuiltinPolicy::Sequential];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinPolicy::Vmax => "Vmax",
            BuiltinPolicy::Vmin => "Vmin",
            BuiltinPolicy::Tmax => "Tmax",
            BuiltinPolicy::Tmin => "Tmin",
            BuiltinPolicy::Sequential => "Sequential",
        }
    }
}

impl FromStr for BuiltinPolicy {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BuiltinPolicy::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| PolicyError::UnknownPolicy(s.to_string()))
    }
}

/// Index of the usable battery that is best under `better`; ties keep the lower index.
fn pick(obs: &Observation, key: impl Fn(usize) -> f64, better: impl Fn(f64, f64) -> bool) -> Result<usize, PolicyError> {
    let mut best: Option<usize> = None;
    for b in (0..obs.batteries()).filter(|&b| obs.usable(b)) {
        match best {
            Some(cur) if !better(key(b), key(cur)) => {}
            _ => best = Some(b),
        }
    }
    best.ok_or(PolicyError::AllDead)
}

pub fn decide_builtin(kind: BuiltinPolicy, obs: &Observation) -> Result<usize, PolicyError> {
    match kind {
        BuiltinPolicy::Vmax => pick(obs, |b| obs.sigma[b], |a, b| a > b),
        BuiltinPolicy::Vmin => pick(obs, |b| obs.sigma[b], |a, b| a < b),
        BuiltinPolicy::Tmax => pick(obs, |b| obs.rest[b], |a, b| a > b),
        BuiltinPolicy::Tmin => pick(obs, |b| obs.rest[b], |a, b| a < b),
        BuiltinPolicy::Sequential => pick(obs, |_| 0.0, |_, _| false),
    }
}

impl Policy for BuiltinPolicy {
    fn decide(&mut self, obs: &Observation) -> Result<Decision, PolicyError> {
        Ok(Decision { battery: decide_builtin(*self, obs)?, fallback: false })
    }

    fn name(&self) -> String {
        BuiltinPolicy::name(*self).to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    /// Minutes between decisions while load is present.
    pub decision_period: f64,
    pub record_trace: bool,
    /// Stop here even if batteries remain; defaults to the profile end, or just past
    /// the single-equivalent bound for repeating profiles.
    pub max_time: Option<f64>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { decision_period: 0.01, record_trace: false, max_time: None }
    }
}

impl RolloutConfig {
    pub fn with_period(decision_period: f64) -> Self {
        Self { decision_period, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub time: f64,
    /// `None` while idle.
    pub battery: Option<usize>,
    pub load: f64,
    pub fallback: bool,
    pub sigma: Vec<f64>,
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutEnd {
    /// Load present and no battery can take it.
    Exhausted,
    /// A finite profile ran out.
    ProfileEnd,
    /// The time cap was reached.
    TimeCap,
    /// The policy chose a battery that cannot take the load.
    InvalidChoice,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub lifetime: f64,
    pub switches: usize,
    pub decisions: usize,
    pub fallbacks: usize,
    pub end: RolloutEnd,
    pub trace: Vec<TraceRow>,
}

impl RolloutResult {
    /// `time,active_battery,load,sigma_1..n,gamma_1..n`; idle rows carry battery 0.
    pub fn trace_csv(&self, n: usize) -> String {
        let mut out = String::from("time,active_battery,load");
        for i in 1..=n {
            let _ = write!(out, ",sigma_{i}");
        }
        for i in 1..=n {
            let _ = write!(out, ",gamma_{i}");
        }
        out.push('\n');
        for r in &self.trace {
            let _ = write!(out, "{},{},{}", r.time, r.battery.map_or(0, |b| b + 1), r.load);
            for v in r.sigma.iter().chain(&r.gamma) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// Simulates `policy` on `profile`. Batteries that die in use stay dead.
pub fn rollout(
    policy: &mut dyn Policy,
    profile: &LoadProfile,
    params: &[BatteryParams],
    config: &RolloutConfig,
) -> Result<RolloutResult, PolicyError> {
    let n = params.len();
    if n == 0 {
        return Err(PolicyError::InvalidConfig("no batteries".into()));
    }
    let delta = config.decision_period;
    if !(delta.is_finite() && delta > 0.0) {
        return Err(PolicyError::InvalidConfig(format!("decision period {delta}")));
    }
    let end = match (config.max_time, profile.horizon()) {
        (Some(cap), Some(h)) => cap.min(h),
        (Some(cap), None) => cap,
        (None, Some(h)) => h,
        (None, None) => {
            let total: f64 = params.iter().map(|p| p.capacity()).sum();
            match single_equivalent_lifetime(params, profile) {
                Ok(ub) if ub.is_finite() => ub + 2.0 * delta,
                Ok(_) => profile.period(),
                // Mixed kinetics: the summed capacity drained at the smallest load is a safe cap.
                Err(_) => {
                    let min_load = profile.segments().iter().map(|s| s.current).filter(|c| *c > 0.0).fold(f64::INFINITY, f64::min);
                    if min_load.is_finite() { total / min_load + profile.period() } else { profile.period() }
                }
            }
        }
    };

    let mut states: Vec<BatteryState> = params.iter().map(|p| p.fresh_state()).collect();
    let mut alive = vec![true; n];
    let mut rest = vec![0.0; n];
    let mut t = 0.0;
    let mut prev_active: Option<usize> = None;
    let mut last_choice: Option<usize> = None;
    let mut result =
        RolloutResult { lifetime: 0.0, switches: 0, decisions: 0, fallbacks: 0, end: RolloutEnd::ProfileEnd, trace: Vec::new() };

    let snapshot = |states: &[BatteryState]| -> (Vec<f64>, Vec<f64>) {
        (states.iter().zip(params).map(|(s, p)| s.available(p)).collect(), states.iter().map(|s| s.gamma).collect())
    };

    loop {
        if t >= end - BOUNDARY_EPS {
            result.lifetime = end;
            result.end = if profile.horizon().is_some_and(|h| end >= h - BOUNDARY_EPS) {
                RolloutEnd::ProfileEnd
            } else {
                RolloutEnd::TimeCap
            };
            break;
        }
        let (load, seg_end) = profile.segment_at(t)?;
        let seg_end = if seg_end >= end - BOUNDARY_EPS { end } else { seg_end };
        if load == 0.0 {
            if config.record_trace {
                let (sigma, gamma) = snapshot(&states);
                result.trace.push(TraceRow { time: t, battery: None, load, fallback: false, sigma, gamma });
            }
            let dt = seg_end - t;
            for (i, s) in states.iter_mut().enumerate() {
                *s = evolve(s, &params[i], 0.0, dt);
                rest[i] += dt;
            }
            t = seg_end;
            prev_active = None;
            continue;
        }

        let (sigma, gamma) = snapshot(&states);
        let obs = Observation { time: t, sigma, gamma, alive: alive.clone(), active: prev_active, load, rest: rest.clone() };
        if !(0..n).any(|b| obs.usable(b)) {
            result.lifetime = t;
            result.end = RolloutEnd::Exhausted;
            break;
        }
        let decision = match policy.decide(&obs) {
            Ok(d) => d,
            Err(PolicyError::AllDead) => {
                result.lifetime = t;
                result.end = RolloutEnd::Exhausted;
                break;
            }
            Err(e) => return Err(e),
        };
        let b = decision.battery;
        if !obs.usable(b) {
            result.lifetime = t;
            result.end = RolloutEnd::InvalidChoice;
            break;
        }
        result.decisions += 1;
        result.fallbacks += usize::from(decision.fallback);
        if last_choice.is_some_and(|c| c != b) {
            result.switches += 1;
        }
        last_choice = Some(b);
        if config.record_trace {
            result.trace.push(TraceRow {
                time: t,
                battery: Some(b),
                load,
                fallback: decision.fallback,
                sigma: obs.sigma,
                gamma: obs.gamma,
            });
        }

        let tick = t + delta;
        let next = if tick >= seg_end - BOUNDARY_EPS { seg_end } else { tick };
        let mut dt = next - t;
        let mut died = false;
        if let Some(ttd) = time_to_death(&states[b], &params[b], load)? {
            if ttd < dt - TIME_TOL {
                dt = ttd;
                died = true;
            }
        }
        for (i, s) in states.iter_mut().enumerate() {
            let draw = if i == b { load } else { 0.0 };
            *s = evolve(s, &params[i], draw, dt);
            rest[i] = if i == b { 0.0 } else { rest[i] + dt };
        }
        if died {
            alive[b] = false;
        }
        t = if died { t + dt } else { next };
        prev_active = Some(b);
    }
    Ok(result)
}

/// Single-equivalent lifetime: the limit of infinitely fast switching.
pub fn upper_bound(profile: &LoadProfile, params: &[BatteryParams]) -> Result<f64, PolicyError> {
    Ok(single_equivalent_lifetime(params, profile)?)
}

/// Finite-frequency counterpart of [`upper_bound`]: a Vmax rollout at period `delta`.
pub fn vmax_rollout(profile: &LoadProfile, params: &[BatteryParams], delta: f64) -> Result<RolloutResult, PolicyError> {
    rollout(&mut BuiltinPolicy::Vmax, profile, params, &RolloutConfig::with_period(delta))
}
