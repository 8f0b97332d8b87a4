//! Best-first search over a finite-duration transition system with variable time steps.
//!
//! States advance on an integer tick grid (tick = smallest duration) so that times
//! compare exactly, while the battery states themselves are exact closed-form values.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::battery_model::{advance, single_equivalent_lifetime, BatteryParams, BatteryState, ModelError};
use crate::load_profiles::{LoadProfile, ProfileError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("invalid duration set: {0}")]
    InvalidDurations(String),
    #[error("invalid horizon {0}")]
    InvalidHorizon(f64),
    #[error("no batteries given")]
    NoBatteries,
    #[error("no plan reaches the goal (visited {visited} states)")]
    Unsolvable { visited: usize },
    #[error("search budget exhausted after {} states; best plan reaches {:.4} min", .best.visited, .best.lifetime)]
    BudgetExhausted { best: Box<SearchOutcome> },
    #[error("plan line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Sorted set of step durations; the smallest one is the time resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationSet {
    durations: Vec<f64>,
}

impl DurationSet {
    pub fn new(mut durations: Vec<f64>) -> Result<Self, PlanError> {
        if durations.is_empty() {
            return Err(PlanError::InvalidDurations("empty".into()));
        }
        if let Some(bad) = durations.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(PlanError::InvalidDurations(format!("{bad} is not positive")));
        }
        durations.sort_by(f64::total_cmp);
        durations.dedup();
        let res = durations[0];
        for d in &durations {
            let m = d / res;
            if (m - m.round()).abs() > 1e-6 {
                return Err(PlanError::InvalidDurations(format!("{d} is not a multiple of the resolution {res}")));
            }
        }
        Ok(Self { durations })
    }

    pub fn default_set() -> Self {
        Self::new(vec![0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 1.0]).expect("default set is valid")
    }

    /// Single-duration set at `step` minutes.
    pub fn uniform(step: f64) -> Result<Self, PlanError> {
        Self::new(vec![step])
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn resolution(&self) -> f64 {
        self.durations[0]
    }

    pub fn largest(&self) -> f64 {
        *self.durations.last().expect("nonempty")
    }

    /// Adds a new smallest duration one tenth of the current resolution.
    pub fn refined(&self) -> Self {
        let mut d = self.durations.clone();
        d.push(self.resolution() / 10.0);
        Self::new(d).expect("refinement keeps the grid")
    }

    fn ticks(&self) -> Vec<u64> {
        let res = self.resolution();
        self.durations.iter().map(|d| (d / res).round() as u64).collect()
    }
}

impl std::str::FromStr for DurationSet {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parsed: Result<Vec<f64>, _> = s.split(',').map(|p| p.trim().parse::<f64>()).collect();
        Self::new(parsed.map_err(|e| PlanError::InvalidDurations(format!("'{s}': {e}")))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    /// Service the load from the battery with this 0-based index.
    Use(usize),
    Wait,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Use(b) => write!(f, "(use b{})", b + 1),
            Action::Wait => write!(f, "(wait)"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanStep {
    pub start: f64,
    pub action: Action,
    pub duration: f64,
}

impl PlanStep {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Plan {
    pub steps: Vec<PlanStep>,
}

/// Decimal with at least two fractional digits that parses back to `x`.
pub fn fmt_minutes(x: f64) -> String {
    let fixed = format!("{x:.2}");
    if fixed.parse::<f64>().map(|v| v == x).unwrap_or(false) {
        return fixed;
    }
    let s = format!("{x}");
    match s.split_once('.') {
        Some((_, frac)) if frac.len() >= 2 => s,
        Some(_) => format!("{s}0"),
        None => format!("{s}.00"),
    }
}

impl Plan {
    pub fn end(&self) -> f64 {
        self.steps.last().map(|s| s.end()).unwrap_or(0.0)
    }

    pub fn switches(&self) -> usize {
        let used: Vec<usize> = self
            .steps
            .iter()
            .filter_map(|s| match s.action {
                Action::Use(b) => Some(b),
                Action::Wait => None,
            })
            .collect();
        used.windows(2).filter(|w| w[0] != w[1]).count()
    }

    /// One `<start>: <action> [<duration>]` line per step.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            let _ = writeln!(out, "{}: {} [{}]", fmt_minutes(s.start), s.action, fmt_minutes(s.duration));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, PlanError> {
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: &str| PlanError::Parse { line: i + 1, msg: msg.to_string() };
            if line.is_empty() || line.starts_with('#') || line.contains("(satisfied)") {
                continue;
            }
            let (start, rest) = line.split_once(':').ok_or_else(|| err("expected '<start>:'"))?;
            let start: f64 = start.trim().parse().map_err(|_| err("bad start time"))?;
            let rest = rest.trim();
            let close = rest.find(')').ok_or_else(|| err("expected '(action)'"))?;
            let action_text = rest[..=close].trim();
            let action = if action_text == "(wait)" {
                Action::Wait
            } else {
                let b = action_text
                    .strip_prefix("(use b")
                    .and_then(|s| s.strip_suffix(')'))
                    .and_then(|s| s.trim().parse::<usize>().ok())
                    .filter(|b| *b >= 1)
                    .ok_or_else(|| err("expected '(use b<k>)' or '(wait)'"))?;
                Action::Use(b - 1)
            };
            let dur = rest[close + 1..].trim();
            let dur = dur
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| err("expected '[<duration>]'"))?;
            let duration: f64 = dur.trim().parse().map_err(|_| err("bad duration"))?;
            steps.push(PlanStep { start, action, duration });
        }
        Ok(Self { steps })
    }
}

/// A node of the transition system.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub batteries: Vec<BatteryState>,
    pub active: Option<usize>,
    pub t: f64,
    pub last_action: Option<(Action, f64)>,
    pub short_run_accum: f64,
}

impl SearchState {
    pub fn initial(params: &[BatteryParams]) -> Self {
        Self {
            batteries: params.iter().map(|p| p.fresh_state()).collect(),
            active: None,
            t: 0.0,
            last_action: None,
            short_run_accum: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// The active battery empties during its use.
    BatteryDead,
    /// Load is present but nothing services it.
    Disaster,
    /// A battery is switched in while there is no load.
    NotOptimal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub time: f64,
}

/// Applies `action` for `d` minutes from `s`, stepping across load changes exactly.
pub fn transition(
    s: &SearchState,
    action: Action,
    d: f64,
    profile: &LoadProfile,
    params: &[BatteryParams],
) -> Result<SearchState, Violation> {
    let mut batteries = s.batteries.clone();
    let at_time = |kind, time| Violation { kind, time };
    let pieces = profile.pieces(s.t, s.t + d).map_err(|_| at_time(ViolationKind::Disaster, s.t))?;
    for (a, b, load) in pieces {
        match action {
            Action::Use(k) => {
                if load == 0.0 {
                    return Err(at_time(ViolationKind::NotOptimal, a));
                }
                batteries[k] = match advance(&batteries[k], &params[k], load, b - a) {
                    Ok(next) => next,
                    Err(ModelError::DiesWithinInterval { at }) => return Err(at_time(ViolationKind::BatteryDead, a + at)),
                    Err(_) => return Err(at_time(ViolationKind::BatteryDead, a)),
                };
            }
            Action::Wait => {
                if load > 0.0 {
                    return Err(at_time(ViolationKind::Disaster, a));
                }
            }
        }
        for (i, st) in batteries.iter_mut().enumerate() {
            if action != Action::Use(i) {
                *st = crate::battery_model::evolve(st, &params[i], 0.0, b - a);
            }
        }
    }
    let same = matches!(s.last_action, Some((a, pd)) if a == action && pd == d);
    Ok(SearchState {
        batteries,
        active: match action {
            Action::Use(k) => Some(k),
            Action::Wait => None,
        },
        t: s.t + d,
        last_action: Some((action, d)),
        short_run_accum: if same { s.short_run_accum + d } else { d },
    })
}

/// Search score: elapsed time plus total available charge, each with a weight.
pub fn heuristic(s: &SearchState, params: &[BatteryParams], time_weight: f64, charge_weight: f64) -> f64 {
    let charge: f64 = s.batteries.iter().zip(params).map(|(b, p)| b.available(p)).sum();
    time_weight * s.t + charge_weight * charge
}

/// Durations (as indices into `durations`) that may follow `prev` with the same action.
/// `prev` is `(duration index, ticks accumulated in the current run)`.
fn same_action_allowed(ticks: &[u64], prev: (usize, u64), idx: usize) -> bool {
    let (prev_idx, run) = prev;
    if idx > prev_idx {
        return false;
    }
    let largest = ticks.len() - 1;
    if idx == largest {
        return true;
    }
    let accum = if idx == prev_idx { run } else { 0 };
    accum + ticks[idx] <= ticks[idx + 1]
}

/// Actions and durations permitted after `(a_prev, d_prev)` by the symmetry rules,
/// ignoring the horizon and the dynamics. `run` is the accumulated run of `d_prev`.
pub fn enabled(
    n_batteries: usize,
    durations: &DurationSet,
    prev: Option<(Action, f64)>,
    run: f64,
) -> Vec<(Action, f64)> {
    let ticks = durations.ticks();
    let res = durations.resolution();
    let prev = prev.and_then(|(a, d)| {
        let idx = durations.durations().iter().position(|x| (x - d).abs() <= 1e-9 * d.max(1.0))?;
        Some((a, idx, (run / res).round() as u64))
    });
    let mut out = Vec::new();
    for action in (0..n_batteries).map(Action::Use).chain(std::iter::once(Action::Wait)) {
        for (idx, d) in durations.durations().iter().enumerate() {
            let ok = match prev {
                Some((a, pidx, run)) if a == action => same_action_allowed(&ticks, (pidx, run), idx),
                _ => true,
            };
            if ok {
                out.push((action, *d));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Goal {
    /// Reach the end of a finite profile.
    FinishProfile,
    /// Serve as long as possible, up to the horizon.
    MaximizeLifetime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchConfig {
    pub durations: DurationSet,
    pub goal: Goal,
    /// Defaults to the single-equivalent lifetime (capped by a finite profile's end)
    /// when maximising, and to the profile end when finishing.
    pub horizon: Option<f64>,
    /// Maximum number of expanded states.
    pub node_budget: usize,
    /// Stop maximising after this many expansions without a deeper trajectory.
    pub stall_limit: Option<usize>,
    pub time_limit: Option<Duration>,
    pub time_weight: f64,
    pub charge_weight: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            durations: DurationSet::default_set(),
            goal: Goal::MaximizeLifetime,
            horizon: None,
            node_budget: 2_000_000,
            stall_limit: Some(200),
            time_limit: None,
            time_weight: 1.0,
            charge_weight: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn finish(durations: DurationSet) -> Self {
        Self { durations, goal: Goal::FinishProfile, stall_limit: None, ..Default::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GoalReached,
    OpenListEmpty,
    NodeBudget,
    Stalled,
    TimeLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub plan: Plan,
    /// End time of the plan in minutes.
    pub lifetime: f64,
    /// Expanded states.
    pub visited: usize,
    /// States added to the open list.
    pub generated: usize,
    pub horizon: f64,
    pub termination: Termination,
}

struct Node {
    batteries: Vec<BatteryState>,
    active: Option<usize>,
    ticks: u64,
    /// Last action, its duration index, and ticks accumulated in its run.
    last: Option<(Action, usize, u64)>,
    parent: u32,
}

#[derive(PartialEq, Eq)]
struct Entry {
    h: i64,
    ticks: u64,
    action_rank: usize,
    dur_ticks: u64,
    seq: u64,
    node: u32,
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.h
            .cmp(&other.h)
            .then(self.ticks.cmp(&other.ticks))
            .then(other.action_rank.cmp(&self.action_rank))
            .then(self.dur_ticks.cmp(&other.dur_ticks))
            .then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(PartialEq, Eq, Hash)]
struct Key {
    charge: Box<[i64]>,
    active: usize,
    phase: u64,
}

const NO_PARENT: u32 = u32::MAX;

fn round5(x: f64) -> i64 {
    (x * 1e5).round() as i64
}

/// Converts a tick count to minutes, exactly when the tick is 1/n of a minute.
fn grid_time(ticks: u64, tick: f64) -> f64 {
    let per_minute = 1.0 / tick;
    if (per_minute - per_minute.round()).abs() < 1e-6 {
        ticks as f64 / per_minute.round()
    } else {
        ticks as f64 * tick
    }
}

struct Searcher<'a> {
    profile: &'a LoadProfile,
    params: &'a [BatteryParams],
    config: &'a SearchConfig,
    tick: f64,
    ticks: Vec<u64>,
    horizon_ticks: u64,
    period_ticks: Option<u64>,
    nodes: Vec<Node>,
}

impl Searcher<'_> {
    fn time(&self, ticks: u64) -> f64 {
        grid_time(ticks, self.tick)
    }

    fn key(&self, node: &Node) -> Key {
        let charge = node.batteries.iter().flat_map(|b| [round5(b.delta), round5(b.gamma)]).collect();
        let phase = match self.period_ticks {
            Some(p) => node.ticks % p,
            None => node.ticks,
        };
        Key { charge, active: node.active.map_or(usize::MAX, |a| a), phase }
    }

    fn score(&self, node: &Node) -> i64 {
        let charge: f64 = node.batteries.iter().zip(self.params).map(|(b, p)| b.available(p)).sum();
        let h = self.config.time_weight * self.time(node.ticks) + self.config.charge_weight * charge;
        (h * 1e9).round() as i64
    }

    fn extract(&self, mut idx: u32) -> Plan {
        let mut steps = Vec::new();
        while self.nodes[idx as usize].parent != NO_PARENT {
            let node = &self.nodes[idx as usize];
            let parent = &self.nodes[node.parent as usize];
            let (action, _, _) = node.last.expect("non-root nodes record their action");
            steps.push(PlanStep {
                start: self.time(parent.ticks),
                action,
                duration: self.time(node.ticks - parent.ticks),
            });
            idx = node.parent;
        }
        steps.reverse();
        Plan { steps }
    }

    fn outcome(&self, best: u32, visited: usize, generated: usize, termination: Termination) -> SearchOutcome {
        let plan = self.extract(best);
        SearchOutcome {
            lifetime: self.time(self.nodes[best as usize].ticks),
            plan,
            visited,
            generated,
            horizon: self.time(self.horizon_ticks),
            termination,
        }
    }

    /// Children of `idx` in generation order, after pre-filters, symmetry and dynamics.
    fn successors(&self, idx: u32) -> Vec<(Node, usize, u64)> {
        let node = &self.nodes[idx as usize];
        let t = self.time(node.ticks);
        let load = match self.profile.current_at(t) {
            Ok(l) => l,
            Err(_) => return Vec::new(),
        };
        let state = SearchState {
            batteries: node.batteries.clone(),
            active: node.active,
            t,
            last_action: None,
            short_run_accum: 0.0,
        };
        // A load change wipes out the symmetry restriction of the previous run.
        let prev = if self.profile.load_changes_at(t) { None } else { node.last };
        let n = self.params.len();
        let mut out = Vec::new();
        for action in (0..n).map(Action::Use).chain(std::iter::once(Action::Wait)) {
            match action {
                Action::Wait if load > 0.0 => continue,
                Action::Use(_) if load == 0.0 => continue,
                Action::Use(k) if !node.batteries[k].is_alive(&self.params[k]) => continue,
                _ => {}
            }
            let rank = match action {
                Action::Use(k) => k,
                Action::Wait => n,
            };
            for (di, &dt) in self.ticks.iter().enumerate().rev() {
                if node.ticks + dt > self.horizon_ticks {
                    continue;
                }
                if let Some((pa, pdi, run)) = prev {
                    if pa == action && !same_action_allowed(&self.ticks, (pdi, run), di) {
                        continue;
                    }
                }
                let end = self.time(node.ticks + dt);
                let Ok(next) = transition(&state, action, end - t, self.profile, self.params) else {
                    continue;
                };
                let run = match prev {
                    Some((pa, pdi, run)) if pa == action && pdi == di => run + dt,
                    _ => dt,
                };
                out.push((
                    Node {
                        batteries: next.batteries,
                        active: next.active,
                        ticks: node.ticks + dt,
                        last: Some((action, di, run)),
                        parent: idx,
                    },
                    rank,
                    dt,
                ));
            }
        }
        out
    }
}

/// Best-first search for a switching plan.
pub fn search(profile: &LoadProfile, params: &[BatteryParams], config: &SearchConfig) -> Result<SearchOutcome, PlanError> {
    if params.is_empty() {
        return Err(PlanError::NoBatteries);
    }
    let horizon = match (config.horizon, config.goal) {
        (Some(h), _) => h,
        (None, Goal::FinishProfile) => profile.horizon().ok_or(PlanError::InvalidHorizon(f64::INFINITY))?,
        (None, Goal::MaximizeLifetime) => {
            let ub = single_equivalent_lifetime(params, profile)?;
            profile.horizon().map_or(ub, |end| ub.min(end))
        }
    };
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(PlanError::InvalidHorizon(horizon));
    }
    let tick = config.durations.resolution();
    let horizon_ticks = (horizon / tick + 1e-6).floor() as u64;
    let period_ticks = if profile.repeats() {
        let p = profile.period() / tick;
        ((p - p.round()).abs() < 1e-6).then(|| p.round() as u64)
    } else {
        None
    };
    let mut s = Searcher {
        profile,
        params,
        config,
        tick,
        ticks: config.durations.ticks(),
        horizon_ticks,
        period_ticks,
        nodes: Vec::new(),
    };
    let finish = config.goal == Goal::FinishProfile;
    if finish && (horizon - s.time(horizon_ticks)).abs() > 1e-6 {
        return Err(PlanError::InvalidDurations(format!(
            "profile end {horizon} is not on the {tick} min grid"
        )));
    }

    s.nodes.push(Node {
        batteries: params.iter().map(|p| p.fresh_state()).collect(),
        active: None,
        ticks: 0,
        last: None,
        parent: NO_PARENT,
    });
    let mut closed: HashSet<Key> = HashSet::new();
    closed.insert(s.key(&s.nodes[0]));
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;
    open.push(Entry { h: s.score(&s.nodes[0]), ticks: 0, action_rank: 0, dur_ticks: 0, seq, node: 0 });

    let started = Instant::now();
    let mut best = 0u32;
    let mut visited = 0usize;
    let mut generated = 1usize;
    let mut since_improvement = 0usize;
    if horizon_ticks == 0 {
        return Ok(s.outcome(0, 0, 1, Termination::GoalReached));
    }

    let termination = loop {
        let Some(entry) = open.pop() else { break Termination::OpenListEmpty };
        if visited >= config.node_budget {
            break Termination::NodeBudget;
        }
        if let Some(limit) = config.time_limit {
            if started.elapsed() > limit {
                break Termination::TimeLimit;
            }
        }
        visited += 1;
        since_improvement += 1;
        for (child, rank, dt) in s.successors(entry.node) {
            let key = s.key(&child);
            if !closed.insert(key) {
                continue;
            }
            let idx = s.nodes.len() as u32;
            let ticks = child.ticks;
            let h = s.score(&child);
            s.nodes.push(child);
            generated += 1;
            seq += 1;
            if ticks > s.nodes[best as usize].ticks {
                best = idx;
                since_improvement = 0;
            }
            if ticks == horizon_ticks {
                return Ok(s.outcome(idx, visited, generated, Termination::GoalReached));
            }
            open.push(Entry { h, ticks, action_rank: rank, dur_ticks: dt, seq, node: idx });
        }
        if !finish && config.stall_limit.is_some_and(|limit| since_improvement >= limit) {
            break Termination::Stalled;
        }
    };

    if finish {
        return match termination {
            Termination::OpenListEmpty => Err(PlanError::Unsolvable { visited }),
            _ => Err(PlanError::BudgetExhausted { best: Box::new(s.outcome(best, visited, generated, termination)) }),
        };
    }
    Ok(s.outcome(best, visited, generated, termination))
}
