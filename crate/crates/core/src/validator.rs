//! Replays plans against the exact battery dynamics and drives the refine-and-replan loop.

use std::fmt::Write as _;

use crate::battery_model::{evolve, time_to_death, BatteryParams, BatteryState, TIME_TOL};
use crate::load_profiles::{LoadProfile, ProfileError};
use crate::planner::{fmt_minutes, search, Action, Plan, PlanError, SearchConfig, SearchOutcome};

/// Slack allowed between one step's end and the next step's start.
const CONTIGUITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValidationError {
    #[error("malformed plan: {0}")]
    MalformedPlan(String),
    #[error("no valid plan after {refinements} refinements")]
    RefinementExhausted { refinements: usize },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    BatteryDeadDuringUse,
    UnservicedLoad,
    ServiceWithoutLoad,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanViolation {
    pub time: f64,
    pub kind: ViolationKind,
    pub battery: Option<usize>,
    pub detail: String,
}

/// Instant at which something happens, with every battery's state right after it.
#[derive(Debug, Clone, PartialEq)]
pub struct Happening {
    pub time: f64,
    pub events: Vec<String>,
    pub states: Vec<BatteryState>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<PlanViolation>,
    pub trace: Vec<Happening>,
}

/// Six significant digits, trailing zeros dropped.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = (5 - x.abs().log10().floor() as i32).max(0) as usize;
    let s = format!("{x:.digits$}");
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    /// Human-readable replay log.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mut prev: Option<&Happening> = None;
        let mut violations = self.violations.iter().peekable();
        for h in &self.trace {
            let _ = writeln!(out, "Checking next happening (time {})", fmt_minutes(h.time));
            for e in &h.events {
                let _ = writeln!(out, " {e}");
            }
            if let Some(p) = prev {
                for (i, (a, b)) in p.states.iter().zip(&h.states).enumerate() {
                    if a.delta != b.delta {
                        let _ = writeln!(
                            out,
                            " Updating (delta b{}) ({}) by {} for continuous update.",
                            i + 1,
                            sig6(a.delta),
                            sig6(b.delta)
                        );
                    }
                    if a.gamma != b.gamma {
                        let _ = writeln!(
                            out,
                            " Updating (gamma b{}) ({}) by {} for continuous update.",
                            i + 1,
                            sig6(a.gamma),
                            sig6(b.gamma)
                        );
                    }
                }
            }
            let mut ok = true;
            while let Some(v) = violations.next_if(|v| v.time <= h.time + TIME_TOL) {
                ok = false;
                let _ = writeln!(out, "EVENT triggered at (time {})", sig6(v.time));
                let _ = writeln!(out, " {}", v.detail);
            }
            let _ = writeln!(out, "{}", if ok { "...OK!" } else { "...FAILED!" });
            prev = Some(h);
        }
        for v in violations {
            let _ = writeln!(out, "EVENT triggered at (time {})\n {}", sig6(v.time), v.detail);
        }
        let _ = writeln!(out, "{}", if self.is_valid() { "Plan valid" } else { "Plan failed to execute" });
        out
    }

    /// `time,battery,delta,gamma,event` rows, one per battery per happening.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("time,battery,delta,gamma,event\n");
        for h in &self.trace {
            let events = h.events.join(";");
            for (i, s) in h.states.iter().enumerate() {
                let _ = writeln!(out, "{},{},{},{},{}", h.time, i + 1, s.delta, s.gamma, events);
            }
        }
        out
    }
}

struct Replay<'a> {
    params: &'a [BatteryParams],
    states: Vec<BatteryState>,
    time: f64,
    report: ValidationReport,
}

impl Replay<'_> {
    /// Evolves every battery to `to`, the active one (if any) at `load`.
    fn run_to(&mut self, to: f64, active: Option<usize>, load: f64) {
        let dt = to - self.time;
        if dt > 0.0 {
            for (i, s) in self.states.iter_mut().enumerate() {
                let i_draw = if active == Some(i) { load } else { 0.0 };
                *s = evolve(s, &self.params[i], i_draw, dt);
            }
        }
        self.time = to;
    }

    fn happen(&mut self, event: String) {
        let time = self.time;
        match self.report.trace.last_mut() {
            Some(h) if (h.time - time).abs() <= TIME_TOL => {
                h.events.push(event);
                h.states.clone_from(&self.states);
            }
            _ => self.report.trace.push(Happening { time, events: vec![event], states: self.states.clone() }),
        }
    }

    fn violate(&mut self, time: f64, kind: ViolationKind, battery: Option<usize>, detail: String) {
        self.report.violations.push(PlanViolation { time, kind, battery, detail });
    }
}

fn check_well_formed(plan: &Plan, profile: &LoadProfile, n: usize) -> Result<(), ValidationError> {
    let mut expected = 0.0;
    for (i, s) in plan.steps.iter().enumerate() {
        if !(s.duration.is_finite() && s.duration > 0.0) {
            return Err(ValidationError::MalformedPlan(format!("step {}: duration {}", i + 1, s.duration)));
        }
        if (s.start - expected).abs() > CONTIGUITY_TOL {
            return Err(ValidationError::MalformedPlan(format!(
                "step {} starts at {} but the previous step ends at {}",
                i + 1,
                s.start,
                expected
            )));
        }
        if let Action::Use(b) = s.action {
            if b >= n {
                return Err(ValidationError::MalformedPlan(format!("step {}: no battery b{}", i + 1, b + 1)));
            }
        }
        expected = s.end();
    }
    if let Some(end) = profile.horizon() {
        if expected > end + CONTIGUITY_TOL {
            return Err(ValidationError::MalformedPlan(format!("plan ends at {expected}, after the profile end {end}")));
        }
    }
    Ok(())
}

/// Replays `plan` exactly and reports every invariant it breaks. Replay stops at the
/// first battery death since nothing after it can be executed.
pub fn validate(plan: &Plan, profile: &LoadProfile, params: &[BatteryParams]) -> Result<ValidationReport, ValidationError> {
    if params.is_empty() {
        return Err(ValidationError::Plan(PlanError::NoBatteries));
    }
    check_well_formed(plan, profile, params.len())?;
    let mut r = Replay {
        params,
        states: params.iter().map(|p| p.fresh_state()).collect(),
        time: 0.0,
        report: ValidationReport::default(),
    };
    r.happen("initial state".into());
    for step in &plan.steps {
        r.time = step.start;
        r.happen(format!("{} start", step.action));
        let pieces = profile.pieces(step.start, step.end())?;
        let mut reported_idle_use = false;
        for (a, b, load) in pieces {
            if a > step.start + TIME_TOL {
                r.happen(format!("load changes to {load}"));
            }
            match step.action {
                Action::Use(k) => {
                    if load == 0.0 && !reported_idle_use {
                        reported_idle_use = true;
                        r.violate(
                            a,
                            ViolationKind::ServiceWithoutLoad,
                            Some(k),
                            format!("Invariant for {} has its condition unsatisfied: no load at time {}", step.action, sig6(a)),
                        );
                    }
                    let ttd = if load > 0.0 {
                        match time_to_death(&r.states[k], &params[k], load) {
                            Ok(t) => t,
                            Err(_) => Some(0.0),
                        }
                    } else {
                        None
                    };
                    if let Some(ttd) = ttd.filter(|t| *t < b - a - TIME_TOL) {
                        let at = a + ttd;
                        r.run_to(at, Some(k), load);
                        r.happen(format!("(batterydead b{})", k + 1));
                        r.violate(
                            at,
                            ViolationKind::BatteryDeadDuringUse,
                            Some(k),
                            format!(
                                "Invariant for {} has its condition unsatisfied between time {} to {}.",
                                step.action,
                                sig6(step.start),
                                sig6(at)
                            ),
                        );
                        return Ok(r.report);
                    }
                    r.run_to(b, Some(k), load);
                }
                Action::Wait => {
                    if load > 0.0 {
                        r.violate(
                            a,
                            ViolationKind::UnservicedLoad,
                            None,
                            format!("Load of {load} A is not serviced between time {} to {}.", sig6(a), sig6(b)),
                        );
                    }
                    r.run_to(b, None, load);
                }
            }
        }
        r.time = step.end();
        r.happen(format!("{} end", step.action));
    }
    Ok(r.report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedPlan {
    pub outcome: SearchOutcome,
    pub report: ValidationReport,
    pub refinements_used: usize,
}

/// Searches, validates, and on failure adds a ten-times finer duration and searches again.
/// An unsolvable or budget-limited search also triggers refinement.
pub fn plan_and_validate(
    profile: &LoadProfile,
    params: &[BatteryParams],
    config: &SearchConfig,
    max_refinements: usize,
) -> Result<RefinedPlan, ValidationError> {
    let mut cfg = config.clone();
    for refinements_used in 0..=max_refinements {
        match search(profile, params, &cfg) {
            Ok(outcome) => {
                let report = validate(&outcome.plan, profile, params)?;
                if report.is_valid() {
                    return Ok(RefinedPlan { outcome, report, refinements_used });
                }
            }
            Err(PlanError::Unsolvable { .. } | PlanError::BudgetExhausted { .. }) => {}
            Err(e) => return Err(e.into()),
        }
        cfg.durations = cfg.durations.refined();
    }
    Err(ValidationError::RefinementExhausted { refinements: max_refinements })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{DurationSet, PlanStep};

    fn step(start: f64, action: Action, duration: f64) -> PlanStep {
        PlanStep { start, action, duration }
    }

    #[test]
    fn solo_overuse_is_caught_at_death() {
        let p = [BatteryParams::b1()];
        let prof = LoadProfile::constant(0.25).unwrap();
        let plan = Plan { steps: vec![step(0.0, Action::Use(0), 5.0)] };
        let rep = validate(&plan, &prof, &p).unwrap();
        let ttd = time_to_death(&p[0].fresh_state(), &p[0], 0.25).unwrap().unwrap();
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].kind, ViolationKind::BatteryDeadDuringUse);
        assert!((rep.violations[0].time - ttd).abs() < 1e-6);
        assert!(rep.render_text().contains("(batterydead b1)"));
    }

    #[test]
    fn ending_exactly_at_death_is_valid() {
        let p = [BatteryParams::b1()];
        let prof = LoadProfile::constant(0.25).unwrap();
        let ttd = time_to_death(&p[0].fresh_state(), &p[0], 0.25).unwrap().unwrap();
        let plan = Plan { steps: vec![step(0.0, Action::Use(0), ttd)] };
        assert!(validate(&plan, &prof, &p).unwrap().is_valid());
    }

    #[test]
    fn empty_plan_on_idle_profile() {
        let p = [BatteryParams::b1()];
        let prof = LoadProfile::new(vec![(2.0, 0.0)], false).unwrap();
        let rep = validate(&Plan::default(), &prof, &p).unwrap();
        assert!(rep.is_valid());
    }

    #[test]
    fn idle_service_and_unserviced_load() {
        let p = [BatteryParams::b1()];
        let prof = LoadProfile::new(vec![(1.0, 0.0), (1.0, 0.25)], false).unwrap();
        let plan = Plan { steps: vec![step(0.0, Action::Use(0), 1.0), step(1.0, Action::Wait, 1.0)] };
        let rep = validate(&plan, &prof, &p).unwrap();
        let kinds: Vec<_> = rep.violations.iter().map(|v| v.kind).collect();
        assert_eq!(kinds, vec![ViolationKind::ServiceWithoutLoad, ViolationKind::UnservicedLoad]);
    }

    #[test]
    fn gaps_are_malformed() {
        let p = [BatteryParams::b1()];
        let prof = LoadProfile::constant(0.25).unwrap();
        let plan = Plan { steps: vec![step(0.0, Action::Use(0), 1.0), step(1.5, Action::Use(0), 1.0)] };
        assert!(matches!(validate(&plan, &prof, &p), Err(ValidationError::MalformedPlan(_))));
        let plan = Plan { steps: vec![step(0.0, Action::Use(3), 1.0)] };
        assert!(matches!(validate(&plan, &prof, &p), Err(ValidationError::MalformedPlan(_))));
    }

    #[test]
    fn trace_times_increase() {
        let p = [BatteryParams::b1(), BatteryParams::b1()];
        let prof = LoadProfile::new(vec![(0.5, 0.25), (0.5, 0.5)], true).unwrap();
        let plan = Plan { steps: vec![step(0.0, Action::Use(0), 0.75), step(0.75, Action::Use(1), 1.0)] };
        let rep = validate(&plan, &prof, &p).unwrap();
        assert!(rep.is_valid());
        assert!(rep.trace.windows(2).all(|w| w[0].time < w[1].time));
        let csv = rep.trace_csv();
        assert!(csv.starts_with("time,battery,delta,gamma,event\n"));
        assert_eq!(csv.lines().count(), 1 + 2 * rep.trace.len());
    }

    #[test]
    fn coarse_grid_needs_one_refinement() {
        let p = [BatteryParams::b1(), BatteryParams::b1()];
        let prof = LoadProfile::new(vec![(0.95, 0.0), (0.05, 0.25)], false).unwrap();
        let cfg = SearchConfig::finish(DurationSet::new(vec![0.1, 0.2, 0.5]).unwrap());
        let res = plan_and_validate(&prof, &p, &cfg, 3).unwrap();
        assert_eq!(res.refinements_used, 1);
        assert!(res.report.is_valid());
        let res = plan_and_validate(&LoadProfile::new(vec![(1.0, 0.25)], false).unwrap(), &p, &cfg, 3).unwrap();
        assert_eq!(res.refinements_used, 0);
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(2.711033), "2.71103");
        assert_eq!(sig6(5.41), "5.41");
        assert_eq!(sig6(0.4356039), "0.435604");
    }
}
