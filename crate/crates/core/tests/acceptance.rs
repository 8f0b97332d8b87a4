//! One pass/fail line per acceptance criterion. Exits non-zero if any criterion fails.
//! Set KIBAM_LONG=1 to add the 8-battery policy comparison (informational).

// `!(x <= tol)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::time::Instant;

use rand::Rng;

use kibam_core::battery_model::{advance, available_charge, evolve, single_equivalent_lifetime, BatteryParams, BatteryState};
use kibam_core::learner::{cross_validate, DecisionTree, FeatureLayout, PlanBasedPolicy, Threshold, TreeConfig, TreeNode};
use kibam_core::load_profiles::{seeded_rng, Benchmark, LoadProfile, StochasticLoadModel};
use kibam_core::pipeline::{evaluate, profile_seeds, sample_profiles, summarize, train_policy, SeedPurpose, TrainingConfig};
use kibam_core::planner::{search, Action, DurationSet, Plan, PlanStep, SearchConfig, SearchOutcome};
use kibam_core::policies::{BuiltinPolicy, Policy, RolloutConfig};
use kibam_core::soc_estimator::{
    invert_voltage, qmax, simulate_with_truth, solve_t_nom, CapacityParams, SocConfig, SocEstimator, VoltageParams,
};
use kibam_core::validator::{validate, ViolationKind};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn within(x: f64, target: f64, rel: f64) -> bool {
    (x / target - 1.0).abs() <= rel
}

fn dynamics_golden() -> Outcome {
    let p = BatteryParams::b1();
    // The happening covers 0.1 min: b1 rests, b2 carries 0.3 A.
    let b1 = evolve(&BatteryState { delta: 2.74431, gamma: 5.0 }, &p, 0.0, 0.1);
    let b2 = match advance(&BatteryState { delta: 0.259121, gamma: 5.44 }, &p, 0.3, 0.1) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("advance failed: {e}")),
    };
    let checks = [("delta b1", b1.delta, 2.71104), ("delta b2", b2.delta, 0.435604), ("gamma b2", b2.gamma, 5.41)];
    let ok = checks.iter().all(|(_, got, want)| (got - want).abs() <= 1e-5);
    let detail = checks.iter().map(|(n, got, want)| format!("{n} {got:.6} (want {want})")).collect::<Vec<_>>().join(", ");
    outcome(ok, detail)
}

fn upper_bounds() -> Outcome {
    let b1 = [12.16, 4.59, 7.03, 44.79, 10.82, 16.95, 84.91, 21.86];
    let b2 = [46.92, 12.16, 21.26, 132.8, 44.79, 72.75, 216.9, 84.91];
    let b8 = [310.6, 134.7, 192.8, 660.7, 308.7, 424.8, 1008.9, 480.9];
    let mut misses = Vec::new();
    let mut checked = 0;
    for (bank, params, table) in [
        ("2xB1", vec![BatteryParams::b1(); 2], b1),
        ("2xB2", vec![BatteryParams::b2(); 2], b2),
        ("8xB2", vec![BatteryParams::b2(); 8], b8),
    ] {
        for (b, want) in Benchmark::ALL.into_iter().zip(table) {
            let got = single_equivalent_lifetime(&params, &b.profile()).unwrap_or(f64::NAN);
            checked += 1;
            if !within(got, want, 0.01) {
                misses.push(format!("{bank} {} {got:.3} vs {want} ({:+.2}%)", b.name(), 100.0 * (got / want - 1.0)));
            }
        }
    }
    if misses.is_empty() {
        outcome(true, format!("{checked} bounds within 1%"))
    } else {
        outcome(false, format!("{}/{checked} outside 1%: {}", misses.len(), misses.join("; ")))
    }
}

fn benchmark_plans(params: &[BatteryParams]) -> Vec<(Benchmark, SearchOutcome, f64)> {
    Benchmark::ALL
        .into_iter()
        .map(|b| {
            let started = Instant::now();
            let o = search(&b.profile(), params, &SearchConfig::default()).expect("benchmark plans exist");
            (b, o, started.elapsed().as_secs_f64())
        })
        .collect()
}

fn planner_efficiency() -> Outcome {
    let params = vec![BatteryParams::b1(); 2];
    let mut worst = String::new();
    let mut ok = true;
    let mut parts = Vec::new();
    for (b, o, secs) in benchmark_plans(&params) {
        let bound = single_equivalent_lifetime(&params, &b.profile()).unwrap();
        let need = if b.name().starts_with("CL") { 0.99 } else { 0.98 };
        let eff = o.lifetime / bound;
        if eff < need || secs > 60.0 {
            ok = false;
            worst.push_str(&format!(" {} {eff:.4} in {secs:.2}s;", b.name()));
        }
        parts.push(format!("{} {:.2}/{:.2}", b.name(), o.lifetime, bound));
    }
    outcome(ok, if ok { parts.join(", ") } else { format!("below target:{worst}") })
}

fn mixed_duration_instance() -> (LoadProfile, Vec<BatteryParams>) {
    let profile = LoadProfile::new(vec![(1.0, 0.0), (1.0, 0.5), (0.4, 0.0), (0.02, 6.0)], false).unwrap();
    let params = vec![BatteryParams::new(2.0, 0.166, 0.122).unwrap(), BatteryParams::new(2.8, 0.166, 0.122).unwrap()];
    (profile, params)
}

fn variable_discretisation() -> Outcome {
    let (profile, params) = mixed_duration_instance();
    let run = |d: DurationSet| search(&profile, &params, &SearchConfig::finish(d)).map(|o| o.visited);
    let mixed = run(DurationSet::new(vec![0.01, 0.4, 0.5, 1.0]).unwrap());
    let uniform = run(DurationSet::uniform(0.01).unwrap());
    match (mixed, uniform) {
        (Ok(m), Ok(u)) => outcome(m <= 10 && u >= 242, format!("variable set visits {m}, uniform 0.01 visits {u}")),
        (m, u) => outcome(false, format!("search failed: {m:?} / {u:?}")),
    }
}

/// Death time of battery `b` carrying every load from `start`, found by scanning the
/// available charge and bisecting the first sign change.
fn death_oracle(states: &[BatteryState], params: &[BatteryParams], b: usize, profile: &LoadProfile, start: f64) -> f64 {
    let p = &params[b];
    let mut s = states[b];
    let mut t = start;
    let step: f64 = 1e-3;
    loop {
        let load = profile.current_at(t).unwrap();
        let next_change = profile.next_change_after(t).unwrap();
        let h = step.min(next_change - t);
        let n = evolve(&s, p, load, h);
        if available_charge(&n, p) <= 0.0 {
            let (mut lo, mut hi) = (0.0, h);
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if available_charge(&evolve(&s, p, load, mid), p) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return t + 0.5 * (lo + hi);
        }
        s = n;
        t += h;
    }
}

/// Exact battery states at the start of step `k`.
fn states_before(plan: &Plan, k: usize, profile: &LoadProfile, params: &[BatteryParams]) -> Vec<BatteryState> {
    let mut states: Vec<BatteryState> = params.iter().map(|p| p.fresh_state()).collect();
    for step in &plan.steps[..k] {
        for (a, b, load) in profile.pieces(step.start, step.end()).unwrap() {
            for (i, s) in states.iter_mut().enumerate() {
                let cur = if step.action == Action::Use(i) { load } else { 0.0 };
                *s = evolve(s, &params[i], cur, b - a);
            }
        }
    }
    states
}

fn validator_soundness() -> Outcome {
    let mut valid = 0;
    let mut total = 0;
    let mut rejected = 0;
    let mut corrupted = 0;
    let mut worst_gap: f64 = 0.0;
    let mut failures = Vec::new();
    for params in [vec![BatteryParams::b1(); 2], vec![BatteryParams::b2(); 2], vec![BatteryParams::b2(); 8]] {
        for (b, o, _) in benchmark_plans(&params) {
            let profile = b.profile();
            total += 1;
            match validate(&o.plan, &profile, &params) {
                Ok(r) if r.is_valid() => valid += 1,
                other => failures.push(format!("{} plan rejected: {:?}", b.name(), other.map(|r| r.violations))),
            }
            for battery in 0..params.len() {
                let Some(k) = o.plan.steps.iter().position(|s| s.action == Action::Use(battery)) else { continue };
                let start = o.plan.steps[k].start;
                let states = states_before(&o.plan, k, &profile, &params);
                let death = death_oracle(&states, &params, battery, &profile, start);
                let mut steps = o.plan.steps[..k].to_vec();
                steps.push(PlanStep { start, action: Action::Use(battery), duration: 2.0 * (death - start) });
                corrupted += 1;
                let report = validate(&Plan { steps }, &profile, &params).unwrap();
                let hit = report.violations.iter().find(|v| v.kind == ViolationKind::BatteryDeadDuringUse);
                match hit {
                    Some(v) => {
                        let gap = (v.time - death).abs();
                        worst_gap = worst_gap.max(gap);
                        if gap <= 1e-4 {
                            rejected += 1;
                        } else {
                            failures.push(format!("{} b{}: reported {} vs oracle {death}", b.name(), battery + 1, v.time));
                        }
                    }
                    None => failures.push(format!("{} b{}: corruption not detected", b.name(), battery + 1)),
                }
            }
        }
    }
    let ok = valid == total && rejected == corrupted;
    let mut detail = format!("{valid}/{total} plans valid, {rejected}/{corrupted} corruptions caught (worst time gap {worst_gap:.2e} min)");
    if !failures.is_empty() {
        detail.push_str(&format!("; {}", failures.join("; ")));
    }
    outcome(ok, detail)
}

fn two_battery_training() -> kibam_core::pipeline::TrainingRun {
    train_policy(&TrainingConfig::new(vec![BatteryParams::b1(); 2])).expect("training pipeline")
}

fn learner_quality(run: &kibam_core::pipeline::TrainingRun) -> Outcome {
    let started = Instant::now();
    let acc = cross_validate(&run.data, 10, &TreeConfig::default(), 1).unwrap_or(f64::NAN);
    let secs = started.elapsed().as_secs_f64();
    let rows = run.data.len();
    outcome(rows >= 10_000 && acc >= 0.95 && secs < 300.0, format!("10-fold accuracy {acc:.4} on {rows} rows ({secs:.1}s)"))
}

fn compare_policies(params: &[BatteryParams], tree: DecisionTree, model: &StochasticLoadModel, length: f64, count: usize, seed: u64) -> (f64, f64, f64, f64) {
    let profiles = sample_profiles(model, length, &profile_seeds(seed, SeedPurpose::Evaluation, count)).unwrap();
    let learned = PlanBasedPolicy::new(tree, params, Threshold::ChargePerPeriod { period: 0.01 }).unwrap();
    let lr = evaluate(|| Box::new(learned.clone()) as Box<dyn Policy + Send>, &profiles, params, &RolloutConfig::with_period(0.01)).unwrap();
    let vr = evaluate(|| Box::new(BuiltinPolicy::Vmax), &profiles, params, &RolloutConfig::with_period(0.005)).unwrap();
    let mean = |v: Vec<f64>| summarize(&v).mean;
    (
        mean(lr.iter().map(|r| r.lifetime).collect()),
        mean(vr.iter().map(|r| r.lifetime).collect()),
        mean(lr.iter().map(|r| r.switches as f64).collect()),
        mean(vr.iter().map(|r| r.switches as f64).collect()),
    )
}

fn policy_efficiency(run2: &kibam_core::pipeline::TrainingRun) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let cfg4 = TrainingConfig::new(vec![BatteryParams::b1(); 4]);
    let run4 = train_policy(&cfg4).expect("training pipeline");
    let cfg2 = TrainingConfig::new(vec![BatteryParams::b1(); 2]);
    for (cfg, tree) in [(&cfg2, run2.tree.clone()), (&cfg4, run4.tree)] {
        let (lt, vt, ls, vs) = compare_policies(&cfg.params, tree, &cfg.model, cfg.length(), 20, cfg.seed);
        let (eff, sw) = (lt / vt, ls / vs);
        ok &= eff >= 0.97 && sw <= 0.20;
        parts.push(format!("{}xB1 lifetime {lt:.2} vs Vmax {vt:.2} ({:.2}%), switches {ls:.1} vs {vs:.1} ({:.2}%)", cfg.params.len(), 100.0 * eff, 100.0 * sw));
    }
    if std::env::var("KIBAM_LONG").is_ok_and(|v| v == "1") {
        let mut cfg8 = TrainingConfig::new(vec![BatteryParams::b2(); 8]);
        cfg8.model = StochasticLoadModel::named("R250").unwrap();
        let run8 = train_policy(&cfg8).expect("training pipeline");
        let (lt, vt, ls, vs) = compare_policies(&cfg8.params, run8.tree, &cfg8.model, cfg8.length(), 100, cfg8.seed);
        parts.push(format!("[info] 8xB2 R250 lifetime {lt:.1} vs {vt:.1}, switches {ls:.0} vs {vs:.0}"));
    }
    outcome(ok, parts.join("; "))
}

fn random_tree(rng: &mut impl Rng, depth: usize, arity: usize, classes: u32) -> TreeNode {
    if depth == 0 || rng.random_bool(0.25) {
        return TreeNode::Leaf { class: rng.random_range(1..=classes) };
    }
    let threshold = match rng.random_range(0..3) {
        0 => rng.random_range(-10.0..10.0),
        1 => rng.random_range(-1e-6..1e-6),
        _ => (rng.random_range(0..100) as f64) / 100.0,
    };
    TreeNode::Split {
        feature: rng.random_range(0..arity),
        threshold,
        left: Box::new(random_tree(rng, depth - 1, arity, classes)),
        right: Box::new(random_tree(rng, depth - 1, arity, classes)),
    }
}

fn property_suites() -> Outcome {
    let mut rng = seeded_rng(8, 0);
    let mut failures = Vec::new();
    let (mut conservation, mut semigroup, mut euler) = (0, 0, 0);
    for _ in 0..10_000 {
        let p = BatteryParams::new(rng.random_range(1.0..20.0), rng.random_range(0.05..0.95), rng.random_range(0.01..1.0)).unwrap();
        let s = BatteryState { delta: rng.random_range(0.0..2.0), gamma: rng.random_range(0.5..1.0) * p.capacity() };
        let i = rng.random_range(0.0..1.0);
        let (t1, t2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let e = evolve(&s, &p, i, t1);
        if (e.available(&p) + e.bound(&p) - e.gamma).abs() > 1e-9 || (e.gamma - (s.gamma - i * t1)).abs() > 1e-12 {
            conservation += 1;
        }
        let two = evolve(&evolve(&s, &p, i, t1), &p, i, t2);
        let one = evolve(&s, &p, i, t1 + t2);
        if (two.delta - one.delta).abs() > 1e-9 * (1.0 + one.delta.abs()) || (two.gamma - one.gamma).abs() > 1e-9 {
            semigroup += 1;
        }
        // Forward Euler on dδ/dt = i/c − k′δ, dγ/dt = −i, Richardson-extrapolated
        // from step sizes h and h/2 to cancel the first-order truncation error.
        let euler_run = |steps: usize| {
            let h = t1 / steps as f64;
            let (mut d, mut g) = (s.delta, s.gamma);
            for _ in 0..steps {
                d += h * (i / p.fraction_c() - p.rate_k_prime() * d);
                g -= h * i;
            }
            (d, g)
        };
        let (coarse, fine) = (euler_run(5_000), euler_run(10_000));
        let (d, g) = (2.0 * fine.0 - coarse.0, 2.0 * fine.1 - coarse.1);
        if (d - e.delta).abs() > 1e-5 || (g - e.gamma).abs() > 1e-5 {
            euler += 1;
        }
    }
    for (name, n) in [("conservation", conservation), ("semigroup", semigroup), ("euler", euler)] {
        if n > 0 {
            failures.push(format!("{name}: {n} cases"));
        }
    }

    let cp = CapacityParams::lead_acid();
    let (cap, c) = (cp.capacity(), cp.fraction_c());
    if !((qmax(&cp, 1e6).unwrap() - cap).abs() < 1e-3 && (qmax(&cp, 1e-6).unwrap() - c * cap).abs() < 1e-3) {
        failures.push("qmax limits".into());
    }
    let vp = VoltageParams::lead_acid();
    let worst_v = (0..100)
        .map(|k| {
            let x = k as f64 / 99.0;
            let v = vp.a * x + vp.b * x / (vp.d - x);
            (invert_voltage(&vp, v).unwrap_or(f64::NAN) - x).abs()
        })
        .fold(0.0, f64::max);
    if !(worst_v <= 1e-9) {
        failures.push(format!("voltage roundtrip {worst_v:e}"));
    }
    let worst_t = (0..50)
        .map(|k| {
            let t = 0.25 + (20.0 - 0.25) * k as f64 / 49.0;
            let q = 0.1 * t;
            let x = q / qmax(&cp, t).unwrap();
            (solve_t_nom(&cp, x, q).unwrap_or(f64::NAN) - t).abs()
        })
        .fold(0.0, f64::max);
    if !(worst_t <= 1e-6) {
        failures.push(format!("T_nom roundtrip {worst_t:e}"));
    }

    let layout = FeatureLayout::new(3);
    let mut mismatches = 0;
    for _ in 0..100 {
        let tree = DecisionTree { layout, root: random_tree(&mut rng, 8, layout.arity(), 3) };
        let back = DecisionTree::parse(&tree.render(), layout);
        let Ok(back) = back else {
            mismatches += 100;
            continue;
        };
        for _ in 0..100 {
            let x: Vec<f64> = (0..layout.arity()).map(|_| rng.random_range(-10.0..10.0)).collect();
            if tree.predict(&x).unwrap() != back.predict(&x).unwrap() {
                mismatches += 1;
            }
        }
    }
    if mismatches > 0 {
        failures.push(format!("tree roundtrip: {mismatches} mismatches"));
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            format!("10000 dynamics cases, qmax limits, voltage grid {worst_v:.1e}, T_nom grid {worst_t:.1e}, 10000 tree inputs")
        } else {
            failures.join("; ")
        },
    )
}

fn closed_loop_soc() -> Outcome {
    let cp = CapacityParams::lead_acid();
    let vp = VoltageParams::lead_acid();
    let prof = LoadProfile::constant(0.208).unwrap();
    let run = |noise: f64, seed: u64| {
        let tr = simulate_with_truth(&cp, &vp, 0.34, &prof, noise, 0.5, seed).unwrap();
        let mut est = SocEstimator::new(cp, vp, SocConfig::default()).unwrap();
        let mut errs = Vec::new();
        let mut fallbacks = 0;
        for (k, s) in tr.iter().enumerate() {
            est.push(s.sample).unwrap();
            if k % 72 != 0 || s.x >= 0.9 {
                continue;
            }
            if let Ok(e) = est.estimate() {
                if e.fallback {
                    fallbacks += 1;
                } else {
                    errs.push((e.available - s.available).abs() / s.available);
                }
            }
        }
        (errs, fallbacks)
    };
    let (clean, clean_fb) = run(0.0, 1);
    let clean_max = clean.iter().cloned().fold(0.0, f64::max);
    let (noisy, noisy_fb) = run(0.02, 7);
    let noisy_mean = noisy.iter().sum::<f64>() / noisy.len() as f64;
    let fb_share = noisy_fb as f64 / (noisy.len() + noisy_fb) as f64;
    let ok = clean_fb == 0 && clean_max <= 0.02 && noisy_mean <= 0.05 && fb_share <= 0.05;
    outcome(
        ok,
        format!(
            "noiseless max error {:.3}% over {} ticks; 0.02 V noise mean error {:.2}% ({:.1}% fallback ticks)",
            100.0 * clean_max,
            clean.len(),
            100.0 * noisy_mean,
            100.0 * fb_share
        ),
    )
}

fn main() {
    let mut all_ok = true;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let o = f();
        let secs = started.elapsed().as_secs_f64();
        all_ok &= o.passed;
        println!("criterion {n} {} {name} ({secs:.2}s): {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, "analytic dynamics golden", &mut dynamics_golden);
    report(2, "upper bounds", &mut upper_bounds);
    report(3, "planner efficiency", &mut planner_efficiency);
    report(4, "variable discretisation", &mut variable_discretisation);
    report(5, "validator soundness", &mut validator_soundness);
    let run2 = two_battery_training();
    report(6, "learner quality", &mut || learner_quality(&run2));
    report(7, "policy efficiency", &mut || policy_efficiency(&run2));
    report(8, "property suites", &mut property_suites);
    report(9, "closed-loop state of charge", &mut closed_loop_soc);
    if !all_ok {
        std::process::exit(1);
    }
}
