use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};

use kibam_core::battery_model::{single_equivalent_lifetime, BatteryParams};
use kibam_core::learner::{cross_validate, DecisionTree, FeatureLayout, LearnError, PlanBasedPolicy, Threshold, TreeConfig};
use kibam_core::load_profiles::{Benchmark, LoadProfile};
use kibam_core::pipeline::{
    default_profile_length, evaluate, profile_seeds, sample_profiles, summarize, train_policy, SeedPurpose, Summary, TrainingConfig,
};
use kibam_core::planner::{fmt_minutes, DurationSet, Goal, Plan, SearchConfig, SearchOutcome};
use kibam_core::policies::{BuiltinPolicy, Policy, RolloutConfig, RolloutResult};
use kibam_core::soc_estimator::{
    estimates_to_csv, samples_from_csv, samples_to_csv, simulate_sensor_trace, CapacityParams, SocConfig, SocEstimator, VoltageParams,
};
use kibam_core::validator::{plan_and_validate, validate};

use crate::settings::{parse_batteries, parse_model, usage, Settings};

/// Options shared by most commands; each can also come from the settings file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Battery bank, `<n>x<B1|B2|custom:C,c,kprime>` [default: 2xB1]
    #[arg(long)]
    pub batteries: Option<String>,
    /// Comma-separated step durations in minutes [default: 0.01,0.1,0.5,1]
    #[arg(long)]
    pub durations: Option<String>,
    /// Decision period for policy rollouts, minutes [default: 0.01]
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Source {
    /// Built-in benchmark profile, e.g. CL_250
    #[arg(long, conflicts_with = "profile")]
    pub benchmark: Option<String>,
    /// Profile file (`#repeat=true|false` header, then `duration,current` lines)
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GoalArg {
    Lifetime,
    Finish,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: Source,
    #[arg(long, value_enum)]
    pub goal: Option<GoalArg>,
    /// Expanded-state budget per search
    #[arg(long)]
    pub node_budget: Option<usize>,
    /// Duration refinements allowed when a plan fails validation [default: 3]
    #[arg(long)]
    pub refinements: Option<usize>,
    /// Write the validation trace CSV here
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: Source,
    /// Plan file to check
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of sampled profiles to plan [default: 50]
    #[arg(long)]
    pub plans: Option<usize>,
    /// Load model: `default` or R100/R250/R500/R750
    #[arg(long)]
    pub model: Option<String>,
    /// Minutes per sampled profile [default: long enough to drain the bank]
    #[arg(long)]
    pub length: Option<f64>,
    /// Sampling increment along each plan, minutes [default: 0.01]
    #[arg(long)]
    pub increment: Option<f64>,
    /// Cross-validation folds; 0 skips [default: 10]
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub min_leaf: Option<usize>,
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Pessimistic pruning
    #[arg(long)]
    pub prune: bool,
    /// Encode the previously active battery as indicator columns
    #[arg(long)]
    pub one_hot: bool,
    /// Also write the training rows as CSV
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Learned policy file
    #[arg(long, conflicts_with = "builtin")]
    pub policy: Option<PathBuf>,
    /// Built-in policy: vmax, vmin, tmax, tmin, sequential [default: vmax]
    #[arg(long)]
    pub builtin: Option<String>,
    /// Profile files to evaluate on (instead of sampling)
    #[arg(long, num_args = 1..)]
    pub profiles: Vec<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    /// Sampled profiles when no files are given [default: 100]
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub length: Option<f64>,
    /// Also run a built-in policy on the same profiles and print ratios
    #[arg(long)]
    pub baseline: Option<String>,
    /// Decision period for the baseline [default: 0.005]
    #[arg(long)]
    pub baseline_delta: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[allow(clippy::enum_variant_names)]
pub enum Table {
    Table1,
    Table2,
    #[value(name = "table4-desk")]
    Table4Desk,
}

#[derive(Args, Debug)]
pub struct ReproduceArgs {
    #[arg(value_enum)]
    pub table: Table,
    /// table4-desk: add the 4-battery run and the 8-battery load families
    #[arg(long)]
    pub long: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub length: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum SocCommand {
    /// Simulated sensor trace of a lead-acid cell under a constant current
    Simulate {
        #[arg(long)]
        current: Option<f64>,
        /// Voltage noise standard deviation, volts
        #[arg(long)]
        noise: Option<f64>,
        /// Seconds between samples [default: 0.5]
        #[arg(long)]
        sample_period: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate log for a sensor trace CSV
    Estimate {
        #[arg(long)]
        trace: PathBuf,
        /// Internal resistance, ohms [default: 0.34]
        #[arg(long)]
        r_int: Option<f64>,
        /// Emit one estimate every this many samples [default: 1]
        #[arg(long)]
        every: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn write_stdout(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

macro_rules! say {
    ($($t:tt)*) => {
        write_stdout(&format!("{}\n", format_args!($($t)*)))
    };
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => write_stdout(text),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn batteries(s: &Settings, c: &Common) -> Result<Vec<BatteryParams>> {
    parse_batteries(&s.pick_or(c.batteries.clone(), "batteries", "2xB1".to_string())?)
}

fn durations(s: &Settings, c: &Common) -> Result<DurationSet> {
    match s.pick::<String>(c.durations.clone(), "durations")? {
        None => Ok(DurationSet::default_set()),
        Some(d) => d.parse().map_err(|e| usage(format!("--durations {d}: {e}"))),
    }
}

fn out_path(s: &Settings, c: &Common) -> Result<Option<PathBuf>> {
    s.pick(c.out.clone(), "out")
}

fn load_source(s: &Settings, src: &Source) -> Result<(String, LoadProfile)> {
    let bench: Option<String> = s.pick(src.benchmark.clone(), "benchmark")?;
    let file: Option<PathBuf> = s.pick(src.profile.clone(), "profile")?;
    match (bench, file) {
        (Some(b), None) => {
            let bench: Benchmark = b.parse().map_err(|e: kibam_core::load_profiles::ProfileError| usage(e.to_string()))?;
            Ok((bench.name().to_string(), bench.profile()))
        }
        (None, Some(f)) => {
            let profile = LoadProfile::parse(&read(&f)?).with_context(|| format!("parsing {}", f.display()))?;
            Ok((f.display().to_string(), profile))
        }
        (Some(_), Some(_)) => Err(usage("give either --benchmark or --profile, not both")),
        (None, None) => Err(usage("a load profile is required: --benchmark NAME or --profile FILE")),
    }
}

pub fn plan(s: &Settings, a: &PlanArgs) -> Result<()> {
    let params = batteries(s, &a.common)?;
    let (name, profile) = load_source(s, &a.source)?;
    let goal = match s.pick::<String>(a.goal.map(|g| format!("{g:?}").to_lowercase()), "goal")?.as_deref() {
        None | Some("lifetime") => Goal::MaximizeLifetime,
        Some("finish") => Goal::FinishProfile,
        Some(other) => return Err(usage(format!("goal '{other}': expected lifetime or finish"))),
    };
    let mut cfg = SearchConfig { durations: durations(s, &a.common)?, goal, ..SearchConfig::default() };
    cfg.node_budget = s.pick_or(a.node_budget, "node_budget", cfg.node_budget)?;
    let refinements = s.pick_or(a.refinements, "refinements", 3)?;

    let started = Instant::now();
    let refined = plan_and_validate(&profile, &params, &cfg, refinements).with_context(|| format!("planning {name}"))?;
    let wall = started.elapsed().as_secs_f64();
    let outcome = &refined.outcome;
    let bound = single_equivalent_lifetime(&params, &profile).ok();

    let mut summary = String::new();
    writeln!(summary, "profile: {name}")?;
    writeln!(summary, "lifetime: {}", fmt_minutes(outcome.lifetime))?;
    if let Some(b) = bound.filter(|b| b.is_finite()) {
        writeln!(summary, "upper_bound: {b:.4}")?;
    }
    writeln!(summary, "visited: {}", outcome.visited)?;
    writeln!(summary, "switches: {}", outcome.plan.switches())?;
    writeln!(summary, "refinements: {}", refined.refinements_used)?;
    writeln!(summary, "termination: {:?}", outcome.termination)?;
    eprintln!("wall_seconds: {wall:.3}");

    let out = out_path(s, &a.common)?;
    match out {
        Some(p) => {
            fs::write(&p, outcome.plan.render()).with_context(|| format!("writing {}", p.display()))?;
            write_stdout(&summary)?;
        }
        None => write_stdout(&format!("{summary}\n{}", outcome.plan.render()))?,
    }
    if let Some(t) = s.pick(a.trace.clone(), "trace")? {
        fs::write(&t, refined.report.trace_csv())?;
    }
    Ok(())
}

pub fn validate_cmd(s: &Settings, a: &ValidateArgs) -> Result<()> {
    let params = batteries(s, &a.common)?;
    let (_, profile) = load_source(s, &a.source)?;
    let plan_file: PathBuf = s.pick(a.plan.clone(), "plan")?.ok_or_else(|| usage("--plan FILE is required"))?;
    let plan = Plan::parse(&read(&plan_file)?).with_context(|| format!("parsing {}", plan_file.display()))?;
    let report = validate(&plan, &profile, &params)?;
    emit(out_path(s, &a.common)?.as_deref(), &report.render_text())?;
    if let Some(t) = s.pick(a.trace.clone(), "trace")? {
        fs::write(&t, report.trace_csv())?;
    }
    if let Some(v) = report.violations.first() {
        bail!("plan invalid: {:?} at {} (battery {})", v.kind, fmt_minutes(v.time), v.battery.map_or(0, |b| b + 1));
    }
    Ok(())
}

fn training_config(s: &Settings, a: &TrainArgs) -> Result<TrainingConfig> {
    let mut cfg = TrainingConfig::new(batteries(s, &a.common)?);
    cfg.durations = durations(s, &a.common)?;
    cfg.plans = s.pick_or(a.plans, "plans", cfg.plans)?;
    cfg.seed = s.pick_or(a.common.seed, "seed", cfg.seed)?;
    if let Some(m) = s.pick::<String>(a.model.clone(), "model")? {
        cfg.model = parse_model(&m)?;
    }
    cfg.profile_length = s.pick(a.length, "length")?;
    cfg.increment = s.pick_or(a.increment, "increment", cfg.increment)?;
    cfg.tree = TreeConfig {
        min_leaf: s.pick_or(a.min_leaf, "min_leaf", cfg.tree.min_leaf)?,
        max_depth: s.pick_or(a.max_depth, "max_depth", cfg.tree.max_depth)?,
        prune: s.switch(a.prune, "prune")?,
        ..cfg.tree
    };
    cfg.one_hot_active = s.switch(a.one_hot, "one_hot")?;
    if cfg.plans == 0 {
        return Err(usage("--plans must be at least 1"));
    }
    Ok(cfg)
}

pub fn train(s: &Settings, a: &TrainArgs) -> Result<()> {
    let cfg = training_config(s, a)?;
    let folds = s.pick_or(a.folds, "folds", 10)?;
    let run = train_policy(&cfg)?;
    if cfg.plans < 5 || run.data.len() < 1000 {
        eprintln!("warning: tiny training set ({} plans, {} rows); the tree will generalise poorly", cfg.plans, run.data.len());
    }
    say!("plans: {}", cfg.plans)?;
    say!("rows: {}", run.data.len())?;
    say!("depth: {}", run.tree.depth())?;
    say!("nodes: {}", run.tree.node_count())?;
    if folds > 0 {
        match cross_validate(&run.data, folds, &cfg.tree, cfg.seed) {
            Ok(acc) => say!("cv_accuracy: {acc:.4}")?,
            Err(LearnError::TooFewRows { rows, folds }) => eprintln!("warning: {rows} rows are too few for {folds}-fold cross-validation"),
            Err(e) => return Err(e.into()),
        }
    }
    if let Some(p) = s.pick::<PathBuf>(a.data.clone(), "data")? {
        fs::write(&p, run.data.to_csv())?;
    }
    emit(out_path(s, &a.common)?.as_deref(), &run.tree.render())
}

/// Reads a tree file, accepting either encoding of the active-battery feature.
pub fn load_tree(path: &Path, n: usize) -> Result<DecisionTree> {
    let text = read(path)?;
    let plain = FeatureLayout::new(n);
    match DecisionTree::parse(&text, plain) {
        Ok(t) => Ok(t),
        Err(first) => DecisionTree::parse(&text, FeatureLayout { batteries: n, one_hot_active: true })
            .map_err(|_| first)
            .with_context(|| format!("parsing {}", path.display())),
    }
}

fn builtin(name: &str) -> Result<BuiltinPolicy> {
    name.parse().map_err(|e: kibam_core::policies::PolicyError| usage(e.to_string()))
}

fn results_csv(results: &[RolloutResult]) -> (String, Summary, Summary) {
    let mut csv = String::from("profile,lifetime,switches,fallbacks\n");
    for (i, r) in results.iter().enumerate() {
        let _ = writeln!(csv, "{},{:.4},{},{}", i + 1, r.lifetime, r.switches, r.fallbacks);
    }
    let life = summarize(&results.iter().map(|r| r.lifetime).collect::<Vec<_>>());
    let sw = summarize(&results.iter().map(|r| r.switches as f64).collect::<Vec<_>>());
    if !results.is_empty() {
        let _ = writeln!(csv, "mean,{:.4},{:.2},", life.mean, sw.mean);
        let _ = writeln!(csv, "sd,{:.4},{:.2},", life.sd, sw.sd);
    }
    (csv, life, sw)
}

pub fn eval(s: &Settings, a: &EvalArgs) -> Result<()> {
    let params = batteries(s, &a.common)?;
    let delta = s.pick_or(a.common.delta, "delta", 0.01)?;
    let profiles: Vec<LoadProfile> = if a.profiles.is_empty() {
        let model = match s.pick::<String>(a.model.clone(), "model")? {
            Some(m) => parse_model(&m)?,
            None => kibam_core::load_profiles::StochasticLoadModel::default(),
        };
        let count = s.pick_or(a.count, "count", 100)?;
        let seed = s.pick_or(a.common.seed, "seed", 42)?;
        let length = s.pick(a.length, "length")?.unwrap_or_else(|| default_profile_length(&model, &params));
        sample_profiles(&model, length, &profile_seeds(seed, SeedPurpose::Evaluation, count))?
    } else {
        a.profiles
            .iter()
            .map(|p| LoadProfile::parse(&read(p)?).with_context(|| format!("parsing {}", p.display())))
            .collect::<Result<_>>()?
    };

    let policy_file: Option<PathBuf> = s.pick(a.policy.clone(), "policy")?;
    let cfg = RolloutConfig::with_period(delta);
    let (label, results) = match policy_file {
        Some(f) => {
            let tree = load_tree(&f, params.len())?;
            let base = PlanBasedPolicy::new(tree, &params, Threshold::ChargePerPeriod { period: delta })?;
            ("learned".to_string(), evaluate(|| Box::new(base.clone()) as Box<dyn Policy + Send>, &profiles, &params, &cfg)?)
        }
        None => {
            let kind = builtin(&s.pick_or(a.builtin.clone(), "builtin", "vmax".to_string())?)?;
            (kind.name().to_string(), evaluate(|| Box::new(kind), &profiles, &params, &cfg)?)
        }
    };
    let (csv, life, sw) = results_csv(&results);
    emit(out_path(s, &a.common)?.as_deref(), &csv)?;
    if results.is_empty() {
        return Ok(());
    }
    eprintln!("{label}: time {:.2} ({:.2}) sw {:.1} ({:.1})", life.mean, life.sd, sw.mean, sw.sd);
    if let Some(b) = s.pick::<String>(a.baseline.clone(), "baseline")? {
        let kind = builtin(&b)?;
        let bd = s.pick_or(a.baseline_delta, "baseline_delta", 0.005)?;
        let base = evaluate(|| Box::new(kind), &profiles, &params, &RolloutConfig::with_period(bd))?;
        let (_, bl, bs) = results_csv(&base);
        eprintln!("{} (delta {bd}): time {:.2} ({:.2}) sw {:.1} ({:.1})", kind.name(), bl.mean, bl.sd, bs.mean, bs.sd);
        eprintln!("efficiency_ratio: {:.4}", life.mean / bl.mean);
        eprintln!("switch_ratio: {:.4}", sw.mean / bs.mean);
    }
    Ok(())
}

pub fn sample(s: &Settings, a: &SampleArgs) -> Result<()> {
    let params = batteries(s, &a.common)?;
    let model = match s.pick::<String>(a.model.clone(), "model")? {
        Some(m) => parse_model(&m)?,
        None => kibam_core::load_profiles::StochasticLoadModel::default(),
    };
    let seed = s.pick_or(a.common.seed, "seed", 42)?;
    let length = s.pick(a.length, "length")?.unwrap_or_else(|| default_profile_length(&model, &params));
    let profile = kibam_core::load_profiles::sample_profile(&model.with_seed(seed), length)?;
    emit(out_path(s, &a.common)?.as_deref(), &profile.render())
}

pub fn soc(s: &Settings, cmd: &SocCommand) -> Result<()> {
    let cp = CapacityParams::lead_acid();
    let vp = VoltageParams::lead_acid();
    match cmd {
        SocCommand::Simulate { current, noise, sample_period, seed, out } => {
            let current = s.pick_or(*current, "current", 0.208)?;
            let noise = s.pick_or(*noise, "noise", 0.0)?;
            let period = s.pick_or(*sample_period, "sample_period", 0.5)?;
            let seed = s.pick_or(*seed, "seed", 42)?;
            let r_int = s.pick_or(None, "r_int", SocConfig::default().r_int)?;
            let profile = LoadProfile::constant(current)?;
            let trace = simulate_sensor_trace(&cp, &vp, r_int, &profile, noise, period, seed)?;
            emit(s.pick(out.clone(), "out")?.as_deref(), &samples_to_csv(&trace))
        }
        SocCommand::Estimate { trace, r_int, every, out } => {
            let cfg = SocConfig { r_int: s.pick_or(*r_int, "r_int", SocConfig::default().r_int)?, ..SocConfig::default() };
            let every = s.pick_or(*every, "every", 1)?.max(1);
            let samples = samples_from_csv(&read(trace)?).with_context(|| format!("parsing {}", trace.display()))?;
            let mut est = SocEstimator::new(cp, vp, cfg)?;
            let mut log = Vec::new();
            for (k, smp) in samples.iter().enumerate() {
                est.push(*smp)?;
                if k % every == 0 {
                    if let Ok(e) = est.estimate() {
                        log.push(e);
                    }
                }
            }
            emit(s.pick(out.clone(), "out")?.as_deref(), &estimates_to_csv(&log))
        }
    }
}

const B1_BOUNDS: [f64; 8] = [12.16, 4.59, 7.03, 44.79, 10.82, 16.95, 84.91, 21.86];
const B2_BOUNDS: [f64; 8] = [46.92, 12.16, 21.26, 132.8, 44.79, 72.75, 216.9, 84.91];
const B1_PLANS: [f64; 8] = [12.14, 4.59, 7.03, 44.76, 10.8, 16.92, 84.88, 21.85];
const B2_PLANS: [f64; 8] = [46.91, 12.14, 21.2, 132.7, 44.76, 72.55, 216.8, 84.88];
const EIGHT_B2_BOUNDS: [f64; 8] = [310.6, 134.7, 192.8, 660.7, 308.7, 424.8, 1008.9, 480.9];
const EIGHT_B2_PLANS: [f64; 8] = [307.6, 133.4, 190.8, 654.1, 305.7, 420.6, 998.8, 476.1];

fn rel(computed: f64, published: f64) -> String {
    format!("{:+.2}%", 100.0 * (computed / published - 1.0))
}

fn plan_benchmark(b: Benchmark, params: &[BatteryParams], durations: &DurationSet) -> Result<SearchOutcome> {
    let cfg = SearchConfig { durations: durations.clone(), ..SearchConfig::default() };
    Ok(plan_and_validate(&b.profile(), params, &cfg, 3).with_context(|| format!("planning {}", b.name()))?.outcome)
}

/// Bank label, batteries, published bounds and published plan lifetimes.
type Setup = (&'static str, Vec<BatteryParams>, &'static [f64; 8], &'static [f64; 8]);

pub fn reproduce(s: &Settings, a: &ReproduceArgs) -> Result<()> {
    let durations = durations(s, &a.common)?;
    let mut out = String::new();
    match a.table {
        Table::Table1 | Table::Table2 => {
            let setups: Vec<Setup> = if a.table == Table::Table1 {
                vec![
                    ("2xB1", vec![BatteryParams::b1(); 2], &B1_BOUNDS, &B1_PLANS),
                    ("2xB2", vec![BatteryParams::b2(); 2], &B2_BOUNDS, &B2_PLANS),
                ]
            } else {
                vec![("8xB2", vec![BatteryParams::b2(); 8], &EIGHT_B2_BOUNDS, &EIGHT_B2_PLANS)]
            };
            writeln!(out, "profile,bank,published_bound,bound,bound_err,published_plan,plan,visited,plan_err,efficiency")?;
            for (bank, params, bounds, plans) in setups {
                for (i, b) in Benchmark::ALL.into_iter().enumerate() {
                    let bound = single_equivalent_lifetime(&params, &b.profile())?;
                    let mut row = format!("{},{bank},{},{bound:.2},{}", b.name(), bounds[i], rel(bound, bounds[i]));
                    let o = plan_benchmark(b, &params, &durations)?;
                    write!(row, ",{},{:.2},{},{},{:.4}", plans[i], o.lifetime, o.visited, rel(o.lifetime, plans[i]), o.lifetime / bound)?;
                    writeln!(out, "{row}")?;
                }
            }
        }
        Table::Table4Desk => {
            writeln!(out, "bank,model,profiles,learned_time,learned_sd,learned_sw,vmax_time,vmax_sd,vmax_sw,efficiency,switch_ratio")?;
            let mut runs: Vec<(usize, bool, String)> = vec![(2, false, "default".into())];
            if a.long {
                runs.push((4, false, "default".into()));
                for m in ["R100", "R250", "R500", "R750"] {
                    runs.push((8, true, m.into()));
                }
            }
            let seed = s.pick_or(a.common.seed, "seed", 42)?;
            for (n, b2, model_name) in runs {
                let params = vec![if b2 { BatteryParams::b2() } else { BatteryParams::b1() }; n];
                let mut cfg = TrainingConfig::new(params.clone());
                cfg.model = parse_model(&model_name)?;
                cfg.seed = seed;
                cfg.durations = durations.clone();
                let count = if n == 8 { 100 } else { 20 };
                let run = train_policy(&cfg)?;
                let profiles = sample_profiles(&cfg.model, cfg.length(), &profile_seeds(seed, SeedPurpose::Evaluation, count))?;
                let learned = PlanBasedPolicy::new(run.tree, &params, Threshold::ChargePerPeriod { period: 0.01 })?;
                let lr = evaluate(|| Box::new(learned.clone()) as Box<dyn Policy + Send>, &profiles, &params, &RolloutConfig::with_period(0.01))?;
                let vr = evaluate(|| Box::new(BuiltinPolicy::Vmax), &profiles, &params, &RolloutConfig::with_period(0.005))?;
                let (_, ll, ls) = results_csv(&lr);
                let (_, vl, vs) = results_csv(&vr);
                writeln!(
                    out,
                    "{n}x{},{model_name},{count},{:.2},{:.2},{:.1},{:.2},{:.2},{:.1},{:.4},{:.4}",
                    if b2 { "B2" } else { "B1" },
                    ll.mean,
                    ll.sd,
                    ls.mean,
                    vl.mean,
                    vl.sd,
                    vs.mean,
                    ll.mean / vl.mean,
                    ls.mean / vs.mean
                )?;
            }
        }
    }
    emit(out_path(s, &a.common)?.as_deref(), &out)
}
