mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kibam_core::learner::LearnError;
use kibam_core::load_profiles::ProfileError;
use kibam_core::planner::PlanError;
use kibam_core::soc_estimator::SocError;
use kibam_core::validator::ValidationError;

use commands::*;
use settings::{Settings, Usage};

/// Multi-battery scheduling over the kinetic battery model.
#[derive(Parser, Debug)]
#[command(name = "kibam", version)]
struct Cli {
    /// Settings file of `key = value` lines; command-line flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Search for a battery schedule on one load profile
    Plan(PlanArgs),
    /// Replay a plan file and report violations
    Validate(ValidateArgs),
    /// Plan sampled profiles and learn a switching policy from them
    Train(TrainArgs),
    /// Roll out a learned or built-in policy over many profiles
    Eval(EvalArgs),
    /// Recompute the benchmark tables
    Reproduce(ReproduceArgs),
    /// Draw one stochastic load profile
    Sample(SampleArgs),
    /// State-of-charge estimation tools
    #[command(subcommand)]
    Soc(SocCommand),
}

/// 2 for bad invocations and unparsable inputs, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        let usage = cause.is::<Usage>()
            || matches!(cause.downcast_ref::<ProfileError>(), Some(ProfileError::Parse { .. } | ProfileError::UnknownBenchmark(_)))
            || matches!(cause.downcast_ref::<PlanError>(), Some(PlanError::Parse { .. } | PlanError::InvalidDurations(_)))
            || matches!(cause.downcast_ref::<LearnError>(), Some(LearnError::Parse { .. }))
            || matches!(cause.downcast_ref::<SocError>(), Some(SocError::Csv { .. }))
            || matches!(cause.downcast_ref::<ValidationError>(), Some(ValidationError::MalformedPlan(_)));
        if usage {
            return 2;
        }
    }
    1
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("KIBAM_THREADS") {
        let n: usize = v.parse().map_err(|_| settings::usage(format!("KIBAM_THREADS={v}: expected a positive integer")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let s = Settings::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Plan(a) => plan(&s, a),
        Command::Validate(a) => validate_cmd(&s, a),
        Command::Train(a) => train(&s, a),
        Command::Eval(a) => eval(&s, a),
        Command::Reproduce(a) => reproduce(&s, a),
        Command::Sample(a) => sample(&s, a),
        Command::Soc(c) => soc(&s, c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
