//! Batch workflows: sample profiles, plan them, learn a policy, evaluate policies.

use rand::RngCore;
use rayon::prelude::*;

use crate::battery_model::BatteryParams;
use crate::learner::{extract_training, train, DecisionTree, FeatureLayout, LearnError, TrainingSet, TreeConfig};
use crate::load_profiles::{sample_profile, seeded_rng, LoadProfile, ProfileError, StochasticLoadModel};
use crate::planner::{search, DurationSet, PlanError, SearchConfig, SearchOutcome};
use crate::policies::{rollout, Policy, PolicyError, RolloutConfig, RolloutResult};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("profile {index}: {source}")]
    Plan { index: usize, source: PlanError },
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error("profile {index}: {source}")]
    Rollout { index: usize, source: PolicyError },
}

/// Seed stream for one purpose; training and held-out profiles never share seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPurpose {
    Training,
    Evaluation,
}

pub fn profile_seeds(seed: u64, purpose: SeedPurpose, count: usize) -> Vec<u64> {
    let stream = match purpose {
        SeedPurpose::Training => 10,
        SeedPurpose::Evaluation => 11,
    };
    let mut rng = seeded_rng(seed, stream);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Profile length long enough that the batteries are expected to run flat:
/// four times the total capacity over the model's mean current.
pub fn default_profile_length(model: &StochasticLoadModel, params: &[BatteryParams]) -> f64 {
    let total: f64 = params.iter().map(|p| p.capacity()).sum();
    let mean_current = model.load_prob * model.amplitude.mean();
    if mean_current > 0.0 {
        (4.0 * total / mean_current).max(60.0)
    } else {
        60.0
    }
}

pub fn sample_profiles(model: &StochasticLoadModel, length: f64, seeds: &[u64]) -> Result<Vec<LoadProfile>, ProfileError> {
    seeds.iter().map(|&s| sample_profile(&model.with_seed(s), length)).collect()
}

/// Lifetime-maximising plans, one per profile, computed in parallel.
pub fn plan_profiles(
    profiles: &[LoadProfile],
    params: &[BatteryParams],
    config: &SearchConfig,
) -> Result<Vec<SearchOutcome>, PipelineError> {
    profiles
        .par_iter()
        .enumerate()
        .map(|(index, p)| search(p, params, config).map_err(|source| PipelineError::Plan { index, source }))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub params: Vec<BatteryParams>,
    pub durations: DurationSet,
    pub model: StochasticLoadModel,
    /// Minutes per sampled profile; `None` picks [`default_profile_length`].
    pub profile_length: Option<f64>,
    pub plans: usize,
    pub increment: f64,
    pub tree: TreeConfig,
    pub one_hot_active: bool,
    pub seed: u64,
}

impl TrainingConfig {
    pub fn new(params: Vec<BatteryParams>) -> Self {
        Self {
            params,
            durations: DurationSet::default_set(),
            model: StochasticLoadModel::default(),
            profile_length: None,
            plans: 50,
            increment: 0.01,
            tree: TreeConfig::default(),
            one_hot_active: false,
            seed: 42,
        }
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout { batteries: self.params.len(), one_hot_active: self.one_hot_active }
    }

    pub fn length(&self) -> f64 {
        self.profile_length.unwrap_or_else(|| default_profile_length(&self.model, &self.params))
    }
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub profiles: Vec<LoadProfile>,
    pub outcomes: Vec<SearchOutcome>,
    pub data: TrainingSet,
    pub tree: DecisionTree,
}

/// Samples training profiles, plans each, extracts rows and grows a tree.
pub fn build_dataset(cfg: &TrainingConfig) -> Result<(Vec<LoadProfile>, Vec<SearchOutcome>, TrainingSet), PipelineError> {
    let seeds = profile_seeds(cfg.seed, SeedPurpose::Training, cfg.plans);
    let profiles = sample_profiles(&cfg.model, cfg.length(), &seeds)?;
    let search_cfg = SearchConfig { durations: cfg.durations.clone(), ..SearchConfig::default() };
    let outcomes = plan_profiles(&profiles, &cfg.params, &search_cfg)?;
    let pairs: Vec<_> = outcomes.iter().zip(&profiles).map(|(o, p)| (o.plan.clone(), p.clone())).collect();
    let data = extract_training(&pairs, &cfg.params, cfg.increment, cfg.layout())?;
    Ok((profiles, outcomes, data))
}

pub fn train_policy(cfg: &TrainingConfig) -> Result<TrainingRun, PipelineError> {
    let (profiles, outcomes, data) = build_dataset(cfg)?;
    let tree = train(&data, &cfg.tree)?;
    Ok(TrainingRun { profiles, outcomes, data, tree })
}

/// Rolls out a fresh policy from `make` on every profile, in parallel.
pub fn evaluate<F>(
    make: F,
    profiles: &[LoadProfile],
    params: &[BatteryParams],
    cfg: &RolloutConfig,
) -> Result<Vec<RolloutResult>, PipelineError>
where
    F: Fn() -> Box<dyn Policy + Send> + Sync,
{
    profiles
        .par_iter()
        .enumerate()
        .map(|(index, p)| {
            let mut policy = make();
            rollout(policy.as_mut(), p, params, cfg).map_err(|source| PipelineError::Rollout { index, source })
        })
        .collect()
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary { mean: f64::NAN, sd: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Summary { mean, sd }
}
