//! End-to-end runs: learn a model from simulated episodes, plan on it, and
//! evaluate the plan on the ground truth.

mod config;
mod sweep;

use std::time::Instant;

pub use config::{
    auto_delta_sub, auto_delta_tsr, geometric_floors, AutoTag, GeneratorConfig, GeometricTag, Pipeline, RunConfig,
    Tolerance, WeightFloor,
};
pub use sweep::{parse_grid, run_sweep, write_csv, SweepParam, SweepRecord, SweepSpec, CSV_HEADER};

use crate::design::{self, CoreSet};
use crate::error::{LmabError, Result, StageExt};
use crate::mle::{self, MleDataset, SpectralSource};
use crate::model::{
    exact_policy_value, monte_carlo_policy_value, CountingEnv, LmabInstance, Policy, PolicyTree,
    StationaryPolicy, Step,
};
use crate::moments::{self, BandSpec, LatentParams, MatchConfig, MomentTensor};
use crate::planning::{self, QmdpPolicy};
use crate::recover;
use crate::rng::derive_seed;
use crate::subspace;

const SUBSPACE_STREAM: u64 = 2;
const ESTIMATE_STREAM: u64 = 3;
const INIT_STREAM: u64 = 4;
const EVAL_STREAM: u64 = 5;
const SELECT_STREAM: u64 = 6;
const UCB_STREAM: u64 = 7;
const REFERENCE_STREAM: u64 = 8;

/// Highest moment order reported for likelihood-based fits.
const REPORT_ORDER: usize = 3;

/// How the final policy was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Planner {
    Exact,
    Qmdp,
    Stationary,
}

#[derive(Clone, Debug)]
pub enum FinalPolicy {
    Tree(PolicyTree),
    Qmdp(QmdpPolicy),
    Stationary(StationaryPolicy),
}

impl Policy for FinalPolicy {
    fn act(&self, history: &[Step]) -> usize {
        match self {
            FinalPolicy::Tree(p) => p.act(history),
            FinalPolicy::Qmdp(p) => p.act(history),
            FinalPolicy::Stationary(p) => p.act(history),
        }
    }

    fn depth(&self) -> Option<usize> {
        match self {
            FinalPolicy::Tree(p) => p.depth(),
            FinalPolicy::Qmdp(p) => p.depth(),
            FinalPolicy::Stationary(p) => p.depth(),
        }
    }
}

impl FinalPolicy {
    pub fn planner(&self) -> Planner {
        match self {
            FinalPolicy::Tree(_) => Planner::Exact,
            FinalPolicy::Qmdp(_) => Planner::Qmdp,
            FinalPolicy::Stationary(_) => Planner::Stationary,
        }
    }

    /// Tabulated form over `values` observation symbols and `horizon` steps.
    pub fn to_tree(&self, values: usize, horizon: usize) -> Result<PolicyTree> {
        match self {
            FinalPolicy::Tree(t) if t.depth() == Some(horizon) => Ok(t.clone()),
            other => PolicyTree::from_policy(other, values, horizon),
        }
    }
}

/// Episodes drawn from the environment, by stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EpisodeAccount {
    pub subspace: u64,
    pub estimation: u64,
    pub total: u64,
    /// Evaluation episodes spent choosing among weight floors; not training data.
    pub selection: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTiming {
    pub stage: &'static str,
    pub ms: f64,
}

/// Values of the ground truth used as yardsticks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct References {
    /// QMDP on the true model; exact when the policy tree is enumerable.
    pub genie: f64,
    pub genie_exact: bool,
    /// Exact optimum when the belief DP fits its guard.
    pub optimal: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    /// Row label; equals the pipeline name except for the tensor-only row.
    pub label: String,
    pub pipeline: Pipeline,
    pub seed: u64,
    pub horizon: usize,
    /// Monte Carlo episode value and its standard error.
    pub value: f64,
    pub value_stderr: f64,
    pub exact_value: Option<f64>,
    pub per_step_reward: f64,
    pub stderr: f64,
    pub references: References,
    pub wasserstein: Option<f64>,
    /// Sup-norm residual per moment order, starting at order 1.
    pub residuals: Vec<f64>,
    pub episodes: EpisodeAccount,
    pub timings: Vec<StageTiming>,
    pub wallclock_ms: f64,
    /// Fit carried no information from data.
    pub degenerate: bool,
    pub core_size: Option<usize>,
    pub clipped_mass: Option<f64>,
    pub w_min: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub fit_iterations: Option<usize>,
    pub model: Option<LmabInstance>,
    pub policy: FinalPolicy,
}

impl RunReport {
    pub fn planner(&self) -> Planner {
        self.policy.planner()
    }

    pub fn residual_max(&self) -> Option<f64> {
        self.residuals.iter().copied().reduce(f64::max)
    }

    /// Exact value when available, otherwise the Monte Carlo estimate.
    pub fn best_value(&self) -> f64 {
        self.exact_value.unwrap_or(self.value)
    }
}

struct Clock {
    enabled: bool,
    start: Instant,
    stage_start: Instant,
    timings: Vec<StageTiming>,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        let now = Instant::now();
        Clock { enabled, start: now, stage_start: now, timings: Vec::new() }
    }

    fn lap(&mut self, stage: &'static str) {
        let now = Instant::now();
        let ms = if self.enabled { (now - self.stage_start).as_secs_f64() * 1e3 } else { 0.0 };
        self.timings.push(StageTiming { stage, ms });
        self.stage_start = now;
    }

    fn total_ms(&self) -> f64 {
        if self.enabled {
            self.start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        }
    }
}

/// Value of `policy` on `truth`: Monte Carlo (mean, stderr) and exact value if enumerable.
pub fn evaluate_policy(
    truth: &LmabInstance,
    policy: &dyn Policy,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64, Option<f64>)> {
    let exact = match exact_policy_value(truth, policy) {
        Ok(v) => Some(v),
        Err(LmabError::GuardExceeded { .. }) => None,
        Err(e) => return Err(e),
    };
    if episodes == 0 {
        let v = exact.ok_or_else(|| LmabError::Config("eval_episodes = 0 needs an enumerable policy".into()))?;
        return Ok((v, 0.0, exact));
    }
    let (mean, se) = monte_carlo_policy_value(truth, policy, episodes, seed);
    Ok((mean, se, exact))
}

/// Genie and optimal values of the ground truth.
pub fn reference_values(truth: &LmabInstance, episodes: usize, seed: u64) -> Result<References> {
    let genie_policy = QmdpPolicy::new(truth);
    let (genie, genie_exact) = match exact_policy_value(truth, &genie_policy) {
        Ok(v) => (v, true),
        Err(LmabError::GuardExceeded { .. }) => {
            (monte_carlo_policy_value(truth, &genie_policy, episodes.max(1), seed).0, false)
        }
        Err(e) => return Err(e),
    };
    let optimal = match planning::plan_exact(truth, truth.horizon()) {
        Ok(plan) => Some(plan.value),
        Err(LmabError::GuardExceeded { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(References { genie, genie_exact, optimal })
}

/// Exact plan of `model` when it fits the guards, else QMDP on it.
pub fn plan_with_fallback(model: &LmabInstance) -> Result<FinalPolicy> {
    match planning::plan_exact(model, model.horizon()) {
        Ok(plan) => Ok(FinalPolicy::Tree(plan.policy)),
        Err(LmabError::GuardExceeded { .. }) => Ok(FinalPolicy::Qmdp(QmdpPolicy::new(model))),
        Err(e) => Err(e),
    }
}

/// Loads (or generates) the ground truth and applies the horizon override.
fn prepare(config: &RunConfig) -> Result<LmabInstance> {
    config.validate()?;
    let truth = config.load_instance()?;
    if truth.num_values() == 0 {
        return Err(LmabError::Config("pipelines need a discrete-reward instance".into()));
    }
    Ok(truth)
}

/// Step 1: second moment, top-M subspace, optimal design and core set.
fn learn_core(config: &RunConfig, truth: &LmabInstance, env: &CountingEnv<'_, LmabInstance>) -> Result<CoreSet> {
    let m = truth.num_contexts();
    let second = if config.noiseless {
        subspace::exact_second_moment(truth)
    } else {
        subspace::estimate_second_moment(env, config.n0, derive_seed(config.seed, SUBSPACE_STREAM))
            .stage("subspace")?
    };
    let sub = subspace::top_m_eigenspace(&second, m).stage("subspace")?;
    let phi = sub.feature_matrix().stage("design")?;
    let weights =
        design::solve_optimal_design(&phi, design::DEFAULT_TOLERANCE, design::DEFAULT_MAX_ITER).stage("design")?;
    design::select_core_coordinates(&phi, &weights).stage("design")
}

struct Outcome {
    params: LatentParams,
    model: LmabInstance,
    clipped_mass: f64,
    policy: FinalPolicy,
}

fn recover_and_plan(params: LatentParams, core: &CoreSet, truth: &LmabInstance) -> Result<Outcome> {
    let support = truth.support().expect("discrete instance");
    let recovered = recover::recover_reward_model(&params, core, support, truth.horizon()).stage("recover")?;
    let clipped_mass = recovered.total_clipped_mass();
    let policy = plan_with_fallback(&recovered.instance).stage("plan")?;
    Ok(Outcome { params, model: recovered.instance, clipped_mass, policy })
}

struct Partial {
    label: String,
    policy: FinalPolicy,
    wasserstein: Option<f64>,
    residuals: Vec<f64>,
    degenerate: bool,
    core_size: Option<usize>,
    clipped_mass: Option<f64>,
    w_min: Option<f64>,
    log_likelihood: Option<f64>,
    fit_iterations: Option<usize>,
    model: Option<LmabInstance>,
}

impl Partial {
    fn bare(label: &str, policy: FinalPolicy) -> Self {
        Partial {
            label: label.to_string(),
            policy,
            wasserstein: None,
            residuals: Vec::new(),
            degenerate: false,
            core_size: None,
            clipped_mass: None,
            w_min: None,
            log_likelihood: None,
            fit_iterations: None,
            model: None,
        }
    }

    fn learned(label: &str, outcome: Outcome, core: &CoreSet, truth: &LmabInstance) -> Result<Self> {
        let target = LatentParams::from_instance(truth, core);
        let wasserstein = moments::wasserstein_distance(&outcome.params, &target).stage("evaluate")?;
        Ok(Partial {
            wasserstein: Some(wasserstein),
            core_size: Some(core.len()),
            clipped_mass: Some(outcome.clipped_mass),
            model: Some(outcome.model),
            ..Partial::bare(label, outcome.policy)
        })
    }
}

fn finish(
    config: &RunConfig,
    pipeline: Pipeline,
    truth: &LmabInstance,
    references: References,
    episodes: EpisodeAccount,
    clock: &mut Clock,
    partial: Partial,
) -> Result<RunReport> {
    let h = truth.horizon();
    let (value, value_stderr, exact_value) =
        evaluate_policy(truth, &partial.policy, config.eval_episodes, derive_seed(config.seed, EVAL_STREAM))
            .stage("evaluate")?;
    clock.lap("evaluate");
    let hf = h.max(1) as f64;
    Ok(RunReport {
        label: partial.label,
        pipeline,
        seed: config.seed,
        horizon: h,
        value,
        value_stderr,
        exact_value,
        per_step_reward: value / hf,
        stderr: value_stderr / hf,
        references,
        wasserstein: partial.wasserstein,
        residuals: partial.residuals,
        episodes,
        timings: clock.timings.clone(),
        wallclock_ms: clock.total_ms(),
        degenerate: partial.degenerate,
        core_size: partial.core_size,
        clipped_mass: partial.clipped_mass,
        w_min: partial.w_min,
        log_likelihood: partial.log_likelihood,
        fit_iterations: partial.fit_iterations,
        model: partial.model,
        policy: partial.policy,
    })
}

fn references_for(config: &RunConfig, truth: &LmabInstance) -> Result<References> {
    reference_values(truth, config.eval_episodes, derive_seed(config.seed, REFERENCE_STREAM)).stage("evaluate")
}

/// Runs the configured pipeline; `tensor-init-em` yields two reports.
pub fn run(config: &RunConfig) -> Result<Vec<RunReport>> {
    match config.single_pipeline()? {
        Pipeline::Algorithm1Moments => Ok(vec![run_algorithm1(config)?]),
        Pipeline::EdMle => Ok(vec![run_ed_mle(config)?]),
        _ => run_baseline(config),
    }
}

/// Moment matching: subspace, core set, empirical tensors up to order
/// `min(H, 2M - 1)`, constrained fit, recovery, planning.
pub fn run_algorithm1(config: &RunConfig) -> Result<RunReport> {
    let pipeline = config.single_pipeline()?;
    if pipeline != Pipeline::Algorithm1Moments {
        return Err(LmabError::Config(format!("run_algorithm1 called for {}", pipeline.name())));
    }
    let truth = prepare(config)?;
    let mut clock = Clock::new(config.record_wallclock);
    let references = references_for(config, &truth)?;
    clock.lap("reference");
    let env = CountingEnv::new(&truth);
    let core = learn_core(config, &truth, &env)?;
    let subspace_episodes = env.episodes();
    clock.lap("subspace");

    let (m, h, z) = (truth.num_contexts(), truth.horizon(), truth.num_values());
    let max_order = h.min(2 * m - 1);
    let tensor_seed = derive_seed(config.seed, ESTIMATE_STREAM);
    let tensors: Vec<MomentTensor> = (1..=max_order)
        .map(|l| {
            if config.noiseless {
                moments::exact_moment_tensor(&truth, &core, l)
            } else {
                moments::estimate_moment_tensor(&env, &core, l, config.n1, derive_seed(tensor_seed, l as u64))
            }
        })
        .collect::<Result<_>>()
        .stage("moments")?;
    clock.lap("moments");

    let delta_tsr = match config.delta_tsr {
        Tolerance::Value(v) => v,
        Tolerance::Named(_) => auto_delta_tsr(config.epsilon, z, m, h, core.len()),
    };
    let floors = match config.w_min {
        WeightFloor::Value(v) => vec![v],
        WeightFloor::Named(_) => geometric_floors(m, h),
    };
    let initial: Vec<LatentParams> = if max_order >= 3 {
        let seed = derive_seed(config.seed, INIT_STREAM);
        mle::spectral_from_tensors(&tensors[0], &tensors[1], &tensors[2], m, seed).into_iter().collect()
    } else {
        Vec::new()
    };

    let mut best: Option<(f64, f64, moments::FitReport, Outcome)> = None;
    let mut selection = 0u64;
    for (i, &floor) in floors.iter().enumerate() {
        let delta_sub = match config.delta_sub {
            Tolerance::Value(v) => v,
            Tolerance::Named(_) => auto_delta_sub(config.epsilon, z, m, h, floor),
        };
        let mut fit_config = MatchConfig::new(delta_tsr, max_order, floor.min(1.0 / m as f64));
        fit_config.delta_sub = delta_sub;
        fit_config.bands = Some(BandSpec { transform: core.transform.clone(), values: z });
        fit_config.max_iter = config.fit_max_iter;
        let fit_seed = derive_seed(derive_seed(config.seed, INIT_STREAM), 1 + i as u64);
        let fit = moments::fit_moments(&tensors, &fit_config, m, &initial, fit_seed).stage("moments")?;
        let outcome = recover_and_plan(fit.params.clone(), &core, &truth)?;
        let score = if floors.len() == 1 {
            0.0
        } else {
            let seed = derive_seed(derive_seed(config.seed, SELECT_STREAM), i as u64);
            let episodes = config.eval_episodes.max(1);
            selection += episodes as u64;
            monte_carlo_policy_value(&truth, &outcome.policy, episodes, seed).0
        };
        if best.as_ref().is_none_or(|(s, ..)| score > *s) {
            best = Some((score, floor, fit, outcome));
        }
    }
    let (_, floor, fit, outcome) = best.expect("at least one weight floor");
    clock.lap("fit");

    let episodes = EpisodeAccount {
        subspace: subspace_episodes,
        estimation: env.episodes() - subspace_episodes,
        total: env.episodes(),
        selection,
    };
    let mut partial = Partial::learned(pipeline.name(), outcome, &core, &truth)?;
    partial.residuals = fit.residuals.clone();
    partial.w_min = Some(floor);
    partial.fit_iterations = Some(fit.iterations);
    finish(config, pipeline, &truth, references, episodes, &mut clock, partial)
}

fn exact_report_residuals(params: &LatentParams, truth: &LmabInstance, core: &CoreSet) -> Result<Vec<f64>> {
    let orders = truth.horizon().min(REPORT_ORDER);
    let tensors: Vec<MomentTensor> =
        (1..=orders).map(|l| moments::exact_moment_tensor(truth, core, l)).collect::<Result<_>>()?;
    moments::moment_residual(params, &tensors)
}

/// Collects the likelihood dataset after Step 1.
fn learn_dataset(
    config: &RunConfig,
    truth: &LmabInstance,
    env: &CountingEnv<'_, LmabInstance>,
    clock: &mut Clock,
) -> Result<(CoreSet, MleDataset, u64)> {
    let core = learn_core(config, truth, env)?;
    let subspace_episodes = env.episodes();
    clock.lap("subspace");
    let data = mle::collect_mle_data(env, &core, config.n, derive_seed(config.seed, ESTIMATE_STREAM));
    clock.lap("collect");
    Ok((core, data, subspace_episodes))
}

fn account(env: &CountingEnv<'_, LmabInstance>, subspace: u64) -> EpisodeAccount {
    EpisodeAccount { subspace, estimation: env.episodes() - subspace, total: env.episodes(), selection: 0 }
}

/// Experimental design followed by EM from several starts; the highest
/// likelihood wins.
pub fn run_ed_mle(config: &RunConfig) -> Result<RunReport> {
    let pipeline = config.single_pipeline()?;
    if pipeline != Pipeline::EdMle {
        return Err(LmabError::Config(format!("run_ed_mle called for {}", pipeline.name())));
    }
    let truth = prepare(config)?;
    let mut clock = Clock::new(config.record_wallclock);
    let references = references_for(config, &truth)?;
    clock.lap("reference");
    let env = CountingEnv::new(&truth);
    let (core, data, subspace_episodes) = learn_dataset(config, &truth, &env, &mut clock)?;
    let m = truth.num_contexts();
    let init_seed = derive_seed(config.seed, INIT_STREAM);

    let (params, degenerate, ll, iterations) = if data.num_episodes() == 0 {
        (mle::uniform_params(m, core.len(), 0.5), true, None, None)
    } else {
        let mut starts = vec![
            mle::init_spectral(SpectralSource::Data(&data), m, init_seed).params,
            mle::init_kmeans(&data, m, derive_seed(init_seed, 1)),
        ];
        for r in 0..config.random_inits {
            starts.push(mle::random_params(m, core.len(), derive_seed(init_seed, 2 + r as u64)));
        }
        let mut best: Option<mle::EmState> = None;
        for start in starts {
            let state = mle::em_fit(&data, start, config.em_max_iter, config.em_tol);
            if best.as_ref().is_none_or(|b| state.log_likelihood > b.log_likelihood) {
                best = Some(state);
            }
        }
        let best = best.expect("at least two starts");
        (best.params, false, Some(best.log_likelihood), Some(best.iterations))
    };
    clock.lap("mle");

    let residuals = exact_report_residuals(&params, &truth, &core).stage("mle")?;
    let outcome = recover_and_plan(params, &core, &truth)?;
    clock.lap("plan");
    let mut partial = Partial::learned(pipeline.name(), outcome, &core, &truth)?;
    partial.residuals = residuals;
    partial.degenerate = degenerate;
    partial.log_likelihood = ll;
    partial.fit_iterations = iterations;
    finish(config, pipeline, &truth, references, account(&env, subspace_episodes), &mut clock, partial)
}

/// Baselines: pooled UCB, tensor initialization with and without EM, and
/// the genie (QMDP on the true model).
pub fn run_baseline(config: &RunConfig) -> Result<Vec<RunReport>> {
    let pipeline = config.single_pipeline()?;
    let truth = prepare(config)?;
    let mut clock = Clock::new(config.record_wallclock);
    let references = references_for(config, &truth)?;
    clock.lap("reference");
    let env = CountingEnv::new(&truth);
    match pipeline {
        Pipeline::Ucb => {
            let result = planning::ucb_baseline(&env, config.n, config.ucb_width, derive_seed(config.seed, UCB_STREAM));
            clock.lap("ucb");
            let partial = Partial::bare(pipeline.name(), FinalPolicy::Stationary(result.policy));
            Ok(vec![finish(config, pipeline, &truth, references, account(&env, 0), &mut clock, partial)?])
        }
        Pipeline::Genie => {
            let partial = Partial::bare(pipeline.name(), FinalPolicy::Qmdp(QmdpPolicy::new(&truth)));
            Ok(vec![finish(config, pipeline, &truth, references, account(&env, 0), &mut clock, partial)?])
        }
        Pipeline::TensorInitEm => {
            let (core, data, subspace_episodes) = learn_dataset(config, &truth, &env, &mut clock)?;
            let accounting = account(&env, subspace_episodes);
            let m = truth.num_contexts();
            let empty = data.num_episodes() == 0;
            let init = if empty {
                mle::uniform_params(m, core.len(), 0.5)
            } else {
                mle::init_tensor_only(SpectralSource::Data(&data), m, derive_seed(config.seed, INIT_STREAM)).params
            };
            clock.lap("init");
            let refined = (!empty).then(|| mle::em_fit(&data, init.clone(), config.em_max_iter, config.em_tol));
            clock.lap("mle");

            let mut reports = Vec::with_capacity(2);
            let residuals = exact_report_residuals(&init, &truth, &core).stage("init")?;
            let outcome = recover_and_plan(init.clone(), &core, &truth)?;
            let mut partial = Partial::learned("tensor-init", outcome, &core, &truth)?;
            partial.residuals = residuals;
            partial.degenerate = empty;
            partial.log_likelihood = (!empty).then(|| mle::log_likelihood(&data, &init));
            reports.push(finish(config, pipeline, &truth, references, accounting, &mut clock, partial)?);

            let (params, ll, iters) = match refined {
                Some(state) => (state.params, Some(state.log_likelihood), Some(state.iterations)),
                None => (init, None, None),
            };
            let residuals = exact_report_residuals(&params, &truth, &core).stage("mle")?;
            let outcome = recover_and_plan(params, &core, &truth)?;
            let mut partial = Partial::learned(pipeline.name(), outcome, &core, &truth)?;
            partial.residuals = residuals;
            partial.degenerate = ll.is_none();
            partial.log_likelihood = ll;
            partial.fit_iterations = iters;
            reports.push(finish(config, pipeline, &truth, references, accounting, &mut clock, partial)?);
            Ok(reports)
        }
        other => Err(LmabError::Config(format!("{} is not a baseline", other.name()))),
    }
}
