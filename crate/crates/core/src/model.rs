//! Latent bandit instances, episode simulation and exact policy evaluation.
//!
//! An instance draws one hidden context per episode from its mixing weights and
//! keeps it fixed for `horizon` steps. Learners only ever see
//! [`LearnerEpisode`]s, which carry no context label.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LmabError, Result};
use crate::rng::{self, StreamRng};

const SUM_TOL: f64 = 1e-12;
/// Largest number of histories an exact enumeration may visit.
pub const ENUMERATION_GUARD: f64 = 1e7;

/// Ordered set of reward values.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardSupport {
    values: Vec<f64>,
    bounded: bool,
}

impl RewardSupport {
    /// Support with every |z| <= 1.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        Self::build(values, true)
    }

    /// Support without the |z| <= 1 bound, used by discretized Gaussian grids.
    pub fn unbounded(values: Vec<f64>) -> Result<Self> {
        Self::build(values, false)
    }

    pub fn bernoulli() -> Self {
        RewardSupport { values: vec![0.0, 1.0], bounded: true }
    }

    fn build(values: Vec<f64>, bounded: bool) -> Result<Self> {
        let support = RewardSupport { values, bounded };
        let problems = support.problems();
        if problems.is_empty() {
            Ok(support)
        } else {
            Err(LmabError::InvalidInstance(problems.join("; ")))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.values.len() < 2 {
            out.push(format!("support has {} values, need at least 2", self.values.len()));
        }
        if self.values.windows(2).any(|w| !(w[0] < w[1])) {
            out.push("support values not strictly increasing".to_string());
        }
        if self.bounded && self.values.iter().any(|z| !(z.abs() <= 1.0)) {
            out.push("support value outside [-1, 1]".to_string());
        }
        out
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_bounded(&self) -> bool {
        self.bounded
    }

    pub fn value(&self, index: usize) -> f64 {
        self.values[index]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Discrete,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq)]
enum RewardModel {
    /// `probs[(m * A + a) * Z + z]` = P(r = z | m, a).
    Discrete { support: RewardSupport, probs: Vec<f64> },
    /// `means[m * A + a]`, unit variance.
    Gaussian { means: Vec<f64> },
}

/// Ground-truth latent bandit.
#[derive(Clone, Debug, PartialEq)]
pub struct LmabInstance {
    contexts: usize,
    actions: usize,
    horizon: usize,
    weights: Vec<f64>,
    rewards: RewardModel,
}

/// Outcome of [`validate_instance`]: empty means valid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn fmt_num(x: f64) -> String {
    let s = format!("{:.10}", x);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

impl LmabInstance {
    /// Discrete instance from `probs[m][a][z]`, validated.
    pub fn discrete(
        weights: Vec<f64>,
        probs: Vec<Vec<Vec<f64>>>,
        support: RewardSupport,
        horizon: usize,
    ) -> Result<Self> {
        let inst = Self::discrete_unchecked(weights, probs, support, horizon)?;
        inst.checked()
    }

    /// Builds without checking probability invariants; shape must still agree.
    pub fn discrete_unchecked(
        weights: Vec<f64>,
        probs: Vec<Vec<Vec<f64>>>,
        support: RewardSupport,
        horizon: usize,
    ) -> Result<Self> {
        let contexts = weights.len();
        if probs.len() != contexts {
            return Err(LmabError::Dimension(format!(
                "{} weight entries but {} reward tables",
                contexts,
                probs.len()
            )));
        }
        let actions = probs.first().map_or(0, Vec::len);
        let z = support.len();
        let mut flat = Vec::with_capacity(contexts * actions * z);
        for (m, table) in probs.iter().enumerate() {
            if table.len() != actions {
                return Err(LmabError::Dimension(format!("context {m} has {} actions", table.len())));
            }
            for (a, row) in table.iter().enumerate() {
                if row.len() != z {
                    return Err(LmabError::Dimension(format!(
                        "row ({m},{a}) has {} entries, support has {z}",
                        row.len()
                    )));
                }
                flat.extend_from_slice(row);
            }
        }
        Self::from_flat(weights, actions, flat, support, horizon)
    }

    pub(crate) fn from_flat(
        weights: Vec<f64>,
        actions: usize,
        probs: Vec<f64>,
        support: RewardSupport,
        horizon: usize,
    ) -> Result<Self> {
        let contexts = weights.len();
        if probs.len() != contexts * actions * support.len() {
            return Err(LmabError::Dimension("flat reward table length".into()));
        }
        Ok(LmabInstance {
            contexts,
            actions,
            horizon,
            weights,
            rewards: RewardModel::Discrete { support, probs },
        })
    }

    /// Unit-variance Gaussian instance from `means[m][a]`, validated.
    pub fn gaussian(weights: Vec<f64>, means: Vec<Vec<f64>>, horizon: usize) -> Result<Self> {
        let contexts = weights.len();
        if means.len() != contexts {
            return Err(LmabError::Dimension("means rows must match weights".into()));
        }
        let actions = means.first().map_or(0, Vec::len);
        if means.iter().any(|row| row.len() != actions) {
            return Err(LmabError::Dimension("ragged mean table".into()));
        }
        let inst = LmabInstance {
            contexts,
            actions,
            horizon,
            weights,
            rewards: RewardModel::Gaussian { means: means.concat() },
        };
        inst.checked()
    }

    fn checked(self) -> Result<Self> {
        let report = validate_instance(&self);
        if report.passed() {
            Ok(self)
        } else {
            Err(LmabError::InvalidInstance(report.violations.join("; ")))
        }
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts
    }

    pub fn num_actions(&self) -> usize {
        self.actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Same model with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Self {
        LmabInstance { horizon, ..self.clone() }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn kind(&self) -> RewardKind {
        match self.rewards {
            RewardModel::Discrete { .. } => RewardKind::Discrete,
            RewardModel::Gaussian { .. } => RewardKind::Gaussian,
        }
    }

    pub fn support(&self) -> Option<&RewardSupport> {
        match &self.rewards {
            RewardModel::Discrete { support, .. } => Some(support),
            RewardModel::Gaussian { .. } => None,
        }
    }

    /// Number of reward values Z (0 for Gaussian instances).
    pub fn num_values(&self) -> usize {
        self.support().map_or(0, RewardSupport::len)
    }

    fn discrete_parts(&self) -> Result<(&RewardSupport, &[f64])> {
        match &self.rewards {
            RewardModel::Discrete { support, probs } => Ok((support, probs)),
            RewardModel::Gaussian { .. } => {
                Err(LmabError::InvalidArgument("operation needs a discrete instance".into()))
            }
        }
    }

    /// P(r = z | m, a) as a slice over z. Panics on Gaussian instances.
    pub fn prob_row(&self, m: usize, a: usize) -> &[f64] {
        let (support, probs) = self.discrete_parts().expect("discrete instance");
        let z = support.len();
        let start = (m * self.actions + a) * z;
        &probs[start..start + z]
    }

    /// mu_m as a flat vector indexed by `a * Z + z`.
    pub fn reward_vector(&self, m: usize) -> Vec<f64> {
        let (support, probs) = self.discrete_parts().expect("discrete instance");
        let width = self.actions * support.len();
        probs[m * width..(m + 1) * width].to_vec()
    }

    pub fn gaussian_mean(&self, m: usize, a: usize) -> f64 {
        match &self.rewards {
            RewardModel::Gaussian { means } => means[m * self.actions + a],
            RewardModel::Discrete { .. } => self.mean_reward(m, a),
        }
    }

    /// Expected reward of action `a` in context `m`.
    pub fn mean_reward(&self, m: usize, a: usize) -> f64 {
        match &self.rewards {
            RewardModel::Discrete { support, .. } => self
                .prob_row(m, a)
                .iter()
                .zip(support.values())
                .map(|(p, z)| p * z)
                .sum(),
            RewardModel::Gaussian { means } => means[m * self.actions + a],
        }
    }

    /// Mixture mean of an action, i.e. its value to a context-blind learner.
    pub fn pooled_mean(&self, a: usize) -> f64 {
        (0..self.contexts).map(|m| self.weights[m] * self.mean_reward(m, a)).sum()
    }

    pub fn best_context_value(&self, m: usize) -> f64 {
        (0..self.actions).map(|a| self.mean_reward(m, a)).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Second moment matrix `sum_m w_m mu_m mu_m^T` over (a, z) coordinates.
    pub fn second_moment(&self) -> nalgebra::DMatrix<f64> {
        let d = self.actions * self.num_values();
        let mut out = nalgebra::DMatrix::zeros(d, d);
        for m in 0..self.contexts {
            let v = nalgebra::DVector::from_vec(self.reward_vector(m));
            out += self.weights[m] * &v * v.transpose();
        }
        out
    }

    pub fn to_file_string(&self) -> Result<String> {
        toml::to_string(&InstanceFile::from(self)).map_err(|e| LmabError::Parse(e.to_string()))
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let file: InstanceFile = toml::from_str(text).map_err(|e| LmabError::Parse(e.to_string()))?;
        file.into_instance()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file_str(&std::fs::read_to_string(path)?)
    }
}

/// Checks weights, reward rows and bounds; never fails, reports instead.
pub fn validate_instance(inst: &LmabInstance) -> ValidationReport {
    let mut violations = Vec::new();
    if inst.contexts == 0 {
        violations.push("no contexts".to_string());
    }
    if inst.actions == 0 {
        violations.push("no actions".to_string());
    }
    if inst.weights.iter().any(|w| !(*w >= 0.0)) {
        violations.push("negative or non-finite weight".to_string());
    }
    let total: f64 = inst.weights.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        violations.push(format!("weights sum to {}", fmt_num(total)));
    }
    match &inst.rewards {
        RewardModel::Discrete { support, probs } => {
            violations.extend(support.problems());
            let z = support.len();
            for m in 0..inst.contexts {
                for a in 0..inst.actions {
                    let row = &probs[(m * inst.actions + a) * z..(m * inst.actions + a + 1) * z];
                    if row.iter().any(|p| !(*p >= 0.0)) {
                        violations.push(format!("negative probability at context {m} action {a}"));
                    }
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > SUM_TOL {
                        violations.push(format!("row sum {} at context {m} action {a}", fmt_num(s)));
                    }
                }
            }
        }
        RewardModel::Gaussian { means } => {
            if means.iter().any(|mu| !(mu.abs() <= 1.0)) {
                violations.push("gaussian mean outside [-1, 1]".to_string());
            }
        }
    }
    ValidationReport { violations }
}

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    m: usize,
    a: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z: Option<usize>,
    h: usize,
    reward_kind: RewardKind,
    weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    support: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    support_bounded: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reward_probs: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gaussian_means: Option<Vec<Vec<f64>>>,
}

impl From<&LmabInstance> for InstanceFile {
    fn from(inst: &LmabInstance) -> Self {
        let (m, a) = (inst.contexts, inst.actions);
        match &inst.rewards {
            RewardModel::Discrete { support, .. } => InstanceFile {
                m,
                a,
                z: Some(support.len()),
                h: inst.horizon,
                reward_kind: RewardKind::Discrete,
                weights: inst.weights.clone(),
                support: Some(support.values().to_vec()),
                support_bounded: (!support.is_bounded()).then_some(false),
                reward_probs: Some(
                    (0..m)
                        .map(|ctx| (0..a).map(|act| inst.prob_row(ctx, act).to_vec()).collect())
                        .collect(),
                ),
                gaussian_means: None,
            },
            RewardModel::Gaussian { means } => InstanceFile {
                m,
                a,
                z: None,
                h: inst.horizon,
                reward_kind: RewardKind::Gaussian,
                weights: inst.weights.clone(),
                support: None,
                support_bounded: None,
                reward_probs: None,
                gaussian_means: Some(means.chunks(a).map(<[f64]>::to_vec).collect()),
            },
        }
    }
}

impl InstanceFile {
    fn into_instance(self) -> Result<LmabInstance> {
        if self.weights.len() != self.m {
            return Err(LmabError::Parse(format!("m = {} but {} weights", self.m, self.weights.len())));
        }
        let inst = match self.reward_kind {
            RewardKind::Discrete => {
                let probs = self
                    .reward_probs
                    .ok_or_else(|| LmabError::Parse("discrete instance needs reward_probs".into()))?;
                let z = self.z.unwrap_or_else(|| probs.first().and_then(|t| t.first()).map_or(0, Vec::len));
                let values = match self.support {
                    Some(v) => v,
                    None if z == 2 => vec![0.0, 1.0],
                    None => return Err(LmabError::Parse("support must be given when z != 2".into())),
                };
                if values.len() != z {
                    return Err(LmabError::Parse(format!("z = {z} but support has {} values", values.len())));
                }
                let support = if self.support_bounded.unwrap_or(true) {
                    RewardSupport::new(values)?
                } else {
                    RewardSupport::unbounded(values)?
                };
                LmabInstance::discrete(self.weights, probs, support, self.h)?
            }
            RewardKind::Gaussian => {
                let means = self
                    .gaussian_means
                    .ok_or_else(|| LmabError::Parse("gaussian instance needs gaussian_means".into()))?;
                LmabInstance::gaussian(self.weights, means, self.h)?
            }
        };
        if inst.num_actions() != self.a {
            return Err(LmabError::Parse(format!("a = {} but tables have {} actions", self.a, inst.num_actions())));
        }
        Ok(inst)
    }
}

/// One (action, observed reward index) pair of a history.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Step {
    pub action: usize,
    pub obs: usize,
}

/// A realized reward: its value and its index in the reward support.
/// `obs` is 0 for continuous rewards that have no discrete label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reward {
    pub value: f64,
    pub obs: usize,
}

/// Full episode record, including the hidden context for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub context: usize,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub observations: Vec<usize>,
}

/// The part of an episode a learner may use.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnerEpisode {
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub observations: Vec<usize>,
}

impl Episode {
    pub fn into_learner(self) -> LearnerEpisode {
        LearnerEpisode { actions: self.actions, rewards: self.rewards, observations: self.observations }
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// History-dependent policy over (action, reward index) histories.
pub trait Policy: Sync {
    /// Action to play after `history`.
    fn act(&self, history: &[Step]) -> usize;

    /// Number of decisions the policy can make; `None` means unbounded.
    fn depth(&self) -> Option<usize> {
        None
    }
}

/// Open-loop action sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FixedSequence(pub Vec<usize>);

impl Policy for FixedSequence {
    fn act(&self, history: &[Step]) -> usize {
        self.0[history.len()]
    }

    fn depth(&self) -> Option<usize> {
        Some(self.0.len())
    }
}

/// Plays the same arm every step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StationaryPolicy(pub usize);

impl Policy for StationaryPolicy {
    fn act(&self, _history: &[Step]) -> usize {
        self.0
    }
}

/// Complete decision tree over reward histories.
///
/// Nodes are stored breadth first: the root is node 0 and the child of node
/// `i` after observing reward index `z` is `i * Z + 1 + z`. Every node at depth
/// below `depth - 1` has exactly `Z` children.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyTree {
    branching: usize,
    depth: usize,
    actions: Vec<usize>,
}

pub fn complete_tree_nodes(branching: usize, depth: usize) -> f64 {
    (0..depth).map(|t| (branching as f64).powi(t as i32)).sum()
}

impl PolicyTree {
    pub fn new(branching: usize, depth: usize, actions: Vec<usize>) -> Result<Self> {
        if branching == 0 {
            return Err(LmabError::InvalidArgument("branching must be positive".into()));
        }
        let expected = complete_tree_nodes(branching, depth);
        if actions.len() as f64 != expected {
            return Err(LmabError::Dimension(format!(
                "tree of depth {depth} and branching {branching} needs {expected} nodes, got {}",
                actions.len()
            )));
        }
        Ok(PolicyTree { branching, depth, actions })
    }

    /// Materializes any policy as a tree (guarded by [`ENUMERATION_GUARD`]).
    pub fn from_policy(policy: &dyn Policy, branching: usize, depth: usize) -> Result<Self> {
        let count = complete_tree_nodes(branching, depth);
        if count > ENUMERATION_GUARD {
            return Err(LmabError::GuardExceeded { what: "policy tree", size: count, limit: ENUMERATION_GUARD });
        }
        let mut actions = vec![0; count as usize];
        let mut history = Vec::with_capacity(depth);
        fn fill(
            policy: &dyn Policy,
            branching: usize,
            depth: usize,
            node: usize,
            history: &mut Vec<Step>,
            actions: &mut [usize],
        ) {
            let action = policy.act(history);
            actions[node] = action;
            if history.len() + 1 == depth {
                return;
            }
            for obs in 0..branching {
                history.push(Step { action, obs });
                fill(policy, branching, depth, node * branching + 1 + obs, history, actions);
                history.pop();
            }
        }
        if depth > 0 {
            fill(policy, branching, depth, 0, &mut history, &mut actions);
        }
        Ok(PolicyTree { branching, depth, actions })
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn node_count(&self) -> usize {
        self.actions.len()
    }

    /// Node index reached by a history of reward indices.
    pub fn node_for(&self, history: &[Step]) -> usize {
        history.iter().fold(0, |node, step| node * self.branching + 1 + step.obs)
    }

    pub fn action_at(&self, node: usize) -> usize {
        self.actions[node]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn to_file_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LmabError::Parse(e.to_string()))
    }

    pub fn from_file_str(text: &str) -> Result<Self> {
        let raw: PolicyTree = toml::from_str(text).map_err(|e| LmabError::Parse(e.to_string()))?;
        PolicyTree::new(raw.branching, raw.depth, raw.actions)
    }
}

impl Policy for PolicyTree {
    fn act(&self, history: &[Step]) -> usize {
        self.actions[self.node_for(history)]
    }

    fn depth(&self) -> Option<usize> {
        Some(self.depth)
    }
}

/// Source of episodes. `draw_context` starts an episode.
pub trait Environment: Sync {
    fn num_actions(&self) -> usize;
    /// Size of the discrete reward support; 0 for continuous rewards.
    fn num_values(&self) -> usize;
    fn horizon(&self) -> usize;
    fn draw_context<R: Rng + ?Sized>(&self, rng: &mut R) -> usize;
    fn draw_reward<R: Rng + ?Sized>(&self, context: usize, action: usize, rng: &mut R) -> Reward;
}

impl Environment for LmabInstance {
    fn num_actions(&self) -> usize {
        self.actions
    }

    fn num_values(&self) -> usize {
        LmabInstance::num_values(self)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn draw_context<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng::categorical(rng, &self.weights)
    }

    fn draw_reward<R: Rng + ?Sized>(&self, context: usize, action: usize, rng: &mut R) -> Reward {
        match &self.rewards {
            RewardModel::Discrete { support, .. } => {
                let obs = rng::categorical(rng, self.prob_row(context, action));
                Reward { value: support.value(obs), obs }
            }
            RewardModel::Gaussian { means } => {
                let noise: f64 = StandardNormal.sample(rng);
                Reward { value: means[context * self.actions + action] + noise, obs: 0 }
            }
        }
    }
}

/// Wraps an environment and counts the episodes drawn from it.
pub struct CountingEnv<'a, E> {
    inner: &'a E,
    episodes: AtomicU64,
}

impl<'a, E: Environment> CountingEnv<'a, E> {
    pub fn new(inner: &'a E) -> Self {
        CountingEnv { inner, episodes: AtomicU64::new(0) }
    }

    pub fn episodes(&self) -> u64 {
        self.episodes.load(Ordering::Relaxed)
    }
}

impl<E: Environment> Environment for CountingEnv<'_, E> {
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    fn num_values(&self) -> usize {
        self.inner.num_values()
    }

    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn draw_context<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.episodes.fetch_add(1, Ordering::Relaxed);
        self.inner.draw_context(rng)
    }

    fn draw_reward<R: Rng + ?Sized>(&self, context: usize, action: usize, rng: &mut R) -> Reward {
        self.inner.draw_reward(context, action, rng)
    }
}

/// Simulates `len` steps of one episode under `policy`.
pub fn run_episode<E: Environment, R: Rng + ?Sized>(
    env: &E,
    policy: &dyn Policy,
    len: usize,
    rng: &mut R,
) -> Episode {
    let context = env.draw_context(rng);
    let mut history = Vec::with_capacity(len);
    let mut rewards = Vec::with_capacity(len);
    for _ in 0..len {
        let action = policy.act(&history);
        let reward = env.draw_reward(context, action, rng);
        history.push(Step { action, obs: reward.obs });
        rewards.push(reward.value);
    }
    Episode {
        context,
        actions: history.iter().map(|s| s.action).collect(),
        rewards,
        observations: history.iter().map(|s| s.obs).collect(),
    }
}

/// Learner-facing episode of `len` steps; the context is dropped.
pub fn play<E: Environment, R: Rng + ?Sized>(
    env: &E,
    policy: &dyn Policy,
    len: usize,
    rng: &mut R,
) -> LearnerEpisode {
    run_episode(env, policy, len, rng).into_learner()
}

/// Full-horizon episode from an instance, checking the policy is deep enough.
pub fn sample_episode<R: Rng + ?Sized>(
    inst: &LmabInstance,
    policy: &dyn Policy,
    rng: &mut R,
) -> Result<Episode> {
    check_depth(policy, inst.horizon)?;
    Ok(run_episode(inst, policy, inst.horizon, rng))
}

fn check_depth(policy: &dyn Policy, horizon: usize) -> Result<()> {
    match policy.depth() {
        Some(depth) if depth < horizon => Err(LmabError::PolicyTooShallow { depth, horizon }),
        _ => Ok(()),
    }
}

/// Separation requirement on generated instances: every pair of contexts has
/// some action whose reward distributions differ by at least `gamma` in L1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeparationConfig {
    pub gamma: f64,
    pub enforced: bool,
}

pub fn is_separated(inst: &LmabInstance, gamma: f64) -> bool {
    let (m, a) = (inst.num_contexts(), inst.num_actions());
    (0..m).all(|i| {
        (i + 1..m).all(|j| {
            (0..a).any(|act| {
                let l1: f64 =
                    inst.prob_row(i, act).iter().zip(inst.prob_row(j, act)).map(|(p, q)| (p - q).abs()).sum();
                l1 >= gamma
            })
        })
    })
}

/// Parameters of [`generate_random_instance`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub contexts: usize,
    pub actions: usize,
    pub values: usize,
    pub horizon: usize,
    pub rank: usize,
    pub separation: Option<SeparationConfig>,
    /// Reward values; defaults to evenly spaced points on [0, 1].
    pub support: Option<RewardSupport>,
}

pub const SEPARATION_RETRIES: usize = 10_000;

impl GeneratorSpec {
    pub fn new(contexts: usize, actions: usize, values: usize, horizon: usize, rank: usize) -> Self {
        GeneratorSpec { contexts, actions, values, horizon, rank, separation: None, support: None }
    }
}

/// Random instance whose reward vectors span at most `rank` dimensions.
///
/// Draws `rank` basis tables with Dirichlet(1) rows. The first `rank` contexts
/// take one basis table each, the rest take Dirichlet(1) convex combinations,
/// so the second-moment matrix has rank exactly `rank` almost surely. Mixing
/// weights are Dirichlet(1).
pub fn generate_random_instance<R: Rng + ?Sized>(spec: &GeneratorSpec, rng: &mut R) -> Result<LmabInstance> {
    let GeneratorSpec { contexts, actions, values, horizon, rank, .. } = *spec;
    if values < 2 {
        return Err(LmabError::InvalidArgument("need at least 2 reward values".into()));
    }
    if rank == 0 || rank > contexts.min(actions * (values - 1)) {
        return Err(LmabError::InvalidArgument(format!(
            "rank {rank} infeasible for M = {contexts}, A(Z-1) = {}",
            actions * (values - 1)
        )));
    }
    let support = match &spec.support {
        Some(s) if s.len() == values => s.clone(),
        Some(s) => {
            return Err(LmabError::Dimension(format!("support has {} values, spec says {values}", s.len())))
        }
        None => RewardSupport::new((0..values).map(|i| i as f64 / (values - 1) as f64).collect())?,
    };
    let attempts = match spec.separation {
        Some(sep) if sep.enforced => SEPARATION_RETRIES,
        _ => 1,
    };
    for _ in 0..attempts {
        let inst = draw_low_rank(contexts, actions, values, horizon, rank, &support, rng)?;
        match spec.separation {
            Some(sep) if sep.enforced && !is_separated(&inst, sep.gamma) => continue,
            _ => return Ok(inst),
        }
    }
    Err(LmabError::RetriesExhausted(SEPARATION_RETRIES))
}

fn draw_low_rank<R: Rng + ?Sized>(
    contexts: usize,
    actions: usize,
    values: usize,
    horizon: usize,
    rank: usize,
    support: &RewardSupport,
    rng: &mut R,
) -> Result<LmabInstance> {
    let width = actions * values;
    let basis: Vec<Vec<f64>> =
        (0..rank).map(|_| (0..actions).flat_map(|_| rng::dirichlet(rng, values, 1.0)).collect()).collect();
    let mut probs = Vec::with_capacity(contexts * width);
    for m in 0..contexts {
        let coeffs = if m < rank {
            let mut e = vec![0.0; rank];
            e[m] = 1.0;
            e
        } else {
            rng::dirichlet(rng, rank, 1.0)
        };
        for i in 0..width {
            probs.push(coeffs.iter().zip(&basis).map(|(c, b)| c * b[i]).sum());
        }
    }
    // Renormalize rows so sums are 1 to rounding.
    for row in probs.chunks_mut(values) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    let weights = rng::dirichlet(rng, contexts, 1.0);
    let inst = LmabInstance::from_flat(weights, actions, probs, support.clone(), horizon)?;
    inst.checked()
}

/// Exact V(pi) by recursion over reward histories.
///
/// The last step contributes its expected reward directly, so the number of
/// visited histories is `sum_{t<H} Z^t`, guarded by [`ENUMERATION_GUARD`].
pub fn exact_policy_value(inst: &LmabInstance, policy: &dyn Policy) -> Result<f64> {
    let (support, _) = inst.discrete_parts()?;
    let horizon = inst.horizon;
    check_depth(policy, horizon)?;
    let nodes = complete_tree_nodes(support.len(), horizon);
    if nodes > ENUMERATION_GUARD {
        return Err(LmabError::GuardExceeded { what: "policy evaluation", size: nodes, limit: ENUMERATION_GUARD });
    }
    if horizon == 0 {
        return Ok(0.0);
    }
    let means: Vec<f64> = (0..inst.contexts)
        .flat_map(|m| (0..inst.actions).map(move |a| (m, a)))
        .map(|(m, a)| inst.mean_reward(m, a))
        .collect();
    let mut history = Vec::with_capacity(horizon);
    Ok(value_recursion(inst, &means, policy, &mut history, inst.weights.clone()))
}

fn value_recursion(
    inst: &LmabInstance,
    means: &[f64],
    policy: &dyn Policy,
    history: &mut Vec<Step>,
    path: Vec<f64>,
) -> f64 {
    let action = policy.act(history);
    let mut value: f64 = (0..inst.contexts).map(|m| path[m] * means[m * inst.actions + action]).sum();
    if history.len() + 1 == inst.horizon {
        return value;
    }
    for obs in 0..inst.num_values() {
        let child: Vec<f64> = (0..inst.contexts).map(|m| path[m] * inst.prob_row(m, action)[obs]).collect();
        if child.iter().all(|&p| p == 0.0) {
            continue;
        }
        history.push(Step { action, obs });
        value += value_recursion(inst, means, policy, history, child);
        history.pop();
    }
    value
}

/// Monte Carlo estimate of V(pi): (mean, standard error) over `episodes`.
pub fn monte_carlo_policy_value<E: Environment>(
    env: &E,
    policy: &dyn Policy,
    episodes: usize,
    seed: u64,
) -> (f64, f64) {
    let horizon = env.horizon();
    let partial = rng::par_chunked(episodes, seed, |rng: &mut StreamRng, len| {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..len {
            let total = run_episode(env, policy, horizon, rng).total_reward();
            sum += total;
            sq += total * total;
        }
        (sum, sq)
    });
    let (sum, sq) = partial.into_iter().fold((0.0, 0.0), |(a, b), (c, d)| (a + c, b + d));
    let n = episodes.max(1) as f64;
    let mean = sum / n;
    if episodes < 2 {
        return (mean, 0.0);
    }
    let var = ((sq - n * mean * mean) / (n - 1.0)).max(0.0);
    (mean, (var / n).sqrt())
}

/// Probability of every full (action, reward) trajectory under `policy`.
pub fn exact_trajectory_distribution(
    inst: &LmabInstance,
    policy: &dyn Policy,
) -> Result<BTreeMap<Vec<Step>, f64>> {
    let (support, _) = inst.discrete_parts()?;
    check_depth(policy, inst.horizon)?;
    let size = (support.len() as f64).powi(inst.horizon as i32);
    if size > ENUMERATION_GUARD {
        return Err(LmabError::GuardExceeded { what: "trajectory distribution", size, limit: ENUMERATION_GUARD });
    }
    let mut out = BTreeMap::new();
    let mut history = Vec::with_capacity(inst.horizon);
    fn walk(
        inst: &LmabInstance,
        policy: &dyn Policy,
        history: &mut Vec<Step>,
        path: Vec<f64>,
        out: &mut BTreeMap<Vec<Step>, f64>,
    ) {
        if history.len() == inst.horizon {
            let p: f64 = path.iter().sum();
            if p > 0.0 {
                out.insert(history.clone(), p);
            }
            return;
        }
        let action = policy.act(history);
        for obs in 0..inst.num_values() {
            let child: Vec<f64> = (0..inst.contexts).map(|m| path[m] * inst.prob_row(m, action)[obs]).collect();
            if child.iter().all(|&p| p == 0.0) {
                continue;
            }
            history.push(Step { action, obs });
            walk(inst, policy, history, child, out);
            history.pop();
        }
    }
    walk(inst, policy, &mut history, inst.weights.clone(), &mut out);
    Ok(out)
}

/// Total variation distance between two trajectory distributions.
pub fn total_variation(p: &BTreeMap<Vec<Step>, f64>, q: &BTreeMap<Vec<Step>, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, pv) in p {
        sum += (pv - q.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, qv) in q {
        if !p.contains_key(k) {
            sum += qv.abs();
        }
    }
    0.5 * sum
}
