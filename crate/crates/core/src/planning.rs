//! Planning for a known latent bandit: exact belief-state dynamic programming,
//! the QMDP heuristic and a context-blind UCB1 baseline.

use std::collections::HashMap;

use crate::error::{LmabError, Result};
use crate::model::{complete_tree_nodes, Environment, LmabInstance, Policy, PolicyTree, StationaryPolicy, Step, ENUMERATION_GUARD};
use crate::rng;

/// Most distinct beliefs [`plan_exact`] may memoize.
pub const STATE_GUARD: usize = 1_000_000;
const QUANTUM: f64 = 1e12;

/// Posterior over contexts.
#[derive(Clone, Debug, PartialEq)]
pub struct Belief {
    pub probs: Vec<f64>,
}

impl Belief {
    pub fn prior(model: &LmabInstance) -> Self {
        Belief { probs: model.weights().to_vec() }
    }

    pub fn uniform(m: usize) -> Self {
        Belief { probs: vec![1.0 / m as f64; m] }
    }

    fn key(&self) -> Vec<i64> {
        self.probs.iter().map(|p| (p * QUANTUM).round() as i64).collect()
    }
}

/// Bayes update after observing reward index `obs` for `action`.
///
/// Returns the posterior and whether the observation had zero likelihood,
/// in which case the posterior is uniform.
pub fn belief_update(model: &LmabInstance, belief: &Belief, action: usize, obs: usize) -> (Belief, bool) {
    let joint: Vec<f64> =
        belief.probs.iter().enumerate().map(|(m, b)| b * model.prob_row(m, action)[obs]).collect();
    let total: f64 = joint.iter().sum();
    if total > 0.0 {
        (Belief { probs: joint.iter().map(|j| j / total).collect() }, false)
    } else {
        (Belief::uniform(belief.probs.len()), true)
    }
}

/// Posterior after a whole history, starting from the prior.
pub fn belief_after(model: &LmabInstance, history: &[Step]) -> Belief {
    history.iter().fold(Belief::prior(model), |b, s| belief_update(model, &b, s.action, s.obs).0)
}

fn expected_reward(model: &LmabInstance, belief: &Belief, action: usize) -> f64 {
    belief.probs.iter().enumerate().map(|(m, b)| b * model.mean_reward(m, action)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    pub policy: PolicyTree,
    pub value: f64,
    /// Distinct (steps remaining, belief) states evaluated.
    pub node_count: usize,
}

struct BeliefDp<'a> {
    model: &'a LmabInstance,
    memo: HashMap<(usize, Vec<i64>), (f64, usize)>,
}

impl BeliefDp<'_> {
    /// Optimal value with `remaining` steps left and the maximizing first action.
    fn solve(&mut self, remaining: usize, belief: &Belief) -> Result<(f64, usize)> {
        let key = (remaining, belief.key());
        if let Some(&hit) = self.memo.get(&key) {
            return Ok(hit);
        }
        if self.memo.len() >= STATE_GUARD {
            return Err(LmabError::GuardExceeded {
                what: "belief states",
                size: self.memo.len() as f64 + 1.0,
                limit: STATE_GUARD as f64,
            });
        }
        let model = self.model;
        let mut best = (f64::NEG_INFINITY, 0);
        for action in 0..model.num_actions() {
            let mut q = expected_reward(model, belief, action);
            if remaining > 1 {
                for obs in 0..model.num_values() {
                    let p: f64 =
                        belief.probs.iter().enumerate().map(|(m, b)| b * model.prob_row(m, action)[obs]).sum();
                    if p <= 0.0 {
                        continue;
                    }
                    let (next, _) = belief_update(model, belief, action, obs);
                    q += p * self.solve(remaining - 1, &next)?.0;
                }
            }
            if q > best.0 {
                best = (q, action);
            }
        }
        self.memo.insert(key, best);
        Ok(best)
    }
}

/// Beliefs depend only on the multiset of observed (action, value) pairs,
/// which bounds the distinct states: `sum_{t<H} C(t + pairs - 1, t)`.
fn reachable_state_bound(pairs: usize, horizon: usize) -> f64 {
    let mut total = 0.0;
    let mut term = 1.0;
    for t in 0..horizon {
        if t > 0 {
            term *= (t + pairs - 1) as f64 / t as f64;
        }
        total += term;
    }
    total
}

/// Optimal history-dependent policy of `model` over `horizon` steps.
///
/// Fails with [`LmabError::GuardExceeded`] when the reachable beliefs or the
/// policy tree outgrow their guards; callers then fall back to [`QmdpPolicy`].
pub fn plan_exact(model: &LmabInstance, horizon: usize) -> Result<PlanResult> {
    let z = model.num_values();
    if z == 0 {
        return Err(LmabError::InvalidArgument("planning needs a discrete instance".into()));
    }
    let nodes = complete_tree_nodes(z, horizon);
    if nodes > ENUMERATION_GUARD {
        return Err(LmabError::GuardExceeded { what: "policy tree", size: nodes, limit: ENUMERATION_GUARD });
    }
    let reachable = reachable_state_bound(model.num_actions() * z, horizon);
    if reachable > STATE_GUARD as f64 {
        return Err(LmabError::GuardExceeded { what: "belief states", size: reachable, limit: STATE_GUARD as f64 });
    }
    let mut dp = BeliefDp { model, memo: HashMap::new() };
    if horizon == 0 {
        return Ok(PlanResult { policy: PolicyTree::new(z, 0, Vec::new())?, value: 0.0, node_count: 0 });
    }
    let prior = Belief::prior(model);
    let (value, _) = dp.solve(horizon, &prior)?;
    let mut actions = vec![0usize; nodes as usize];
    let mut layer = vec![prior];
    let mut offset = 0;
    for depth in 0..horizon {
        let mut next_layer = Vec::with_capacity(layer.len() * z);
        for (i, belief) in layer.iter().enumerate() {
            let (_, action) = dp.solve(horizon - depth, belief)?;
            actions[offset + i] = action;
            if depth + 1 < horizon {
                for obs in 0..z {
                    let (child, impossible) = belief_update(model, belief, action, obs);
                    next_layer.push(if impossible { belief.clone() } else { child });
                }
            }
        }
        offset += layer.len();
        layer = next_layer;
    }
    Ok(PlanResult { policy: PolicyTree::new(z, horizon, actions)?, value, node_count: dp.memo.len() })
}

/// Greedy action on belief-weighted known-context values.
pub fn qmdp_action(model: &LmabInstance, belief: &Belief, remaining: usize) -> usize {
    MeanTable::new(model).qmdp_action(belief, remaining)
}

/// Per-(context, action) mean rewards and per-context best values.
#[derive(Clone, Debug)]
struct MeanTable {
    actions: usize,
    means: Vec<f64>,
    best: Vec<f64>,
}

impl MeanTable {
    fn new(model: &LmabInstance) -> Self {
        let actions = model.num_actions();
        let means: Vec<f64> = (0..model.num_contexts())
            .flat_map(|m| (0..actions).map(move |a| (m, a)))
            .map(|(m, a)| model.mean_reward(m, a))
            .collect();
        let best = means.chunks(actions).map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
        MeanTable { actions, means, best }
    }

    fn qmdp_action(&self, belief: &Belief, remaining: usize) -> usize {
        let future = remaining.saturating_sub(1) as f64;
        let mut choice = (f64::NEG_INFINITY, 0);
        for action in 0..self.actions {
            let q: f64 = belief
                .probs
                .iter()
                .enumerate()
                .map(|(m, b)| b * (self.means[m * self.actions + action] + future * self.best[m]))
                .sum();
            if q > choice.0 {
                choice = (q, action);
            }
        }
        choice.1
    }
}

/// QMDP policy tracking the belief online.
#[derive(Clone, Debug)]
pub struct QmdpPolicy {
    model: LmabInstance,
    table: MeanTable,
    horizon: usize,
}

impl QmdpPolicy {
    pub fn new(model: &LmabInstance) -> Self {
        QmdpPolicy { model: model.clone(), table: MeanTable::new(model), horizon: model.horizon() }
    }
}

impl Policy for QmdpPolicy {
    fn act(&self, history: &[Step]) -> usize {
        let belief = belief_after(&self.model, history);
        self.table.qmdp_action(&belief, self.horizon - history.len())
    }

    fn depth(&self) -> Option<usize> {
        Some(self.horizon)
    }
}

/// Value of the best single arm played every step.
pub fn best_fixed_arm_value(model: &LmabInstance) -> f64 {
    let best = (0..model.num_actions()).map(|a| model.pooled_mean(a)).fold(f64::NEG_INFINITY, f64::max);
    best * model.horizon() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct UcbResult {
    pub policy: StationaryPolicy,
    /// Reward of every pull in order.
    pub trace: Vec<f64>,
    pub pulls: Vec<u64>,
    pub means: Vec<f64>,
}

/// UCB1 over pooled episodes, ignoring contexts; `episodes * H` pulls.
///
/// The index is `mean + width * sqrt(2 ln t / pulls)`; the returned policy
/// plays the arm with the best empirical mean.
pub fn ucb_baseline<E: Environment>(env: &E, episodes: usize, width: f64, seed: u64) -> UcbResult {
    let a = env.num_actions();
    let mut rng = rng::stream_rng(seed, 0);
    let mut pulls = vec![0u64; a];
    let mut sums = vec![0.0; a];
    let mut trace = Vec::with_capacity(episodes * env.horizon());
    let mut t = 0u64;
    for _ in 0..episodes {
        let ctx = env.draw_context(&mut rng);
        for _ in 0..env.horizon() {
            t += 1;
            let arm = match pulls.iter().position(|&p| p == 0) {
                Some(first) => first,
                None => {
                    let bonus = 2.0 * (t as f64).ln();
                    let mut best = (f64::NEG_INFINITY, 0);
                    for (i, (&n, &s)) in pulls.iter().zip(&sums).enumerate() {
                        let idx = s / n as f64 + width * (bonus / n as f64).sqrt();
                        if idx > best.0 {
                            best = (idx, i);
                        }
                    }
                    best.1
                }
            };
            let r = env.draw_reward(ctx, arm, &mut rng).value;
            pulls[arm] += 1;
            sums[arm] += r;
            trace.push(r);
        }
    }
    let means: Vec<f64> = pulls.iter().zip(&sums).map(|(&n, &s)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
    let mut best = 0;
    for i in 1..a {
        if means[i] > means[best] {
            best = i;
        }
    }
    UcbResult { policy: StationaryPolicy(best), trace, pulls, means }
}
