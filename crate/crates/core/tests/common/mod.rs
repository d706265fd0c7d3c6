//! Independent brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use lmab_core::model::{LmabInstance, Policy, PolicyTree, RewardSupport, Step};
use lmab_core::rng;
use rand::Rng;

/// Random discrete instance with Dirichlet weights and reward rows.
pub fn random_instance(seed: u64, m: usize, a: usize, z: usize, h: usize) -> LmabInstance {
    let mut r = rng::seeded(seed);
    let weights = rng::dirichlet(&mut r, m, 1.0);
    let probs = (0..m).map(|_| (0..a).map(|_| rng::dirichlet(&mut r, z, 1.0)).collect()).collect();
    let support = RewardSupport::new((0..z).map(|i| i as f64 / (z - 1).max(1) as f64).collect()).unwrap();
    LmabInstance::discrete(weights, probs, support, h).unwrap()
}

/// Reward table of a perturbed copy: each row mixed toward a random row by `scale`.
pub fn perturbed(inst: &LmabInstance, seed: u64, scale: f64) -> LmabInstance {
    let mut r = rng::seeded(seed);
    let (m, a, z) = (inst.num_contexts(), inst.num_actions(), inst.num_values());
    let noise_w = rng::dirichlet(&mut r, m, 1.0);
    let weights: Vec<f64> = inst.weights().iter().zip(&noise_w).map(|(w, n)| (1.0 - scale) * w + scale * n).collect();
    let probs = (0..m)
        .map(|c| {
            (0..a)
                .map(|act| {
                    let noise = rng::dirichlet(&mut r, z, 1.0);
                    inst.prob_row(c, act).iter().zip(&noise).map(|(p, n)| (1.0 - scale) * p + scale * n).collect()
                })
                .collect()
        })
        .collect();
    LmabInstance::discrete(weights, probs, inst.support().unwrap().clone(), inst.horizon()).unwrap()
}

/// Uniformly random deterministic policy tree.
pub fn random_tree(seed: u64, a: usize, z: usize, h: usize) -> PolicyTree {
    let mut r = rng::seeded(seed);
    let nodes: usize = (0..h).map(|t| z.pow(t as u32)).sum();
    PolicyTree::new(z, h, (0..nodes).map(|_| r.random_range(0..a)).collect()).unwrap()
}

/// Expected total reward by summing over every context and every full
/// reward sequence, with no shortcuts.
pub fn brute_value(inst: &LmabInstance, policy: &dyn Policy) -> f64 {
    let (z, h) = (inst.num_values(), inst.horizon());
    let support = inst.support().unwrap();
    let mut total = 0.0;
    for m in 0..inst.num_contexts() {
        for code in 0..z.pow(h as u32) {
            let mut history = Vec::with_capacity(h);
            let mut rest = code;
            let mut prob = inst.weights()[m];
            let mut reward = 0.0;
            for _ in 0..h {
                let obs = rest % z;
                rest /= z;
                let action = policy.act(&history);
                prob *= inst.prob_row(m, action)[obs];
                reward += support.value(obs);
                history.push(Step { action, obs });
            }
            total += prob * reward;
        }
    }
    total
}

/// Every deterministic policy tree over `a` actions, `z` values and `h` steps.
pub fn all_trees(a: usize, z: usize, h: usize) -> Vec<PolicyTree> {
    let nodes: usize = (0..h).map(|t| z.pow(t as u32)).sum();
    let count = a.pow(nodes as u32);
    (0..count)
        .map(|mut code| {
            let actions = (0..nodes)
                .map(|_| {
                    let x = code % a;
                    code /= a;
                    x
                })
                .collect();
            PolicyTree::new(z, h, actions).unwrap()
        })
        .collect()
}

/// Order-`l` mixture tensor over all coordinates of the vectors, by nested
/// summation over every multi-index.
pub fn naive_tensor(weights: &[f64], vectors: &[Vec<f64>], order: usize) -> Vec<f64> {
    let dim = vectors[0].len();
    let cells = dim.pow(order as u32);
    (0..cells)
        .map(|cell| {
            let mut idx = Vec::with_capacity(order);
            let mut rest = cell;
            for _ in 0..order {
                idx.push(rest % dim);
                rest /= dim;
            }
            idx.reverse();
            weights
                .iter()
                .zip(vectors)
                .map(|(w, v)| w * idx.iter().map(|&i| v[i]).product::<f64>())
                .sum()
        })
        .collect()
}

pub fn sup_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// `M!` permutations of `0..m` in lexicographic order.
pub fn permutations(m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for first in 0..m {
        for tail in permutations(m - 1) {
            let mut p = vec![first];
            p.extend(tail.into_iter().map(|x| if x >= first { x + 1 } else { x }));
            out.push(p);
        }
    }
    out
}
