mod common;

use common::*;
use lmab_core::design::{
    g_value, reconstruct_from_core, select_core_coordinates, solve_optimal_design, support_bound, FeatureMatrix,
    DEFAULT_MAX_ITER, DEFAULT_TOLERANCE,
};
use lmab_core::mle::{dataset_from_episodes, em_fit, log_likelihood, random_params, EmState};
use lmab_core::model::{
    exact_policy_value, exact_trajectory_distribution, generate_random_instance, validate_instance, GeneratorSpec,
    LmabInstance,
};
use lmab_core::moments::{exact_moment_tensor, wasserstein_distance, LatentParams};
use lmab_core::planning::{belief_update, best_fixed_arm_value, plan_exact, Belief, QmdpPolicy};
use lmab_core::recover::recover_reward_model;
use lmab_core::rng;
use lmab_core::subspace::{exact_second_moment, top_m_eigenspace};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

fn core_of(inst: &LmabInstance) -> lmab_core::design::CoreSet {
    let sub = top_m_eigenspace(&exact_second_moment(inst), inst.num_contexts()).unwrap();
    let phi = sub.feature_matrix().unwrap();
    let design = solve_optimal_design(&phi, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap();
    select_core_coordinates(&phi, &design).unwrap()
}

/// Generated instance of the largest rank the shape allows.
fn generic_instance(seed: u64, m: usize, a: usize, h: usize) -> LmabInstance {
    let spec = GeneratorSpec::new(m, a, 2, h, m.min(a));
    generate_random_instance(&spec, &mut rng::seeded(seed)).unwrap()
}

fn permuted_instance(inst: &LmabInstance, perm: &[usize]) -> LmabInstance {
    let weights = perm.iter().map(|&p| inst.weights()[p]).collect();
    let probs = perm
        .iter()
        .map(|&p| (0..inst.num_actions()).map(|a| inst.prob_row(p, a).to_vec()).collect())
        .collect();
    LmabInstance::discrete(weights, probs, inst.support().unwrap().clone(), inst.horizon()).unwrap()
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn instance_files_round_trip_bit_exactly(seed in any::<u64>(), m in 1usize..4, a in 1usize..5, z in 2usize..4, h in 1usize..6) {
        let inst = random_instance(seed, m, a, z, h);
        let back = LmabInstance::from_file_str(&inst.to_file_string().unwrap()).unwrap();
        prop_assert_eq!(back, inst);
    }

    #[test]
    fn trajectory_distribution_is_normalized(seed in any::<u64>(), m in 1usize..4, a in 1usize..4, h in 1usize..4) {
        let inst = random_instance(seed, m, a, 2, h);
        let tree = random_tree(seed ^ 1, a, 2, h);
        let total: f64 = exact_trajectory_distribution(&inst, &tree).unwrap().values().sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn exact_value_matches_brute_enumeration(seed in any::<u64>(), m in 1usize..4, a in 1usize..4, z in 2usize..4, h in 1usize..4) {
        let inst = random_instance(seed, m, a, z, h);
        let tree = random_tree(seed ^ 2, a, z, h);
        prop_assert!((exact_policy_value(&inst, &tree).unwrap() - brute_value(&inst, &tree)).abs() < 1e-12);
    }

    #[test]
    fn generated_rank_caps_second_moment_spectrum(seed in any::<u64>(), r in 1usize..4, extra in 0usize..3) {
        let spec = GeneratorSpec::new(r + extra, 4, 2, 3, r);
        let inst = generate_random_instance(&spec, &mut rng::seeded(seed)).unwrap();
        let mut eig: Vec<f64> = SymmetricEigen::new(inst.second_moment()).eigenvalues.iter().copied().collect();
        eig.sort_by(|x, y| y.total_cmp(x));
        prop_assert!(eig[r].abs() < 1e-10, "eigenvalue {} = {}", r + 1, eig[r]);
    }

    #[test]
    fn design_output_is_self_consistent(seed in any::<u64>(), d in 4usize..40, k in 1usize..5) {
        prop_assume!(k <= d);
        let mut r = rng::seeded(seed);
        let rows = DMatrix::from_fn(d, k, |_, _| r.random_range(-1.0..1.0));
        let phi = FeatureMatrix::plain(rows.clone()).unwrap();
        let design = solve_optimal_design(&phi, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).unwrap();
        let kf = k as f64;
        prop_assert!((design.g_value - g_value(&phi, &design.rho).unwrap()).abs() <= 1e-8);
        prop_assert!(design.g_value >= kf - 1e-6 && design.g_value <= 2.0 * kf);
        prop_assert!(design.support.len() <= support_bound(k));
        let core = select_core_coordinates(&phi, &design).unwrap();
        prop_assert!(core.max_row_l1() <= (2.0 * kf).sqrt() + 1e-8);
        for _ in 0..20 {
            let c = DVector::from_fn(k, |_, _| r.random_range(-1.0..1.0));
            let u: Vec<f64> = (&rows * c).iter().copied().collect();
            let back = reconstruct_from_core(&core, &core.restrict(&u)).unwrap();
            prop_assert!(sup_diff(&back, &u) <= 1e-8);
        }
    }

    #[test]
    fn exact_eigenspace_is_orthonormal_and_psd(seed in any::<u64>(), m in 1usize..4, a in 2usize..6) {
        let inst = random_instance(seed, m, a, 2, 2);
        let sub = top_m_eigenspace(&exact_second_moment(&inst), m).unwrap();
        let gram = sub.basis.transpose() * &sub.basis;
        prop_assert!((gram - DMatrix::identity(m, m)).amax() < 1e-10);
        prop_assert!(sub.eigenvalues.iter().all(|&l| l >= -1e-9));
    }

    #[test]
    fn tensors_match_naive_summation(seed in any::<u64>(), m in 1usize..4, a in 2usize..4, l in 1usize..5) {
        let inst = generic_instance(seed, m, a, 4);
        let core = core_of(&inst);
        prop_assume!(core.len() <= 6);
        let vectors: Vec<Vec<f64>> = (0..m).map(|c| core.restrict(&inst.reward_vector(c))).collect();
        let naive = naive_tensor(inst.weights(), &vectors, l);
        let fast = exact_moment_tensor(&inst, &core, l).unwrap();
        prop_assert!(sup_diff(&fast.entries, &naive) <= 1e-12);
    }

    #[test]
    fn wasserstein_is_a_metric_on_random_triples(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let [p, q, s] = [0u64, 1, 2].map(|i| random_params(m, n, rng::derive_seed(seed, i)));
        let pq = wasserstein_distance(&p, &q).unwrap();
        let qs = wasserstein_distance(&q, &s).unwrap();
        let ps = wasserstein_distance(&p, &s).unwrap();
        prop_assert!(ps <= pq + qs + 1e-9);
        prop_assert!(wasserstein_distance(&p, &p).unwrap().abs() <= 1e-12);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.rotate_left(seed as usize % m);
        prop_assert!((wasserstein_distance(&p.permuted(&perm), &q).unwrap() - pq).abs() <= 1e-12);
    }

    #[test]
    fn em_steps_never_lower_the_likelihood(seed in any::<u64>(), m in 1usize..4, n in 1usize..5, h in 1usize..5, count in 1usize..60) {
        let mut r = rng::seeded(seed);
        let episodes: Vec<(Vec<u32>, Vec<bool>)> = (0..count)
            .map(|_| ((0..h).map(|_| r.random_range(0..n as u32)).collect(), (0..h).map(|_| r.random_bool(0.5)).collect()))
            .collect();
        let data = dataset_from_episodes(n, &episodes).unwrap();
        let state = em_fit(&data, random_params(m, n, seed ^ 7), 30, 0.0);
        for pair in state.trace.windows(2) {
            prop_assert!(pair[1] - pair[0] >= -1e-10, "{} -> {}", pair[0], pair[1]);
        }
        for row in state.responsibilities.chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        let fresh = EmState::new(&data, state.params.clone());
        prop_assert!((fresh.log_likelihood - state.log_likelihood).abs() <= 1e-12 * state.log_likelihood.abs().max(1.0));
    }

    #[test]
    fn likelihood_ignores_component_labels(seed in any::<u64>(), m in 2usize..5, n in 1usize..4) {
        let mut r = rng::seeded(seed);
        let episodes: Vec<(Vec<u32>, Vec<bool>)> = (0..20)
            .map(|_| ((0..3).map(|_| r.random_range(0..n as u32)).collect(), (0..3).map(|_| r.random_bool(0.3)).collect()))
            .collect();
        let data = dataset_from_episodes(n, &episodes).unwrap();
        let params = random_params(m, n, seed);
        let ll = log_likelihood(&data, &params);
        for perm in permutations(m) {
            let other = log_likelihood(&data, &params.permuted(&perm));
            prop_assert!((other - ll).abs() <= 1e-12 * ll.abs().max(1.0));
        }
    }

    #[test]
    fn recovery_is_valid_idempotent_and_clip_monotone(seed in any::<u64>(), m in 1usize..4, a in 2usize..5) {
        let inst = generic_instance(seed, m, a, 3);
        let core = core_of(&inst);
        let truth = LatentParams::from_instance(&inst, &core);
        let support = inst.support().unwrap();
        let first = recover_reward_model(&truth, &core, support, 3).unwrap();
        prop_assert!(validate_instance(&first.instance).passed());
        for c in 0..m {
            prop_assert!(sup_diff(&first.instance.reward_vector(c), &inst.reward_vector(c)) <= 1e-10);
        }
        let again = recover_reward_model(&LatentParams::from_instance(&first.instance, &core), &core, support, 3).unwrap();
        for c in 0..m {
            prop_assert!(sup_diff(&again.instance.reward_vector(c), &first.instance.reward_vector(c)) <= 1e-10);
        }
        let mut r = rng::seeded(seed ^ 3);
        let direction: Vec<Vec<f64>> = (0..m).map(|_| (0..core.len()).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let mut last = 0.0;
        for step in 0..8 {
            let t = step as f64 * 0.25;
            let values = truth.core_values.iter().zip(&direction)
                .map(|(v, d)| v.iter().zip(d).map(|(x, y)| x + t * y).collect())
                .collect();
            let ray = LatentParams { weights: truth.weights.clone(), core_values: values };
            let rec = recover_reward_model(&ray, &core, support, 3).unwrap();
            prop_assert!(validate_instance(&rec.instance).passed());
            let mass = rec.total_clipped_mass();
            prop_assert!(mass >= last - 1e-10, "mass {mass} after {last}");
            last = mass;
        }
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn planner_dominates_heuristics_and_random_trees(seed in any::<u64>(), m in 1usize..4, a in 1usize..4, h in 1usize..5) {
        let inst = random_instance(seed, m, a, 2, h);
        let plan = plan_exact(&inst, h).unwrap();
        prop_assert!((plan.value - exact_policy_value(&inst, &plan.policy).unwrap()).abs() <= 1e-9);
        let qmdp = exact_policy_value(&inst, &QmdpPolicy::new(&inst)).unwrap();
        prop_assert!(plan.value >= qmdp - 1e-9);
        prop_assert!(plan.value >= best_fixed_arm_value(&inst) - 1e-9);
        for i in 0..100 {
            let tree = random_tree(rng::derive_seed(seed, i), a, 2, h);
            prop_assert!(plan.value >= exact_policy_value(&inst, &tree).unwrap() - 1e-9);
        }
    }

    #[test]
    fn relabeling_contexts_keeps_the_optimum(seed in any::<u64>(), m in 2usize..4, a in 1usize..4, h in 1usize..4) {
        let inst = random_instance(seed, m, a, 2, h);
        let base = plan_exact(&inst, h).unwrap().value;
        for perm in permutations(m) {
            let other = plan_exact(&permuted_instance(&inst, &perm), h).unwrap().value;
            prop_assert!((other - base).abs() <= 1e-12);
        }
    }

    #[test]
    fn belief_updates_commute(seed in any::<u64>(), m in 1usize..5, a in 1usize..4, z in 2usize..4) {
        let inst = random_instance(seed, m, a, z, 2);
        let mut r = rng::seeded(seed ^ 5);
        let b = Belief { probs: rng::dirichlet(&mut r, m, 1.0) };
        let (a1, a2) = (r.random_range(0..a), r.random_range(0..a));
        let (z1, z2) = (r.random_range(0..z), r.random_range(0..z));
        let (x, fx) = belief_update(&inst, &belief_update(&inst, &b, a1, z1).0, a2, z2);
        let (y, fy) = belief_update(&inst, &belief_update(&inst, &b, a2, z2).0, a1, z1);
        prop_assert_eq!(fx, fy);
        prop_assert!(sup_diff(&x.probs, &y.probs) <= 1e-12);
    }
}
