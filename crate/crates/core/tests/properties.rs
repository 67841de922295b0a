use gflownet::env::{replay, rollout, uniform_policy, ActionId, DagEnv, ExplicitDag};
use gflownet::flownet::policy_from_log_flows;
use gflownet::hypergrid::{GridSpec, HyperGrid};
use gflownet::oracles::{
    count_paths, enumerate_states, induced_terminal_dist, random_flow, target_distribution, tree_policy_terminal_dist,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_strategy() -> impl Strategy<Value = (usize, usize, f64)> {
    (1usize..=3, 2usize..=6, prop_oneof![Just(0.1), Just(0.01), Just(1e-3)])
}

/// A random layered DAG: every node after the root gets one to three
/// parents among earlier nodes; nodes left without children are terminal.
fn dag_strategy() -> impl Strategy<Value = ExplicitDag> {
    (3usize..9, any::<u64>()).prop_map(|(nodes, seed)| {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        let mut next_action = vec![0usize; nodes];
        for v in 1..nodes {
            let mut parents: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..v)).collect();
            parents.sort();
            parents.dedup();
            for p in parents {
                edges.push((p, next_action[p], v));
                next_action[p] += 1;
            }
        }
        let rewards: Vec<f64> = (0..nodes).map(|_| rng.gen_range(0.1..3.0)).collect();
        ExplicitDag::new(nodes, &edges, &rewards).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parents_invert_transitions((n, h, r0) in grid_strategy(), seed in any::<u64>()) {
        let env = HyperGrid::new(GridSpec::corners(n, h, r0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let na = env.num_actions();
        let t = rollout(&env, |_, a| uniform_policy(na, a), &mut rng).unwrap();
        prop_assert!(t.len() <= env.horizon());
        for (k, (s, a)) in t.steps.iter().enumerate() {
            let next = t.states().nth(k + 1).unwrap();
            prop_assert!(env.parents(next).contains(&(s.clone(), *a)));
            for (p, b) in env.parents(s) {
                prop_assert_eq!(env.transition(&p, b), Some(s.clone()));
            }
        }
        let actions: Vec<ActionId> = t.actions().collect();
        prop_assert_eq!(replay(&env, &actions).unwrap(), t);
    }

    #[test]
    fn valid_flows_induce_the_target((n, h, r0) in grid_strategy(), seed in any::<u64>()) {
        let env = HyperGrid::new(GridSpec::corners(n, h, r0)).unwrap();
        let g = enumerate_states(&env, 100_000).unwrap();
        let flow = random_flow(&g, &mut ChaCha8Rng::seed_from_u64(seed));
        let got = induced_terminal_dist(&g, &flow).unwrap();
        for ((_, p), (_, q)) in got.iter().zip(target_distribution(&g)) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn cell_indices_roundtrip((n, h, r0) in grid_strategy()) {
        let env = HyperGrid::new(GridSpec::corners(n, h, r0)).unwrap();
        for (i, c) in env.cells().enumerate() {
            prop_assert_eq!(env.cell_index(&c), i);
            prop_assert_eq!(env.cell_coords(i), c);
        }
    }

    #[test]
    fn policy_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-20.0f64..20.0, 4),
        mask in prop::collection::vec(any::<bool>(), 4),
        shift in -50.0f64..50.0,
    ) {
        let allowed: Vec<ActionId> = (0..4).filter(|&i| mask[i]).map(ActionId).collect();
        prop_assume!(!allowed.is_empty());
        let p = policy_from_log_flows(&logits, &allowed);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..4 {
            if !mask[i] {
                prop_assert_eq!(p[i], 0.0);
            }
        }
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let q = policy_from_log_flows(&shifted, &allowed);
        for i in 0..4 {
            prop_assert!((p[i] - q[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_policy_weights_by_path_count(dag in dag_strategy()) {
        let g = enumerate_states(&dag, 1000).unwrap();
        let counts = count_paths(&g).unwrap();
        let weights: Vec<f64> = g.terminals().map(|t| counts[t] as f64 * g.reward[t]).collect();
        let total: f64 = weights.iter().sum();
        for ((_, p), w) in tree_policy_terminal_dist(&g).into_iter().zip(weights) {
            prop_assert!((p - w / total).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let got = induced_terminal_dist(&g, &random_flow(&g, &mut rng)).unwrap();
        for ((_, p), (_, q)) in got.iter().zip(target_distribution(&g)) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
