use std::collections::HashMap;

use gflownet::env::{DagEnv, ExplicitDag, NodeId};
use gflownet::hypergrid::{GridSpec, GridState, HyperGrid};
use gflownet::oracles::{
    canonical_flow, conservation_residual, count_paths, enumerate_states, for_each_path, induced_terminal_dist,
    random_flow, target_distribution, through_flow, tree_policy_terminal_dist, uniform_policy_action_value,
    ExactTables, StateGraph, DEFAULT_STATE_CAP,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_graph(n: usize, h: usize, r0: f64) -> StateGraph<GridState> {
    let env = HyperGrid::new(GridSpec::corners(n, h, r0)).unwrap();
    enumerate_states(&env, DEFAULT_STATE_CAP).unwrap()
}

fn max_abs_diff(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            assert_eq!(x.0, y.0);
            (x.1 - y.1).abs()
        })
        .fold(0.0, f64::max)
}

fn l1(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.1 - y.1).abs()).sum()
}

fn multinomial(c: &[u16]) -> u128 {
    let mut out: u128 = 1;
    let mut k: u128 = 0;
    for &ci in c {
        for j in 1..=ci as u128 {
            k += 1;
            out = out * k / j;
        }
    }
    out
}

#[test]
fn canonical_flow_reproduces_target() {
    let g = grid_graph(2, 8, 0.1);
    let flow = canonical_flow(&g);
    let got = induced_terminal_dist(&g, &flow).unwrap();
    assert!(max_abs_diff(&got, &target_distribution(&g)) < 1e-12);
}

#[test]
fn perturbed_flows_reproduce_target() {
    let g = grid_graph(2, 8, 0.1);
    let target = target_distribution(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let flow = random_flow(&g, &mut rng);
        let residual = conservation_residual(&g, &flow).into_iter().fold(0.0, f64::max);
        assert!(residual < 1e-12, "residual {residual}");
        let got = induced_terminal_dist(&g, &flow).unwrap();
        assert!(max_abs_diff(&got, &target) < 1e-10);
    }
}

#[test]
fn root_through_flow_is_partition_function() {
    let g = grid_graph(3, 4, 0.01);
    let z: f64 = g.terminals().map(|i| g.reward[i]).sum();
    let v = through_flow(&g, &canonical_flow(&g));
    assert!((v[0] - z).abs() < 1e-12 * z);
}

#[test]
fn canonical_residual_vanishes() {
    for (n, h) in [(1, 5), (2, 8), (3, 5)] {
        let g = grid_graph(n, h, 0.1);
        let flow = canonical_flow(&g);
        let worst = conservation_residual(&g, &flow).into_iter().fold(0.0, f64::max);
        assert!(worst < 1e-13, "n={n} h={h}: {worst}");
    }
}

#[test]
fn tree_policy_is_biased_by_path_count() {
    let g = grid_graph(2, 3, 0.1);
    let mut paths: HashMap<usize, u64> = HashMap::new();
    for_each_path(&g, |t, _| *paths.entry(t).or_default() += 1);
    let weighted: Vec<(usize, f64)> = g.terminals().map(|i| (i, paths[&i] as f64 * g.reward[i])).collect();
    let total: f64 = weighted.iter().map(|w| w.1).sum();
    let expected: Vec<(usize, f64)> = weighted.into_iter().map(|(i, w)| (i, w / total)).collect();
    let got = tree_policy_terminal_dist(&g);
    assert!(max_abs_diff(&got, &expected) < 1e-10);
    assert!(l1(&got, &target_distribution(&g)) > 1e-2);
}

#[test]
fn tree_policy_on_three_to_one_dag() {
    // X is reachable by three paths, Y by one; both have reward 1.
    let dag = ExplicitDag::new(
        6,
        &[(0, 0, 1), (0, 1, 2), (0, 2, 3), (1, 0, 4), (2, 0, 4), (3, 0, 4), (3, 1, 5)],
        &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
    )
    .unwrap();
    let g = enumerate_states(&dag, 100).unwrap();
    let dist: HashMap<NodeId, f64> = tree_policy_terminal_dist(&g).into_iter().map(|(i, p)| (g.states[i], p)).collect();
    assert!((dist[&NodeId(4)] - 0.75).abs() < 1e-12);
    assert!((dist[&NodeId(5)] - 0.25).abs() < 1e-12);
    let fair: HashMap<NodeId, f64> =
        induced_terminal_dist(&g, &canonical_flow(&g)).unwrap().into_iter().map(|(i, p)| (g.states[i], p)).collect();
    assert!((fair[&NodeId(4)] - 0.5).abs() < 1e-12);
}

#[test]
fn tree_policy_matches_target_on_a_tree() {
    let g = grid_graph(1, 6, 0.1);
    assert!(max_abs_diff(&tree_policy_terminal_dist(&g), &target_distribution(&g)) < 1e-12);
}

#[test]
fn uniform_policy_value_scales_tree_flow() {
    for h in [3, 6] {
        let g = grid_graph(1, h, 0.1);
        let flow = canonical_flow(&g);
        let (q, f) = uniform_policy_action_value(&g).unwrap();
        for i in 0..g.len() {
            for k in 0..g.children[i].len() {
                let want = flow[i][k] * f[i];
                assert!((q[i][k] - want).abs() <= 1e-9 * want.max(1.0), "state {} action {k}", g.states[i]);
            }
        }
    }
}

#[test]
fn uniform_policy_value_rejects_dags() {
    let g = grid_graph(2, 3, 0.1);
    assert!(uniform_policy_action_value(&g).is_err());
}

#[test]
fn path_counts_are_multinomial() {
    for (n, h) in [(1, 6), (2, 6), (3, 4), (3, 6)] {
        let g = grid_graph(n, h, 0.1);
        let counts = count_paths(&g).unwrap();
        for (i, s) in g.states.iter().enumerate() {
            assert_eq!(counts[i], multinomial(&s.coords), "{s}");
        }
    }
}

#[test]
fn path_counts_agree_with_enumeration() {
    for (n, h) in [(2, 5), (3, 4)] {
        let g = grid_graph(n, h, 0.1);
        let counts = count_paths(&g).unwrap();
        let mut seen = vec![0u128; g.len()];
        for_each_path(&g, |t, _| seen[t] += 1);
        for t in g.terminals() {
            assert_eq!(seen[t], counts[t]);
        }
    }
}

#[test]
fn enumerated_graph_respects_parent_child_duality() {
    let env = HyperGrid::new(GridSpec::corners(3, 4, 0.1)).unwrap();
    let g = enumerate_states(&env, DEFAULT_STATE_CAP).unwrap();
    for (i, kids) in g.children.iter().enumerate() {
        for &(a, c) in kids {
            assert!(g.parents[c].contains(&(i, a)));
            assert!(env.parents(&g.states[c]).contains(&(g.states[i].clone(), a)));
        }
    }
}

#[test]
fn exact_tables_on_a_three_cell_line() {
    // Points -1, 0, 1: both ends lie in the outer band, the centre does not.
    let g = grid_graph(1, 3, 0.1);
    let tables = ExactTables::build(&g).unwrap();
    assert!((tables.partition_function - 1.3).abs() < 1e-15);
    assert!((tables.states[0].through_flow - 1.3).abs() < 1e-15);
    let mut sinks: Vec<_> = tables.states.iter().filter(|r| r.terminal).collect();
    sinks.sort_by(|a, b| a.state.cmp(&b.state));
    let want = [0.6 / 1.3, 0.1 / 1.3, 0.6 / 1.3];
    assert_eq!(sinks.len(), 3);
    for (r, w) in sinks.iter().zip(want) {
        assert_eq!(r.path_count, 1);
        assert!((r.target_probability.unwrap() - w).abs() < 1e-15, "{}", r.state);
        assert!((r.tree_policy_probability.unwrap() - w).abs() < 1e-15);
    }
    let json: serde_json::Value = serde_json::from_str(&tables.to_json()).unwrap();
    assert_eq!(json["states"].as_array().unwrap().len(), g.len());
}
