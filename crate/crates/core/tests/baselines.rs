use gflownet::baselines::{mh_sample_batch, mh_transition_matrix, neighbors, ppo_train, PpoConfig};
use gflownet::env::{uniform_policy, DagEnv};
use gflownet::flownet::Control;
use gflownet::hypergrid::{GridSpec, HyperGrid};
use gflownet::oracles::enumerate_states;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn target(grid: &HyperGrid) -> Vec<f64> {
    let r: Vec<f64> = grid.cells().map(|c| grid.effective_reward(&c)).collect();
    let z: f64 = r.iter().sum();
    r.into_iter().map(|v| v / z).collect()
}

#[test]
fn mh_satisfies_detailed_balance() {
    for r0 in [0.1, 1e-3] {
        let grid = HyperGrid::new(GridSpec::corners(1, 4, r0)).unwrap();
        let p = target(&grid);
        let m = mh_transition_matrix(&grid);
        for i in 0..p.len() {
            for j in 0..p.len() {
                assert!((p[i] * m[i][j] - p[j] * m[j][i]).abs() < 1e-12, "r0 {r0}: {i}->{j}");
            }
        }
    }
}

#[test]
fn mh_target_is_stationary() {
    let grid = HyperGrid::new(GridSpec::corners(2, 5, 0.01)).unwrap();
    let p = target(&grid);
    let m = mh_transition_matrix(&grid);
    for j in 0..p.len() {
        let flowed: f64 = (0..p.len()).map(|i| p[i] * m[i][j]).sum();
        assert!((flowed - p[j]).abs() < 1e-12);
    }
}

#[test]
fn mh_chain_is_irreducible_and_aperiodic() {
    let grid = HyperGrid::new(GridSpec::corners(2, 4, 1e-3)).unwrap();
    let m = mh_transition_matrix(&grid);
    let n = m.len();
    // Every cell reaches every other along positive-probability moves.
    for start in 0..n {
        let mut seen = vec![false; n];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                if m[i][j] > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "cell {start} does not reach every cell");
    }
    // A rejected proposal leaves a self-loop, which rules out periodicity.
    assert!((0..n).any(|i| m[i][i] > 0.0));
}

#[test]
fn proposals_are_unit_moves() {
    let grid = HyperGrid::new(GridSpec::corners(3, 4, 0.1)).unwrap();
    for c in grid.cells() {
        for d in neighbors(&grid, &c) {
            let dist: i32 = c.iter().zip(&d).map(|(&a, &b)| (a as i32 - b as i32).abs()).sum();
            assert_eq!(dist, 1);
        }
    }
}

#[test]
fn long_chain_approaches_the_target() {
    let grid = HyperGrid::new(GridSpec::corners(2, 8, 0.1)).unwrap();
    let p = target(&grid);
    let run = mh_sample_batch(&grid, 4, 250_000, &mut ChaCha8Rng::seed_from_u64(1));
    let l1: f64 = run.empirical.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
    assert!(l1 < 0.05, "summed L1 {l1}");
}

#[test]
fn heavy_entropy_keeps_ppo_near_uniform() {
    let grid = HyperGrid::new(GridSpec::corners(2, 6, 0.1)).unwrap();
    let cfg = PpoConfig {
        entropy_coef: 1e4,
        epochs: 1,
        hidden: vec![32, 32],
        budget_states: 1,
        seed: 4,
        ..PpoConfig::default()
    };
    let mut updates = 0;
    let policy = ppo_train(&grid, &cfg, |_, _| {
        updates += 1;
        Control::Stop
    })
    .unwrap();
    assert_eq!(updates, 1);
    let g = enumerate_states(&grid, 100_000).unwrap();
    let interior: Vec<_> = g.states.iter().filter(|s| !grid.is_terminal(s)).cloned().collect();
    for (s, (probs, _)) in interior.iter().zip(policy.evaluate(&grid, &interior).unwrap()) {
        let u = uniform_policy(grid.num_actions(), &grid.allowed_actions(s));
        let l1: f64 = probs.iter().zip(&u).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 < 1e-2, "{s}: {l1}");
    }
}
