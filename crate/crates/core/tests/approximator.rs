use gflownet::env::{ActionId, DagEnv, Featurize, Trajectory};
use gflownet::flownet::{
    exact_terminal_dist, exploratory_policy, flow_matching_loss, flow_policy, sample_terminals, FlowModel, LossKind,
    LossParams, MlpFlow, TabularFlow,
};
use gflownet::hypergrid::{GridSpec, GridState, HyperGrid};
use gflownet::nn::{Adam, Mlp};
use gflownet::oracles::{canonical_flow, enumerate_states, random_flow, target_distribution, StateGraph, EdgeValues};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(n: usize, h: usize) -> (HyperGrid, StateGraph<GridState>) {
    let env = HyperGrid::new(GridSpec::corners(n, h, 0.1)).unwrap();
    let g = enumerate_states(&env, 100_000).unwrap();
    (env, g)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// One backward walk per sink, so every state of the grid is visited.
fn covering_batch(env: &HyperGrid, g: &StateGraph<GridState>, seed: u64) -> Vec<Trajectory<GridState>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.terminals().map(|t| env.backward_walk(g.states[t].clone(), &mut rng).unwrap()).collect()
}

#[test]
fn network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for widths in [vec![3, 5, 2], vec![4, 7, 6, 3], vec![6, 16, 16, 5]] {
        let mut net = Mlp::new(&widths, &mut rng).unwrap();
        let batch = 3;
        let x: Vec<f64> = (0..batch * widths[0]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..batch * widths[widths.len() - 1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        net.forward(&x, batch).unwrap();
        let grads = net.backward(&g).unwrap();
        let objective = |net: &Mlp| -> f64 { net.predict(&x, batch).unwrap().iter().zip(&g).map(|(y, w)| y * w).sum() };
        let h = 1e-6;
        for p in 0..net.num_params() {
            let orig = net.params()[p];
            net.params_mut()[p] = orig + h;
            let up = objective(&net);
            net.params_mut()[p] = orig - h;
            let down = objective(&net);
            net.params_mut()[p] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(grads[p], fd) < 1e-4, "widths {widths:?} param {p}: {} vs {fd}", grads[p]);
        }
    }
}

fn loss_gradient_check(kind: LossKind) {
    let (env, _) = grid(2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = MlpFlow::new(&env, &[12, 12], &mut rng).unwrap();
    let batch = gflownet::flownet::sample_trajectories(&model, &env, 4, 0.5, &mut rng).unwrap();
    let params = LossParams { kind, ..LossParams::default() };
    let out = flow_matching_loss(&mut model, &env, &batch, &params).unwrap();
    let h = 1e-5;
    for p in 0..model.net.num_params() {
        let orig = model.net.params()[p];
        model.net.params_mut()[p] = orig + h;
        let up = flow_matching_loss(&mut model, &env, &batch, &params).unwrap().loss;
        model.net.params_mut()[p] = orig - h;
        let down = flow_matching_loss(&mut model, &env, &batch, &params).unwrap().loss;
        model.net.params_mut()[p] = orig;
        let fd = (up - down) / (2.0 * h);
        // Parameters with negligible influence are dominated by rounding.
        if fd.abs().max(out.grads[p].abs()) < 1e-7 {
            continue;
        }
        assert!(rel_err(out.grads[p], fd) < 1e-4, "{kind:?} param {p}: {} vs {fd}", out.grads[p]);
    }
}

#[test]
fn log_loss_gradients_match_finite_differences() {
    loss_gradient_check(LossKind::LogScale);
}

#[test]
fn raw_loss_gradients_match_finite_differences() {
    loss_gradient_check(LossKind::RawScale);
}

#[test]
fn canonical_lookup_has_zero_loss_everywhere() {
    let (env, g) = grid(2, 6);
    let mut model = TabularFlow::from_edge_flows(&g, env.num_actions(), &canonical_flow(&g));
    let batch = covering_batch(&env, &g, 0);
    for kind in [LossKind::LogScale, LossKind::RawScale] {
        let out = flow_matching_loss(&mut model, &env, &batch, &LossParams { kind, ..LossParams::default() }).unwrap();
        assert!(out.loss < 1e-20, "{kind:?}: {}", out.loss);
    }
}

#[test]
fn zero_loss_gives_the_target_sampler() {
    let (env, g) = grid(2, 4);
    let mut model = TabularFlow::zeros(&g, env.num_actions());
    let batch = covering_batch(&env, &g, 1);
    let params = LossParams::default();
    let mut adam = Adam::new(FlowModel::<HyperGrid>::params(&model).len(), 0.05);
    let mut loss = f64::INFINITY;
    for _ in 0..20_000 {
        let out = flow_matching_loss(&mut model, &env, &batch, &params).unwrap();
        loss = out.loss;
        if loss < 1e-10 {
            break;
        }
        adam.step(FlowModel::<HyperGrid>::params_mut(&mut model), &out.grads).unwrap();
    }
    assert!(loss < 1e-8, "loss stalled at {loss}");
    let got = exact_terminal_dist(&model, &env, &g).unwrap();
    let l1: f64 = got.iter().zip(target_distribution(&g)).map(|(p, (_, q))| (p - q).abs()).sum();
    assert!(l1 < 1e-3, "L1 {l1}");
}

/// The grid with one parent hidden from a chosen state.
struct DropParent {
    inner: HyperGrid,
    state: GridState,
    drop: usize,
}

impl DagEnv for DropParent {
    type State = GridState;
    fn initial_state(&self) -> GridState {
        self.inner.initial_state()
    }
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }
    fn allowed_actions(&self, s: &GridState) -> Vec<ActionId> {
        self.inner.allowed_actions(s)
    }
    fn transition(&self, s: &GridState, a: ActionId) -> Option<GridState> {
        self.inner.transition(s, a)
    }
    fn parents(&self, s: &GridState) -> Vec<(GridState, ActionId)> {
        let mut p = self.inner.parents(s);
        if *s == self.state {
            p.remove(self.drop);
        }
        p
    }
    fn is_terminal(&self, s: &GridState) -> bool {
        self.inner.is_terminal(s)
    }
    fn reward(&self, s: &GridState) -> f64 {
        self.inner.reward(s)
    }
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }
}

#[test]
fn every_parent_counts_toward_in_flow() {
    let (env, g) = grid(2, 4);
    let flow = canonical_flow(&g);
    let batch = covering_batch(&env, &g, 2);
    let params = LossParams::default();
    let mut full = TabularFlow::from_edge_flows(&g, env.num_actions(), &flow);
    let base = flow_matching_loss(&mut full, &env, &batch, &params).unwrap().loss;
    let mut checked = 0;
    for (i, s) in g.states.iter().enumerate() {
        for drop in 0..g.parents[i].len() {
            if g.parents[i].len() < 2 {
                continue;
            }
            let cut = DropParent { inner: env.clone(), state: s.clone(), drop };
            let mut model = TabularFlow::from_edge_flows(&g, env.num_actions(), &flow);
            let loss = flow_matching_loss(&mut model, &cut, &batch, &params).unwrap().loss;
            assert!(loss > base + 1e-6, "dropping parent {drop} of {s}: {loss} vs {base}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

/// The grid with action labels permuted by `perm` (new label = perm[old]).
struct Relabeled {
    inner: HyperGrid,
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl DagEnv for Relabeled {
    type State = GridState;
    fn initial_state(&self) -> GridState {
        self.inner.initial_state()
    }
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }
    fn allowed_actions(&self, s: &GridState) -> Vec<ActionId> {
        let mut a: Vec<ActionId> = self.inner.allowed_actions(s).into_iter().map(|a| ActionId(self.perm[a.0])).collect();
        a.sort();
        a
    }
    fn transition(&self, s: &GridState, a: ActionId) -> Option<GridState> {
        self.inner.transition(s, ActionId(self.inv[a.0]))
    }
    fn parents(&self, s: &GridState) -> Vec<(GridState, ActionId)> {
        self.inner.parents(s).into_iter().map(|(p, a)| (p, ActionId(self.perm[a.0]))).collect()
    }
    fn is_terminal(&self, s: &GridState) -> bool {
        self.inner.is_terminal(s)
    }
    fn reward(&self, s: &GridState) -> f64 {
        self.inner.reward(s)
    }
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }
}

#[test]
fn loss_ignores_action_labels() {
    let (env, g) = grid(2, 5);
    let perm = vec![2, 0, 1];
    let mut inv = vec![0; 3];
    for (old, &new) in perm.iter().enumerate() {
        inv[new] = old;
    }
    let relabeled = Relabeled { inner: env.clone(), perm: perm.clone(), inv };
    let g2 = enumerate_states(&relabeled, 100_000).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Arbitrary positive edge values, so the loss is far from zero.
    let values: EdgeValues = random_flow(&g, &mut rng)
        .into_iter()
        .map(|row| row.into_iter().map(|v| v * rng.gen_range(0.2..5.0)).collect())
        .collect();
    let lookup: std::collections::HashMap<(GridState, usize), f64> = g
        .children
        .iter()
        .enumerate()
        .flat_map(|(i, kids)| kids.iter().enumerate().map(move |(k, &(a, _))| ((i, k), a)))
        .map(|((i, k), a)| ((g.states[i].clone(), perm[a.0]), values[i][k]))
        .collect();
    let values2: EdgeValues = g2
        .children
        .iter()
        .enumerate()
        .map(|(i, kids)| kids.iter().map(|&(a, _)| lookup[&(g2.states[i].clone(), a.0)]).collect())
        .collect();
    let mut m1 = TabularFlow::from_edge_flows(&g, env.num_actions(), &values);
    let mut m2 = TabularFlow::from_edge_flows(&g2, env.num_actions(), &values2);
    let batch = covering_batch(&env, &g, 4);
    let params = LossParams::default();
    let a = flow_matching_loss(&mut m1, &env, &batch, &params).unwrap().loss;
    let b = flow_matching_loss(&mut m2, &relabeled, &batch, &params).unwrap().loss;
    assert!(a > 1e-3);
    assert!((a - b).abs() <= 1e-12 * a, "{a} vs {b}");
}

fn chi_square(counts: &[f64], probs: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    counts.iter().zip(probs).map(|(c, p)| (c - n * p).powi(2) / (n * p)).sum()
}

#[test]
fn full_exploration_is_uniform() {
    let (env, _) = grid(2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = MlpFlow::new(&env, &[16], &mut rng).unwrap();
    let s = GridState::cell(&[1, 2]);
    let mut counts = [0.0; 3];
    for _ in 0..10_000 {
        counts[exploratory_policy(&model, &env, &s, 1.0 - 1e-15, &mut rng).unwrap().0] += 1.0;
    }
    // Two degrees of freedom: the 0.1% critical value is 13.82.
    assert!(chi_square(&counts, &[1.0 / 3.0; 3]) < 13.82);
}

#[test]
fn exploration_mixes_with_the_flow_policy() {
    let (env, _) = grid(2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut model = MlpFlow::new(&env, &[16], &mut rng).unwrap();
    // Sharpen the policy so the mixture differs visibly from both parts.
    let last = model.net.num_layers() - 1;
    model.net.bias_mut(last).copy_from_slice(&[2.0, 0.0, -1.0]);
    let s = GridState::cell(&[0, 0]);
    let pi = flow_policy(&model, &env, &s).unwrap();
    let mix: Vec<f64> = pi.iter().map(|p| 0.05 / 3.0 + 0.95 * p).collect();
    let mut counts = [0.0; 3];
    for _ in 0..10_000 {
        counts[exploratory_policy(&model, &env, &s, 0.05, &mut rng).unwrap().0] += 1.0;
    }
    assert!(chi_square(&counts, &mix) < 13.82, "counts {counts:?} vs {mix:?}");
}

#[test]
fn sampled_frequencies_lie_within_three_sigma() {
    let (env, g) = grid(2, 4);
    let model = TabularFlow::from_edge_flows(&g, env.num_actions(), &canonical_flow(&g));
    let draws = 100_000;
    let sinks = sample_terminals(&model, &env, draws, 21).unwrap();
    let index: std::collections::HashMap<&GridState, usize> =
        g.terminals().enumerate().map(|(k, t)| (&g.states[t], k)).collect();
    let mut counts = vec![0.0; index.len()];
    for s in &sinks {
        counts[index[s]] += 1.0;
    }
    for ((_, p), c) in target_distribution(&g).into_iter().zip(counts) {
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((c / draws as f64 - p).abs() <= 3.0 * sigma, "{} vs {p}", c / draws as f64);
    }
}

#[test]
fn features_are_one_hot() {
    let (env, _) = grid(3, 5);
    let mut row = vec![0.0; env.feature_dim()];
    env.featurize(&GridState::cell(&[4, 0, 2]), &mut row);
    assert_eq!(row.iter().sum::<f64>(), 3.0);
    assert_eq!(row[4], 1.0);
    assert_eq!(row[5], 1.0);
    assert_eq!(row[12], 1.0);
}
