//! Flow networks: models that predict log edge flows, the flow-matching
//! losses, the induced sampling policy and the training loop.
//!
//! A model maps a state to one log-flow per action. Entries for actions
//! that are not allowed in the state are ignored everywhere: they never
//! enter a sum, a softmax or a gradient.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{sample_index, ActionId, DagEnv, EnvError, Featurize, Trajectory};
use crate::nn::{Adam, Mlp, NnError};
use crate::oracles::{self, EdgeValues, OracleError, StateGraph};

#[derive(Debug, Error)]
pub enum GfnError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("state {0} is not in the flow table")]
    UnknownState(String),
    #[error("parameters became non-finite at step {0}")]
    NonFinite(u64),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// A differentiable map from states to per-action log-flows.
pub trait FlowModel<E: DagEnv> {
    /// Log-flows for `states`, row-major with `env.num_actions()` columns.
    fn predict(&self, env: &E, states: &[E::State]) -> Result<Vec<f64>, GfnError>;

    /// Like [`FlowModel::predict`] but records what `backward` needs.
    fn forward(&mut self, env: &E, states: &[E::State]) -> Result<Vec<f64>, GfnError>;

    /// Parameter gradient of `sum(grad * output)` for the last `forward`.
    fn backward(&mut self, grad: &[f64]) -> Result<Vec<f64>, GfnError>;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];
}

/// The neural flow model: one-hot features through a dense network.
#[derive(Debug, Clone)]
pub struct MlpFlow {
    pub net: Mlp,
}

impl MlpFlow {
    /// Default architecture: two hidden layers of 256 units.
    pub const DEFAULT_HIDDEN: [usize; 2] = [256, 256];

    pub fn new<E: Featurize, R: Rng + ?Sized>(env: &E, hidden: &[usize], rng: &mut R) -> Result<Self, GfnError> {
        let mut widths = vec![env.feature_dim()];
        widths.extend_from_slice(hidden);
        widths.push(env.num_actions());
        Ok(Self { net: Mlp::new(&widths, rng)? })
    }

    pub fn from_net<E: Featurize>(env: &E, net: Mlp) -> Result<Self, GfnError> {
        if net.input_dim() != env.feature_dim() || net.output_dim() != env.num_actions() {
            return Err(GfnError::Config(format!(
                "network widths {:?} do not fit the environment ({} features, {} actions)",
                net.widths(),
                env.feature_dim(),
                env.num_actions()
            )));
        }
        Ok(Self { net })
    }

    fn features<E: Featurize>(env: &E, states: &[E::State]) -> Vec<f64> {
        let d = env.feature_dim();
        let mut x = vec![0.0; states.len() * d];
        for (s, row) in states.iter().zip(x.chunks_mut(d)) {
            env.featurize(s, row);
        }
        x
    }
}

impl<E: Featurize> FlowModel<E> for MlpFlow {
    fn predict(&self, env: &E, states: &[E::State]) -> Result<Vec<f64>, GfnError> {
        Ok(self.net.predict(&Self::features(env, states), states.len())?)
    }

    fn forward(&mut self, env: &E, states: &[E::State]) -> Result<Vec<f64>, GfnError> {
        Ok(self.net.forward(&Self::features(env, states), states.len())?)
    }

    fn backward(&mut self, grad: &[f64]) -> Result<Vec<f64>, GfnError> {
        Ok(self.net.backward(grad)?)
    }

    fn params(&self) -> &[f64] {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }
}

/// One free parameter per (state, action): a lookup-table flow model over
/// an enumerated state graph.
#[derive(Debug, Clone)]
pub struct TabularFlow<S> {
    index: HashMap<S, usize>,
    num_actions: usize,
    table: Vec<f64>,
    rows: Option<Vec<usize>>,
}

impl<S: Clone + Eq + std::hash::Hash + std::fmt::Display> TabularFlow<S> {
    /// All log-flows zero, i.e. uniform edge flows.
    pub fn zeros(graph: &StateGraph<S>, num_actions: usize) -> Self {
        let index: HashMap<S, usize> = graph.states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { index, num_actions, table: vec![0.0; graph.len() * num_actions], rows: None }
    }

    /// Loads `log(flow)` for every edge of the graph.
    pub fn from_edge_flows(graph: &StateGraph<S>, num_actions: usize, flow: &EdgeValues) -> Self {
        let mut t = Self::zeros(graph, num_actions);
        for (i, kids) in graph.children.iter().enumerate() {
            for (k, &(a, _)) in kids.iter().enumerate() {
                t.table[i * num_actions + a.0] = flow[i][k].ln();
            }
        }
        t
    }

    fn lookup(&self, states: &[S]) -> Result<Vec<usize>, GfnError> {
        states
            .iter()
            .map(|s| self.index.get(s).copied().ok_or_else(|| GfnError::UnknownState(s.to_string())))
            .collect()
    }

    fn gather(&self, rows: &[usize]) -> Vec<f64> {
        let a = self.num_actions;
        rows.iter().flat_map(|&r| self.table[r * a..(r + 1) * a].iter().copied()).collect()
    }
}

impl<E: DagEnv> FlowModel<E> for TabularFlow<E::State> {
    fn predict(&self, _env: &E, states: &[E::State]) -> Result<Vec<f64>, GfnError> {
        Ok(self.gather(&self.lookup(states)?))
    }

    fn forward(&mut self, _env: &E, states: &[E::State]) -> Result<Vec<f64>, GfnError> {
        let rows = self.lookup(states)?;
        let out = self.gather(&rows);
        self.rows = Some(rows);
        Ok(out)
    }

    fn backward(&mut self, grad: &[f64]) -> Result<Vec<f64>, GfnError> {
        let rows = self.rows.take().ok_or(NnError::NoTape)?;
        let a = self.num_actions;
        if grad.len() != rows.len() * a {
            return Err(NnError::ShapeMismatch { expected: rows.len() * a, got: grad.len() }.into());
        }
        let mut g = vec![0.0; self.table.len()];
        for (k, &r) in rows.iter().enumerate() {
            for j in 0..a {
                g[r * a + j] += grad[k * a + j];
            }
        }
        Ok(g)
    }

    fn params(&self) -> &[f64] {
        &self.table
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }
}

/// `log(sum exp(v))`, with `-inf` for an empty input.
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax of `log_flows` over the allowed actions; zero elsewhere.
pub fn policy_from_log_flows(log_flows: &[f64], allowed: &[ActionId]) -> Vec<f64> {
    let mut p = vec![0.0; log_flows.len()];
    let m = allowed.iter().map(|a| log_flows[a.0]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for a in allowed {
        let w = (log_flows[a.0] - m).exp();
        p[a.0] = w;
        total += w;
    }
    for a in allowed {
        p[a.0] /= total;
    }
    p
}

/// The policy induced by the model's flows: `pi(a|s) = Q(s,a) / sum_b Q(s,b)`.
pub fn flow_policy<E: DagEnv, M: FlowModel<E>>(model: &M, env: &E, s: &E::State) -> Result<Vec<f64>, GfnError> {
    if env.is_terminal(s) {
        return Err(EnvError::TerminalState(s.to_string()).into());
    }
    let q = model.predict(env, std::slice::from_ref(s))?;
    Ok(policy_from_log_flows(&q, &env.allowed_actions(s)))
}

fn choose_action<R: Rng + ?Sized>(probs: &[f64], allowed: &[ActionId], explore: f64, rng: &mut R) -> ActionId {
    if explore > 0.0 && rng.gen::<f64>() < explore {
        *allowed.choose(rng).expect("non-terminal states have actions")
    } else {
        ActionId(sample_index(rng, probs))
    }
}

/// With probability `explore` a uniform allowed action, otherwise a draw
/// from [`flow_policy`].
pub fn exploratory_policy<E: DagEnv, M: FlowModel<E>, R: Rng + ?Sized>(
    model: &M,
    env: &E,
    s: &E::State,
    explore: f64,
    rng: &mut R,
) -> Result<ActionId, GfnError> {
    let probs = flow_policy(model, env, s)?;
    Ok(choose_action(&probs, &env.allowed_actions(s), explore, rng))
}

/// Samples `count` trajectories in lockstep, one batched model call per step.
pub fn sample_trajectories<E: DagEnv, M: FlowModel<E>, R: Rng + ?Sized>(
    model: &M,
    env: &E,
    count: usize,
    explore: f64,
    rng: &mut R,
) -> Result<Vec<Trajectory<E::State>>, GfnError> {
    let na = env.num_actions();
    let mut current: Vec<E::State> = vec![env.initial_state(); count];
    let mut steps: Vec<Vec<(E::State, ActionId)>> = vec![Vec::new(); count];
    let mut active: Vec<usize> = (0..count).collect();
    while !active.is_empty() {
        let batch: Vec<E::State> = active.iter().map(|&i| current[i].clone()).collect();
        let q = model.predict(env, &batch)?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let s = &batch[k];
            let allowed = env.allowed_actions(s);
            let probs = policy_from_log_flows(&q[k * na..(k + 1) * na], &allowed);
            let a = choose_action(&probs, &allowed, explore, rng);
            let next = env.transition(s, a).expect("sampled actions are allowed");
            steps[i].push((s.clone(), a));
            if steps[i].len() > env.horizon() {
                return Err(EnvError::HorizonExceeded(env.horizon()).into());
            }
            let done = env.is_terminal(&next);
            current[i] = next;
            if !done {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(steps
        .into_iter()
        .zip(current)
        .map(|(steps, final_state)| {
            let reward = env.reward(&final_state);
            Trajectory { steps, final_state, reward }
        })
        .collect())
}

/// Terminal states of `count` rollouts of the flow policy, no exploration.
pub fn sample_terminals<E: DagEnv, M: FlowModel<E>>(
    model: &M,
    env: &E,
    count: usize,
    seed: u64,
) -> Result<Vec<E::State>, GfnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    // Chunked so memory stays flat for large counts.
    let mut left = count;
    while left > 0 {
        let take = left.min(1024);
        out.extend(sample_trajectories(model, env, take, 0.0, &mut rng)?.into_iter().map(|t| t.final_state));
        left -= take;
    }
    Ok(out)
}

/// Exact terminal distribution of the model's flow policy, aligned with
/// `graph.terminals()`.
pub fn exact_terminal_dist<E: DagEnv, M: FlowModel<E>>(
    model: &M,
    env: &E,
    graph: &StateGraph<E::State>,
) -> Result<Vec<f64>, GfnError> {
    let na = env.num_actions();
    let interior: Vec<usize> = (0..graph.len()).filter(|&i| !graph.terminal[i]).collect();
    let mut flow: EdgeValues = graph.children.iter().map(|k| vec![0.0; k.len()]).collect();
    for chunk in interior.chunks(2048) {
        let states: Vec<E::State> = chunk.iter().map(|&i| graph.states[i].clone()).collect();
        let q = model.predict(env, &states)?;
        for (k, &i) in chunk.iter().enumerate() {
            let row = &q[k * na..(k + 1) * na];
            let allowed: Vec<ActionId> = graph.children[i].iter().map(|&(a, _)| a).collect();
            let p = policy_from_log_flows(row, &allowed);
            for (slot, a) in allowed.iter().enumerate() {
                // Normalized flows induce the same policy; floor keeps them positive.
                flow[i][slot] = p[a.0].max(f64::MIN_POSITIVE);
            }
        }
    }
    Ok(oracles::induced_terminal_dist(graph, &flow)?.into_iter().map(|(_, p)| p).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Squared difference of log in-flow and log out-flow, each shifted by epsilon.
    LogScale,
    /// Squared difference of raw in-flow and out-flow.
    RawScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    pub kind: LossKind,
    pub epsilon: f64,
    /// Weight of terms whose state is terminal (log-scale loss only).
    pub leaf_weight: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { kind: LossKind::LogScale, epsilon: 2.5e-5, leaf_weight: 10.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Mean over all state terms, leaf terms weighted.
    pub loss: f64,
    /// Unweighted mean over terminal-state terms.
    pub leaf_loss: f64,
    /// Mean over interior-state terms.
    pub flow_loss: f64,
    pub leaf_terms: usize,
    pub flow_terms: usize,
    pub grads: Vec<f64>,
}

struct Term {
    parents: Vec<(usize, ActionId)>,
    /// Row of the state itself when it has outgoing edges.
    own: Option<(usize, Vec<ActionId>)>,
    reward: f64,
    terminal: bool,
}

/// Flow-matching loss over every non-root state of every trajectory in
/// `batch`. The in-flow of a state sums over all of its parents, not only
/// the predecessor on the trajectory. States visited more than once
/// contribute once per visit.
pub fn flow_matching_loss<E: DagEnv, M: FlowModel<E>>(
    model: &mut M,
    env: &E,
    batch: &[Trajectory<E::State>],
    params: &LossParams,
) -> Result<LossOutput, GfnError> {
    let mut rows: HashMap<E::State, usize> = HashMap::new();
    let mut unique: Vec<E::State> = Vec::new();
    let mut row_of = |s: &E::State, rows: &mut HashMap<E::State, usize>| -> usize {
        *rows.entry(s.clone()).or_insert_with(|| {
            unique.push(s.clone());
            unique.len() - 1
        })
    };
    let mut terms = Vec::new();
    for traj in batch {
        for s in traj.states().skip(1) {
            let parents = env
                .parents(s)
                .into_iter()
                .map(|(p, a)| (row_of(&p, &mut rows), a))
                .collect();
            let allowed = env.allowed_actions(s);
            let own = if allowed.is_empty() { None } else { Some((row_of(s, &mut rows), allowed)) };
            terms.push(Term { parents, own, reward: env.reward(s), terminal: env.is_terminal(s) });
        }
    }
    let na = env.num_actions();
    if terms.is_empty() {
        return Ok(LossOutput {
            loss: 0.0,
            leaf_loss: 0.0,
            flow_loss: 0.0,
            leaf_terms: 0,
            flow_terms: 0,
            grads: vec![0.0; model.params().len()],
        });
    }
    let q = model.forward(env, &unique)?;
    let mut dq = vec![0.0; q.len()];
    let n = terms.len() as f64;
    let (mut total, mut leaf_sum, mut flow_sum) = (0.0, 0.0, 0.0);
    let (mut leaf_terms, mut flow_terms) = (0, 0);
    let log_eps = if params.epsilon > 0.0 { Some(params.epsilon.ln()) } else { None };
    for t in &terms {
        let parent_q = t.parents.iter().map(|&(r, a)| q[r * na + a.0]);
        let own_q: Vec<f64> = match &t.own {
            Some((r, allowed)) => allowed.iter().map(|a| q[r * na + a.0]).collect(),
            None => Vec::new(),
        };
        let (sq, weight) = match params.kind {
            LossKind::LogScale => {
                let log_in = log_sum_exp(parent_q.clone().chain(log_eps));
                let log_r = (t.reward > 0.0).then(|| t.reward.ln());
                let log_out = log_sum_exp(own_q.iter().copied().chain(log_eps).chain(log_r));
                let diff = log_in - log_out;
                let w = if t.terminal { params.leaf_weight } else { 1.0 };
                let coef = w * 2.0 * diff / n;
                for &(r, a) in &t.parents {
                    let i = r * na + a.0;
                    dq[i] += coef * (q[i] - log_in).exp();
                }
                if let Some((r, allowed)) = &t.own {
                    for a in allowed {
                        let i = r * na + a.0;
                        dq[i] -= coef * (q[i] - log_out).exp();
                    }
                }
                (diff * diff, w)
            }
            LossKind::RawScale => {
                let inflow: f64 = parent_q.map(f64::exp).sum();
                let outflow = t.reward + own_q.iter().map(|v| v.exp()).sum::<f64>();
                let diff = inflow - outflow;
                let coef = 2.0 * diff / n;
                for &(r, a) in &t.parents {
                    let i = r * na + a.0;
                    dq[i] += coef * q[i].exp();
                }
                if let Some((r, allowed)) = &t.own {
                    for a in allowed {
                        let i = r * na + a.0;
                        dq[i] -= coef * q[i].exp();
                    }
                }
                (diff * diff, 1.0)
            }
        };
        total += weight * sq;
        if t.terminal {
            leaf_sum += sq;
            leaf_terms += 1;
        } else {
            flow_sum += sq;
            flow_terms += 1;
        }
    }
    let grads = model.backward(&dq)?;
    let mean = |s: f64, k: usize| if k == 0 { 0.0 } else { s / k as f64 };
    Ok(LossOutput {
        loss: total / n,
        leaf_loss: mean(leaf_sum, leaf_terms),
        flow_loss: mean(flow_sum, flow_terms),
        leaf_terms,
        flow_terms,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossParams,
    pub explore_prob: f64,
    pub batch_size: usize,
    pub total_trajectories: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossParams::default(),
            explore_prob: 0.05,
            batch_size: 16,
            total_trajectories: 10_000,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GfnError> {
        if !(self.loss.epsilon > 0.0) {
            return Err(GfnError::Config("epsilon must be positive".into()));
        }
        if !(self.loss.leaf_weight >= 1.0) {
            return Err(GfnError::Config("leaf weight must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.explore_prob) {
            return Err(GfnError::Config("exploration probability must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(GfnError::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(GfnError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Where training trajectories come from.
pub enum TrainingData<'a, S> {
    /// Fresh rollouts of the exploratory flow policy.
    Online,
    /// A fixed dataset replayed in shuffled epochs.
    Offline(&'a [Trajectory<S>]),
}

/// Snapshot handed to the observer after every optimizer step.
pub struct TrainProgress<'a, S> {
    pub step: u64,
    pub trajectories_seen: usize,
    /// Interior states visited so far; each trajectory contributes its
    /// number of transitions.
    pub states_visited: usize,
    pub loss: f64,
    pub leaf_loss: f64,
    pub flow_loss: f64,
    pub batch: &'a [Trajectory<S>],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub trajectories_seen: usize,
    pub states_visited: usize,
    pub final_loss: f64,
}

/// Runs Adam on the flow-matching loss until `total_trajectories` have
/// been consumed or the observer asks to stop.
pub fn train<E, M, F>(
    env: &E,
    model: &mut M,
    cfg: &TrainConfig,
    data: TrainingData<'_, E::State>,
    mut observe: F,
) -> Result<TrainSummary, GfnError>
where
    E: DagEnv,
    M: FlowModel<E>,
    F: FnMut(&TrainProgress<'_, E::State>, &M) -> Control,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params().len(), cfg.learning_rate);
    let mut seen = 0;
    let mut visited = 0;
    let mut final_loss = f64::NAN;
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    if let TrainingData::Offline(d) = &data {
        if d.is_empty() {
            return Err(GfnError::Config("offline dataset is empty".into()));
        }
    }
    while seen < cfg.total_trajectories {
        let take = cfg.batch_size.min(cfg.total_trajectories - seen);
        let batch: Vec<Trajectory<E::State>> = match &data {
            TrainingData::Online => sample_trajectories(model, env, take, cfg.explore_prob, &mut rng)?,
            TrainingData::Offline(dataset) => {
                let mut out = Vec::with_capacity(take);
                while out.len() < take {
                    if cursor == order.len() {
                        order = (0..dataset.len()).collect();
                        order.shuffle(&mut rng);
                        cursor = 0;
                    }
                    out.push(dataset[order[cursor]].clone());
                    cursor += 1;
                }
                out
            }
        };
        let out = flow_matching_loss(model, env, &batch, &cfg.loss)?;
        adam.step(model.params_mut(), &out.grads)?;
        if !model.params().iter().all(|p| p.is_finite()) {
            return Err(GfnError::NonFinite(adam.steps()));
        }
        seen += batch.len();
        visited += batch.iter().map(|t| t.len()).sum::<usize>();
        final_loss = out.loss;
        let progress = TrainProgress {
            step: adam.steps(),
            trajectories_seen: seen,
            states_visited: visited,
            loss: out.loss,
            leaf_loss: out.leaf_loss,
            flow_loss: out.flow_loss,
            batch: &batch,
        };
        if observe(&progress, model) == Control::Stop {
            break;
        }
    }
    Ok(TrainSummary { steps: adam.steps(), trajectories_seen: seen, states_visited: visited, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ExplicitDag;
    use crate::hypergrid::{GridSpec, GridState, HyperGrid};
    use crate::oracles::{canonical_flow, enumerate_states, DEFAULT_STATE_CAP};

    fn grid(n: usize, h: usize) -> (HyperGrid, StateGraph<GridState>) {
        let env = HyperGrid::new(GridSpec::corners(n, h, 0.1)).unwrap();
        let g = enumerate_states(&env, DEFAULT_STATE_CAP).unwrap();
        (env, g)
    }

    #[test]
    fn policy_examples() {
        let allowed = [ActionId(0), ActionId(2)];
        assert_eq!(policy_from_log_flows(&[0.3, 9.0, 0.3], &allowed), vec![0.5, 0.0, 0.5]);
        let p = policy_from_log_flows(&[0.0, 0.0, 3f64.ln()], &allowed);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[2] - 0.75).abs() < 1e-15);
        let shifted = policy_from_log_flows(&[7.0, 0.0, 7.0 + 3f64.ln()], &allowed);
        assert!((shifted[0] - p[0]).abs() < 1e-15);
    }

    #[test]
    fn canonical_lookup_has_zero_loss() {
        let (env, g) = grid(2, 5);
        let mut model = TabularFlow::from_edge_flows(&g, env.num_actions(), &canonical_flow(&g));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_trajectories(&model, &env, 32, 0.5, &mut rng).unwrap();
        for eps in [0.0, 2.5e-5, 1.0] {
            let params = LossParams { kind: LossKind::LogScale, epsilon: eps, leaf_weight: 10.0 };
            let out = flow_matching_loss(&mut model, &env, &batch, &params).unwrap();
            assert!(out.loss < 1e-24, "eps {eps}: {}", out.loss);
        }
        let raw = LossParams { kind: LossKind::RawScale, ..LossParams::default() };
        assert!(flow_matching_loss(&mut model, &env, &batch, &raw).unwrap().loss < 1e-20);
    }

    fn single_sink(reward: f64) -> (ExplicitDag, StateGraph<crate::env::NodeId>) {
        let dag = ExplicitDag::new(2, &[(0, 0, 1)], &[0.0, reward]).unwrap();
        let g = enumerate_states(&dag, 10).unwrap();
        (dag, g)
    }

    #[test]
    fn single_sink_raw_loss() {
        let (dag, g) = single_sink(2.0);
        let mut model = TabularFlow::zeros(&g, 1);
        model.table[0] = 0.4;
        let traj = crate::env::replay(&dag, &[ActionId(0)]).unwrap();
        let raw = LossParams { kind: LossKind::RawScale, epsilon: 1.0, leaf_weight: 1.0 };
        let out = flow_matching_loss(&mut model, &dag, &[traj], &raw).unwrap();
        assert!((out.loss - (0.4f64.exp() - 2.0).powi(2)).abs() < 1e-14);
    }

    #[test]
    fn leaf_term_examples() {
        for (reward, expected) in [(1.0, 0.0), (std::f64::consts::E, 10.0)] {
            let (dag, g) = single_sink(reward);
            let mut model = TabularFlow::zeros(&g, 1);
            let traj = crate::env::replay(&dag, &[ActionId(0)]).unwrap();
            let params = LossParams { kind: LossKind::LogScale, epsilon: 0.0, leaf_weight: 10.0 };
            let out = flow_matching_loss(&mut model, &dag, &[traj], &params).unwrap();
            assert!((out.loss - expected).abs() < 1e-12, "{}", out.loss);
        }
    }

    #[test]
    fn duplicated_trajectory_doubles_sum() {
        let (env, g) = grid(2, 4);
        let mut model = TabularFlow::zeros(&g, env.num_actions());
        let t = crate::env::replay(&env, &[ActionId(0), ActionId(1), ActionId(2)]).unwrap();
        let u = crate::env::replay(&env, &[ActionId(1), ActionId(2)]).unwrap();
        let p = LossParams::default();
        let once = flow_matching_loss(&mut model, &env, &[t.clone(), u.clone()], &p).unwrap();
        let twice = flow_matching_loss(&mut model, &env, &[t.clone(), t.clone(), u], &p).unwrap();
        let alone = flow_matching_loss(&mut model, &env, &[t], &p).unwrap();
        // mean over terms: t has 3 terms, u has 2
        let sum_once = once.loss * 5.0;
        let sum_twice = twice.loss * 8.0;
        assert!((sum_twice - sum_once - alone.loss * 3.0).abs() < 1e-12);
    }

    #[test]
    fn loss_scale_invariance_without_epsilon() {
        let (env, g) = grid(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let flow: EdgeValues = g.children.iter().map(|k| k.iter().map(|_| rng.gen_range(0.1..2.0)).collect()).collect();
        // Scale every edge flow and every reward by c.
        let c = 7.5;
        let scaled_env = env
            .with_reward(crate::hypergrid::GridReward::Table(std::sync::Arc::new(
                env.cells().map(|cell| env.raw_reward(&cell) * c).collect(),
            )))
            .unwrap();
        let scaled_flow: EdgeValues = flow.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        let mut m1 = TabularFlow::from_edge_flows(&g, 3, &flow);
        let mut m2 = TabularFlow::from_edge_flows(&g, 3, &scaled_flow);
        let batch = sample_trajectories(&m1, &env, 20, 0.3, &mut rng).unwrap();
        let actions: Vec<Vec<ActionId>> = batch.iter().map(|t| t.actions().collect()).collect();
        let batch2: Vec<_> = actions.iter().map(|a| crate::env::replay(&scaled_env, a).unwrap()).collect();
        let p = LossParams { kind: LossKind::LogScale, epsilon: 0.0, leaf_weight: 10.0 };
        let a = flow_matching_loss(&mut m1, &env, &batch, &p).unwrap().loss;
        let b = flow_matching_loss(&mut m2, &scaled_env, &batch2, &p).unwrap().loss;
        assert!(a > 1e-3);
        assert!((a - b).abs() < 1e-10 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn sample_terminals_edge_cases() {
        let (env, _) = grid(2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MlpFlow::new(&env, &[8], &mut rng).unwrap();
        assert!(sample_terminals(&model, &env, 0, 1).unwrap().is_empty());
        let xs = sample_terminals(&model, &env, 50, 1).unwrap();
        assert_eq!(xs.len(), 50);
        assert!(xs.iter().all(|x| x.terminal));
        assert_eq!(xs, sample_terminals(&model, &env, 50, 1).unwrap());
    }

    #[test]
    fn zero_exploration_matches_flow_policy_stream() {
        let (env, _) = grid(2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = MlpFlow::new(&env, &[8], &mut rng).unwrap();
        let s = GridState::cell(&[1, 2]);
        let probs = flow_policy(&model, &env, &s).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(10);
        let mut r2 = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let a = exploratory_policy(&model, &env, &s, 0.0, &mut r1).unwrap();
            assert_eq!(a, ActionId(sample_index(&mut r2, &probs)));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.explore_prob = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig { loss: LossParams { epsilon: 0.0, ..LossParams::default() }, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
