//! Exact quantities on enumerable environments, computed by dynamic
//! programming over a topological order of the state DAG.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::env::{ActionId, DagEnv};

pub const DEFAULT_STATE_CAP: usize = 2_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("state space exceeds the cap of {0} states")]
    TooLarge(usize),
    #[error("flow on edge {state} --{action}--> is not strictly positive ({value})")]
    NonPositiveFlow { state: String, action: usize, value: f64 },
    #[error("state {0} has more than one parent; the environment is not a tree")]
    NotATree(String),
    #[error("flow table shape does not match the state graph")]
    ShapeMismatch,
    #[error("path count overflow")]
    Overflow,
}

/// The reachable state DAG in topological order (parents before children).
#[derive(Debug, Clone)]
pub struct StateGraph<S> {
    pub states: Vec<S>,
    pub index: HashMap<S, usize>,
    /// Outgoing edges `(action, child)` per state, ascending by action.
    pub children: Vec<Vec<(ActionId, usize)>>,
    /// Incoming edges `(parent, action)` per state.
    pub parents: Vec<Vec<(usize, ActionId)>>,
    pub reward: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl<S> StateGraph<S> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn terminals(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.terminal[i])
    }

    pub fn num_edges(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }
}

/// A value per outgoing edge, aligned with [`StateGraph::children`].
pub type EdgeValues = Vec<Vec<f64>>;

/// Enumerates every state reachable from the root and orders them so that
/// parents precede children. Ties are broken by the state ordering.
pub fn enumerate_states<E: DagEnv>(env: &E, cap: usize) -> Result<StateGraph<E::State>, OracleError> {
    let root = env.initial_state();
    let mut index: HashMap<E::State, usize> = HashMap::new();
    let mut found: Vec<E::State> = vec![root.clone()];
    index.insert(root, 0);
    let mut raw_children: Vec<Vec<(ActionId, usize)>> = Vec::new();
    let mut cursor = 0;
    while cursor < found.len() {
        let s = found[cursor].clone();
        let mut kids = Vec::new();
        for a in env.allowed_actions(&s) {
            let next = env.transition(&s, a).expect("allowed actions have transitions");
            let id = match index.get(&next) {
                Some(&id) => id,
                None => {
                    if found.len() >= cap {
                        return Err(OracleError::TooLarge(cap));
                    }
                    let id = found.len();
                    index.insert(next.clone(), id);
                    found.push(next);
                    id
                }
            };
            kids.push((a, id));
        }
        raw_children.push(kids);
        cursor += 1;
    }

    // Kahn's algorithm with an ordered frontier for a deterministic result.
    let n = found.len();
    let mut indegree = vec![0usize; n];
    for kids in &raw_children {
        for &(_, c) in kids {
            indegree[c] += 1;
        }
    }
    let mut ready: BTreeMap<&E::State, usize> = BTreeMap::new();
    ready.insert(&found[0], 0);
    let mut order = Vec::with_capacity(n);
    while let Some((_, id)) = ready.pop_first() {
        order.push(id);
        for &(_, c) in &raw_children[id] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(&found[c], c);
            }
        }
    }
    debug_assert_eq!(order.len(), n, "transition graph has a cycle");

    let mut position = vec![0usize; n];
    for (pos, &id) in order.iter().enumerate() {
        position[id] = pos;
    }
    let states: Vec<E::State> = order.iter().map(|&id| found[id].clone()).collect();
    let children: Vec<Vec<(ActionId, usize)>> = order
        .iter()
        .map(|&id| raw_children[id].iter().map(|&(a, c)| (a, position[c])).collect())
        .collect();
    let mut parents = vec![Vec::new(); n];
    for (i, kids) in children.iter().enumerate() {
        for &(a, c) in kids {
            parents[c].push((i, a));
        }
    }
    let index = states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let reward = states.iter().map(|s| env.reward(s)).collect();
    let terminal = states.iter().map(|s| env.is_terminal(s)).collect();
    Ok(StateGraph { states, index, children, parents, reward, terminal })
}

/// `Z`: the sum of rewards over all terminal states.
pub fn partition_function<S>(g: &StateGraph<S>) -> f64 {
    g.terminals().map(|i| g.reward[i]).sum()
}

/// The target distribution `R(x) / Z` over terminals, as `(state index, p)`.
pub fn target_distribution<S>(g: &StateGraph<S>) -> Vec<(usize, f64)> {
    let z = partition_function(g);
    g.terminals().map(|i| (i, g.reward[i] / z)).collect()
}

/// Number of distinct action sequences from the root to each state.
pub fn count_paths<S>(g: &StateGraph<S>) -> Result<Vec<u128>, OracleError> {
    let mut count = vec![0u128; g.len()];
    count[0] = 1;
    for i in 1..g.len() {
        let mut total: u128 = 0;
        for &(p, _) in &g.parents[i] {
            total = total.checked_add(count[p]).ok_or(OracleError::Overflow)?;
        }
        count[i] = total;
    }
    Ok(count)
}

/// Sum of rewards over every continuation from each state, counting a
/// terminal once per distinct path that reaches it (tree unrolling).
pub fn unrolled_subtree_reward<S>(g: &StateGraph<S>) -> Vec<f64> {
    let mut v = vec![0.0; g.len()];
    for i in (0..g.len()).rev() {
        v[i] = g.reward[i] + g.children[i].iter().map(|&(_, c)| v[c]).sum::<f64>();
    }
    v
}

/// Forward DP of the state-visit probabilities under the policy
/// `pi(a|s) = w(s,a) / sum_b w(s,b)`. Returns `(terminal index, probability)`.
fn forward_terminal_dist<S: Display>(
    g: &StateGraph<S>,
    weights: &EdgeValues,
) -> Result<Vec<(usize, f64)>, OracleError> {
    if weights.len() != g.len() {
        return Err(OracleError::ShapeMismatch);
    }
    let mut visit = vec![0.0; g.len()];
    visit[0] = 1.0;
    for i in 0..g.len() {
        let w = &weights[i];
        if w.len() != g.children[i].len() {
            return Err(OracleError::ShapeMismatch);
        }
        for (k, &value) in w.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(OracleError::NonPositiveFlow {
                    state: g.states[i].to_string(),
                    action: g.children[i][k].0 .0,
                    value,
                });
            }
        }
        if w.is_empty() || visit[i] == 0.0 {
            continue;
        }
        let total: f64 = w.iter().sum();
        for (k, &(_, c)) in g.children[i].iter().enumerate() {
            visit[c] += visit[i] * w[k] / total;
        }
    }
    Ok(g.terminals().map(|i| (i, visit[i])).collect())
}

/// Terminal distribution of the policy that picks each action in
/// proportion to the unrolled subtree reward of its child.
pub fn tree_policy_terminal_dist<S: Display>(g: &StateGraph<S>) -> Vec<(usize, f64)> {
    let v = unrolled_subtree_reward(g);
    let weights: EdgeValues = g
        .children
        .iter()
        .map(|kids| kids.iter().map(|&(_, c)| v[c]).collect())
        .collect();
    forward_terminal_dist(g, &weights).expect("subtree rewards are positive")
}

/// Terminal distribution induced by a positive edge flow: each state
/// chooses an outgoing edge in proportion to its flow.
pub fn induced_terminal_dist<S: Display>(
    g: &StateGraph<S>,
    flow: &EdgeValues,
) -> Result<Vec<(usize, f64)>, OracleError> {
    forward_terminal_dist(g, flow)
}

/// Builds a flow satisfying in-flow = out-flow at every non-root node by a
/// reverse-topological sweep. `split(state, parent_count)` returns the
/// positive shares of that state's through-flow assigned to its parent edges.
pub fn split_flow<S, F>(g: &StateGraph<S>, mut split: F) -> EdgeValues
where
    F: FnMut(usize, usize) -> Vec<f64>,
{
    let mut flow: EdgeValues = g.children.iter().map(|k| vec![0.0; k.len()]).collect();
    for i in (1..g.len()).rev() {
        let through = g.reward[i] + flow[i].iter().sum::<f64>();
        let shares = split(i, g.parents[i].len());
        let total: f64 = shares.iter().sum();
        for (k, &(p, a)) in g.parents[i].iter().enumerate() {
            let slot = g.children[p].iter().position(|&(b, _)| b == a).expect("consistent edges");
            flow[p][slot] = through * shares[k] / total;
        }
    }
    flow
}

/// The flow that splits every node's through-flow equally among its parents.
pub fn canonical_flow<S>(g: &StateGraph<S>) -> EdgeValues {
    split_flow(g, |_, k| vec![1.0; k])
}

/// A valid flow with random positive parent shares.
pub fn random_flow<S, R: Rng + ?Sized>(g: &StateGraph<S>, rng: &mut R) -> EdgeValues {
    split_flow(g, |_, k| (0..k).map(|_| rng.gen_range(0.05..1.0)).collect())
}

/// Through-flow `V(s) = R(s) + sum of outgoing flow`.
pub fn through_flow<S>(g: &StateGraph<S>, flow: &EdgeValues) -> Vec<f64> {
    (0..g.len())
        .map(|i| g.reward[i] + flow[i].iter().sum::<f64>())
        .collect()
}

/// `|in-flow - R - out-flow|` at every non-root state (zero at the root).
pub fn conservation_residual<S>(g: &StateGraph<S>, flow: &EdgeValues) -> Vec<f64> {
    let mut inflow = vec![0.0; g.len()];
    for (i, kids) in g.children.iter().enumerate() {
        for (k, &(_, c)) in kids.iter().enumerate() {
            inflow[c] += flow[i][k];
        }
    }
    let through = through_flow(g, flow);
    (0..g.len())
        .map(|i| if i == 0 { 0.0 } else { (inflow[i] - through[i]).abs() })
        .collect()
}

/// Action values of the uniform policy under the reshaped reward
/// `R'(x) = R(x) f(parent of x)`, where `f(s)` multiplies the allowed-action
/// counts along the path from the root through `s`. Also returns `f`.
///
/// Only defined on trees.
pub fn uniform_policy_action_value<S: Display>(
    g: &StateGraph<S>,
) -> Result<(EdgeValues, Vec<f64>), OracleError> {
    for i in 1..g.len() {
        if g.parents[i].len() != 1 {
            return Err(OracleError::NotATree(g.states[i].to_string()));
        }
    }
    let mut f = vec![0.0; g.len()];
    f[0] = g.children[0].len() as f64;
    for i in 1..g.len() {
        let (p, _) = g.parents[i][0];
        let fanout = g.children[i].len().max(1) as f64;
        f[i] = f[p] * fanout;
    }
    let shaped: Vec<f64> = (0..g.len())
        .map(|i| if g.terminal[i] { g.reward[i] * f[g.parents[i][0].0] } else { 0.0 })
        .collect();
    let mut q: EdgeValues = g.children.iter().map(|k| vec![0.0; k.len()]).collect();
    for i in (0..g.len()).rev() {
        for k in 0..g.children[i].len() {
            let c = g.children[i][k].1;
            let continuation = if q[c].is_empty() {
                0.0
            } else {
                q[c].iter().sum::<f64>() / q[c].len() as f64
            };
            q[i][k] = shaped[c] + continuation;
        }
    }
    Ok((q, f))
}

/// Per-state exact quantities for golden-file dumps.
#[derive(Debug, Clone, Serialize)]
pub struct ExactTables {
    pub partition_function: f64,
    pub states: Vec<StateRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StateRow {
    pub state: String,
    pub terminal: bool,
    pub reward: f64,
    pub path_count: u128,
    pub subtree_reward_sum: f64,
    pub through_flow: f64,
    /// Canonical flow per allowed action, keyed by action index.
    pub canonical_flow: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_probability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tree_policy_probability: Option<f64>,
}

impl ExactTables {
    pub fn build<S: Display>(g: &StateGraph<S>) -> Result<Self, OracleError> {
        let z = partition_function(g);
        let paths = count_paths(g)?;
        let subtree = unrolled_subtree_reward(g);
        let flow = canonical_flow(g);
        let through = through_flow(g, &flow);
        let tree: HashMap<usize, f64> = tree_policy_terminal_dist(g).into_iter().collect();
        let states = (0..g.len())
            .map(|i| StateRow {
                state: g.states[i].to_string(),
                terminal: g.terminal[i],
                reward: g.reward[i],
                path_count: paths[i],
                subtree_reward_sum: subtree[i],
                through_flow: through[i],
                canonical_flow: g.children[i]
                    .iter()
                    .zip(&flow[i])
                    .map(|(&(a, _), &q)| (a.0, q))
                    .collect(),
                target_probability: g.terminal[i].then(|| g.reward[i] / z),
                tree_policy_probability: tree.get(&i).copied(),
            })
            .collect();
        Ok(Self { partition_function: z, states })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tables serialize")
    }
}

/// Visits every root-to-terminal action sequence by depth-first search,
/// calling `visit(terminal index, actions)`. Exponential; test-sized graphs only.
pub fn for_each_path<S, F>(g: &StateGraph<S>, mut visit: F)
where
    F: FnMut(usize, &[usize]),
{
    fn go<S, F: FnMut(usize, &[usize])>(g: &StateGraph<S>, i: usize, path: &mut Vec<usize>, visit: &mut F) {
        if g.terminal[i] {
            visit(i, path);
            return;
        }
        for (k, &(_, c)) in g.children[i].iter().enumerate() {
            path.push(k);
            go(g, c, path, visit);
            path.pop();
        }
    }
    let mut path = Vec::new();
    go(g, 0, &mut path, &mut visit);
}
