//! Deterministic DAG environments.
//!
//! Every environment is a finite acyclic MDP rooted at an initial state.
//! Terminal states are sinks with no allowed actions; they carry the
//! reward. Interior states have reward zero.

use std::collections::BTreeMap;
use std::fmt::{self, Debug, Display};
use std::hash::Hash;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action {action} is not allowed in state {state}")]
    IllegalAction { state: String, action: usize },
    #[error("state {0} is terminal")]
    TerminalState(String),
    #[error("the initial state has no parents")]
    RootHasNoParents,
    #[error("policy put mass {mass} on illegal action {action} in state {state}")]
    PolicyMassOnIllegalAction { state: String, action: usize, mass: f64 },
    #[error("policy returned an invalid distribution in state {0}")]
    InvalidPolicy(String),
    #[error("rollout exceeded horizon {0}")]
    HorizonExceeded(usize),
    #[error("invalid environment: {0}")]
    Invalid(String),
}

/// Index of an action. Its meaning is defined by the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionId(pub usize);

impl Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Contract shared by every environment.
///
/// Implementations are immutable after construction and can be shared
/// across threads.
pub trait DagEnv: Send + Sync {
    type State: Clone + Eq + Hash + Ord + Debug + Display + Send + Sync;

    fn initial_state(&self) -> Self::State;

    /// Upper bound on action indices; every `ActionId` is below this.
    fn num_actions(&self) -> usize;

    /// Allowed actions in ascending order. Empty exactly for terminal states.
    fn allowed_actions(&self, s: &Self::State) -> Vec<ActionId>;

    /// The deterministic transition `T(s, a)`. `None` when `a` is not allowed.
    fn transition(&self, s: &Self::State, a: ActionId) -> Option<Self::State>;

    /// All `(s, a)` with `T(s, a) = s'`.
    fn parents(&self, s: &Self::State) -> Vec<(Self::State, ActionId)>;

    fn is_terminal(&self, s: &Self::State) -> bool;

    /// Reward of a state: positive on terminals, zero elsewhere.
    fn reward(&self, s: &Self::State) -> f64;

    /// Maximum number of actions in any trajectory.
    fn horizon(&self) -> usize;

    fn is_allowed(&self, s: &Self::State, a: ActionId) -> bool {
        self.allowed_actions(s).contains(&a)
    }
}

/// Fixed-length numeric encoding of states, used as network input.
pub trait Featurize: DagEnv {
    fn feature_dim(&self) -> usize;

    /// Writes the encoding of `s` into `out` (length `feature_dim()`).
    fn featurize(&self, s: &Self::State, out: &mut [f64]);
}

/// A complete episode from the initial state to a terminal sink.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub steps: Vec<(S, ActionId)>,
    pub final_state: S,
    pub reward: f64,
}

impl<S: Clone> Trajectory<S> {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Visited states in order, from the initial state through the sink.
    pub fn states(&self) -> impl Iterator<Item = &S> {
        self.steps
            .iter()
            .map(|(s, _)| s)
            .chain(std::iter::once(&self.final_state))
    }

    pub fn actions(&self) -> impl Iterator<Item = ActionId> + '_ {
        self.steps.iter().map(|&(_, a)| a)
    }
}

/// Applies `a` in `s`.
pub fn step<E: DagEnv>(env: &E, s: &E::State, a: ActionId) -> Result<E::State, EnvError> {
    if env.is_terminal(s) {
        return Err(EnvError::TerminalState(s.to_string()));
    }
    env.transition(s, a).ok_or_else(|| EnvError::IllegalAction {
        state: s.to_string(),
        action: a.0,
    })
}

pub fn enumerate_parents<E: DagEnv>(
    env: &E,
    s: &E::State,
) -> Result<Vec<(E::State, ActionId)>, EnvError> {
    if *s == env.initial_state() {
        return Err(EnvError::RootHasNoParents);
    }
    Ok(env.parents(s))
}

/// Draws an index with probability proportional to `probs`.
pub(crate) fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = i;
        if u < p {
            return i;
        }
        u -= p;
    }
    last
}

/// Executes `policy` from the initial state until a sink is reached.
///
/// The policy maps a state and its allowed actions to a probability vector
/// of length `env.num_actions()`.
pub fn rollout<E, P, R>(env: &E, mut policy: P, rng: &mut R) -> Result<Trajectory<E::State>, EnvError>
where
    E: DagEnv,
    P: FnMut(&E::State, &[ActionId]) -> Vec<f64>,
    R: Rng + ?Sized,
{
    let mut s = env.initial_state();
    let mut steps = Vec::new();
    while !env.is_terminal(&s) {
        if steps.len() >= env.horizon() {
            return Err(EnvError::HorizonExceeded(env.horizon()));
        }
        let allowed = env.allowed_actions(&s);
        let probs = policy(&s, &allowed);
        if probs.len() != env.num_actions() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(EnvError::InvalidPolicy(s.to_string()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 && !allowed.contains(&ActionId(i)) {
                return Err(EnvError::PolicyMassOnIllegalAction {
                    state: s.to_string(),
                    action: i,
                    mass: p,
                });
            }
        }
        if probs.iter().sum::<f64>() <= 0.0 {
            return Err(EnvError::InvalidPolicy(s.to_string()));
        }
        let a = ActionId(sample_index(rng, &probs));
        let next = step(env, &s, a)?;
        steps.push((s, a));
        s = next;
    }
    let reward = env.reward(&s);
    Ok(Trajectory {
        steps,
        final_state: s,
        reward,
    })
}

/// Uniform distribution over the allowed actions.
pub fn uniform_policy(num_actions: usize, allowed: &[ActionId]) -> Vec<f64> {
    let mut p = vec![0.0; num_actions];
    for a in allowed {
        p[a.0] = 1.0 / allowed.len() as f64;
    }
    p
}

/// Rebuilds a trajectory from its action sequence by replaying from the root.
pub fn replay<E: DagEnv>(env: &E, actions: &[ActionId]) -> Result<Trajectory<E::State>, EnvError> {
    let mut s = env.initial_state();
    let mut steps = Vec::with_capacity(actions.len());
    for &a in actions {
        let next = step(env, &s, a)?;
        steps.push((s, a));
        s = next;
    }
    if !env.is_terminal(&s) {
        return Err(EnvError::Invalid(format!("replay ended in non-terminal state {s}")));
    }
    let reward = env.reward(&s);
    Ok(Trajectory {
        steps,
        final_state: s,
        reward,
    })
}

/// A node in an [`ExplicitDag`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

impl Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// A small hand-specified DAG. Node 0 is the root; nodes without outgoing
/// edges are terminal and must carry a positive reward.
#[derive(Debug, Clone)]
pub struct ExplicitDag {
    children: Vec<BTreeMap<usize, usize>>,
    parents: Vec<Vec<(usize, usize)>>,
    rewards: Vec<f64>,
    num_actions: usize,
    horizon: usize,
}

impl ExplicitDag {
    /// `edges` are `(from, action, to)` triples; `rewards` gives the reward
    /// of each terminal node (entries for interior nodes are ignored).
    pub fn new(num_nodes: usize, edges: &[(usize, usize, usize)], rewards: &[f64]) -> Result<Self, EnvError> {
        if num_nodes == 0 || rewards.len() != num_nodes {
            return Err(EnvError::Invalid("node count and reward table disagree".into()));
        }
        let mut children = vec![BTreeMap::new(); num_nodes];
        let mut parents = vec![Vec::new(); num_nodes];
        let mut num_actions = 0;
        for &(from, action, to) in edges {
            if from >= num_nodes || to >= num_nodes {
                return Err(EnvError::Invalid(format!("edge ({from},{action},{to}) out of range")));
            }
            if to == 0 {
                return Err(EnvError::Invalid("the root cannot have parents".into()));
            }
            if children[from].insert(action, to).is_some() {
                return Err(EnvError::Invalid(format!("duplicate action {action} at node {from}")));
            }
            parents[to].push((from, action));
            num_actions = num_actions.max(action + 1);
        }
        let mut rewards = rewards.to_vec();
        for v in 0..num_nodes {
            if children[v].is_empty() {
                if !(rewards[v] > 0.0) {
                    return Err(EnvError::Invalid(format!("terminal node {v} needs a positive reward")));
                }
            } else {
                rewards[v] = 0.0;
            }
        }
        // Longest path from the root doubles as a cycle check.
        let mut depth = vec![None; num_nodes];
        let mut on_path = vec![false; num_nodes];
        fn longest(
            v: usize,
            children: &[BTreeMap<usize, usize>],
            depth: &mut [Option<usize>],
            on_path: &mut [bool],
        ) -> Result<usize, EnvError> {
            if let Some(d) = depth[v] {
                return Ok(d);
            }
            if on_path[v] {
                return Err(EnvError::Invalid("graph has a cycle".into()));
            }
            on_path[v] = true;
            let mut best = 0;
            for &c in children[v].values() {
                best = best.max(1 + longest(c, children, depth, on_path)?);
            }
            on_path[v] = false;
            depth[v] = Some(best);
            Ok(best)
        }
        let horizon = longest(0, &children, &mut depth, &mut on_path)?;
        for v in 1..num_nodes {
            if depth[v].is_some() && parents[v].is_empty() {
                return Err(EnvError::Invalid(format!("node {v} is unreachable")));
            }
        }
        Ok(Self {
            children,
            parents,
            rewards,
            num_actions: num_actions.max(1),
            horizon,
        })
    }
}

impl DagEnv for ExplicitDag {
    type State = NodeId;

    fn initial_state(&self) -> NodeId {
        NodeId(0)
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn allowed_actions(&self, s: &NodeId) -> Vec<ActionId> {
        self.children[s.0].keys().map(|&a| ActionId(a)).collect()
    }

    fn transition(&self, s: &NodeId, a: ActionId) -> Option<NodeId> {
        self.children[s.0].get(&a.0).map(|&c| NodeId(c))
    }

    fn parents(&self, s: &NodeId) -> Vec<(NodeId, ActionId)> {
        let mut ps: Vec<_> = self.parents[s.0]
            .iter()
            .map(|&(p, a)| (NodeId(p), ActionId(a)))
            .collect();
        ps.sort();
        ps
    }

    fn is_terminal(&self, s: &NodeId) -> bool {
        self.children[s.0].is_empty()
    }

    fn reward(&self, s: &NodeId) -> f64 {
        self.rewards[s.0]
    }

    fn horizon(&self) -> usize {
        self.horizon
    }
}

impl Featurize for ExplicitDag {
    fn feature_dim(&self) -> usize {
        self.children.len()
    }

    fn featurize(&self, s: &NodeId, out: &mut [f64]) {
        out.fill(0.0);
        out[s.0] = 1.0;
    }
}
