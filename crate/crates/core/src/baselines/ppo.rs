//! Proximal policy optimization on a DAG environment.
//!
//! The reward arrives only at the terminal transition and episodes are
//! short, so every step of an episode uses the undiscounted episode return
//! and the advantage is `return - V(s)`. Policy logits and the value
//! estimate share one network: the first `num_actions` outputs are logits,
//! the last output is the value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{sample_index, ActionId, Featurize, Trajectory};
use crate::flownet::{policy_from_log_flows, Control, GfnError};
use crate::nn::{Adam, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Episodes collected per policy update.
    pub rollout_batch: usize,
    /// Gradient steps over each collected batch.
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub normalize_advantages: bool,
    pub budget_states: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            entropy_coef: 0.5,
            value_coef: 0.5,
            rollout_batch: 16,
            epochs: 4,
            learning_rate: 1e-4,
            hidden: vec![256, 256],
            normalize_advantages: true,
            budget_states: 200_000,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), GfnError> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(GfnError::Config("clip ratio must lie in (0, 1)".into()));
        }
        if !(self.entropy_coef >= 0.0) || !(self.value_coef >= 0.0) {
            return Err(GfnError::Config("loss coefficients must be non-negative".into()));
        }
        if self.rollout_batch == 0 || self.epochs == 0 {
            return Err(GfnError::Config("rollout batch and epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(GfnError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Clipped surrogate `min(r A, clip(r, 1-e, 1+e) A)` and its derivative in `r`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        // The clipped branch is constant in r outside the trust region.
        let inside = (1.0 - clip..=1.0 + clip).contains(&ratio);
        (clipped, if inside { advantage } else { 0.0 })
    }
}

#[derive(Debug, Clone)]
pub struct PpoPolicy {
    pub net: Mlp,
    num_actions: usize,
}

impl PpoPolicy {
    /// Policy logits start at zero, so the initial policy is uniform.
    pub fn new<E: Featurize, R: Rng + ?Sized>(env: &E, hidden: &[usize], rng: &mut R) -> Result<Self, GfnError> {
        let na = env.num_actions();
        let mut widths = vec![env.feature_dim()];
        widths.extend_from_slice(hidden);
        widths.push(na + 1);
        let mut net = Mlp::new(&widths, rng)?;
        let last = net.num_layers() - 1;
        let out = na + 1;
        for row in net.weight_mut(last).chunks_mut(out) {
            row[..na].fill(0.0);
        }
        net.bias_mut(last)[..na].fill(0.0);
        Ok(Self { net, num_actions: na })
    }

    fn features<E: Featurize>(env: &E, states: &[E::State]) -> Vec<f64> {
        let d = env.feature_dim();
        let mut x = vec![0.0; states.len() * d];
        for (s, row) in states.iter().zip(x.chunks_mut(d)) {
            env.featurize(s, row);
        }
        x
    }

    /// `(action probabilities, value)` per state.
    pub fn evaluate<E: Featurize>(&self, env: &E, states: &[E::State]) -> Result<Vec<(Vec<f64>, f64)>, GfnError> {
        let out = self.net.predict(&Self::features(env, states), states.len())?;
        let w = self.num_actions + 1;
        Ok(states
            .iter()
            .zip(out.chunks(w))
            .map(|(s, row)| {
                (policy_from_log_flows(&row[..self.num_actions], &env.allowed_actions(s)), row[self.num_actions])
            })
            .collect())
    }

    /// Samples `count` episodes in lockstep.
    pub fn sample<E: Featurize, R: Rng + ?Sized>(
        &self,
        env: &E,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Trajectory<E::State>>, GfnError> {
        let mut current = vec![env.initial_state(); count];
        let mut steps: Vec<Vec<(E::State, ActionId)>> = vec![Vec::new(); count];
        let mut active: Vec<usize> = (0..count).collect();
        while !active.is_empty() {
            let batch: Vec<E::State> = active.iter().map(|&i| current[i].clone()).collect();
            let evals = self.evaluate(env, &batch)?;
            let mut still = Vec::new();
            for (k, &i) in active.iter().enumerate() {
                let a = ActionId(sample_index(rng, &evals[k].0));
                let next = env.transition(&batch[k], a).expect("policy samples allowed actions");
                steps[i].push((batch[k].clone(), a));
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
}

struct Sample<S> {
    state: S,
    action: ActionId,
    allowed: Vec<ActionId>,
    old_logp: f64,
    ret: f64,
    advantage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoLoss {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

/// One gradient step on the PPO objective over `samples`.
fn ppo_update<E: Featurize>(
    policy: &mut PpoPolicy,
    adam: &mut Adam,
    env: &E,
    samples: &[Sample<E::State>],
    cfg: &PpoConfig,
) -> Result<PpoLoss, GfnError> {
    let na = policy.num_actions;
    let w = na + 1;
    let states: Vec<E::State> = samples.iter().map(|s| s.state.clone()).collect();
    let out = policy.net.forward(&PpoPolicy::features(env, &states), states.len())?;
    let mut grad = vec![0.0; out.len()];
    let n = samples.len() as f64;
    let mut loss = PpoLoss { policy: 0.0, value: 0.0, entropy: 0.0 };
    for (k, smp) in samples.iter().enumerate() {
        let row = &out[k * w..(k + 1) * w];
        let p = policy_from_log_flows(&row[..na], &smp.allowed);
        let logp = p[smp.action.0].ln();
        let ratio = (logp - smp.old_logp).exp();
        let (surr, d_ratio) = clipped_surrogate(ratio, smp.advantage, cfg.clip);
        let entropy: f64 = smp.allowed.iter().map(|a| p[a.0]).filter(|&q| q > 0.0).map(|q| -q * q.ln()).sum();
        let value = row[na];
        loss.policy -= surr / n;
        loss.value += (value - smp.ret).powi(2) / n;
        loss.entropy += entropy / n;
        let g = &mut grad[k * w..(k + 1) * w];
        for a in &smp.allowed {
            let j = a.0;
            let indicator = if j == smp.action.0 { 1.0 } else { 0.0 };
            // d(-surrogate)/dz_j = -(dS/dr) r (1[j=a] - p_j)
            g[j] -= d_ratio * ratio * (indicator - p[j]) / n;
            // d(-c H)/dz_j = c p_j (log p_j + H)
            if p[j] > 0.0 {
                g[j] += cfg.entropy_coef * p[j] * (p[j].ln() + entropy) / n;
            }
        }
        g[na] = cfg.value_coef * 2.0 * (value - smp.ret) / n;
    }
    let grads = policy.net.backward(&grad)?;
    adam.step(policy.net.params_mut(), &grads)?;
    if !policy.net.all_finite() {
        return Err(GfnError::NonFinite(adam.steps()));
    }
    Ok(loss)
}

pub struct PpoProgress<'a, S> {
    pub update: u64,
    pub trajectories_seen: usize,
    pub states_visited: usize,
    pub loss: PpoLoss,
    pub batch: &'a [Trajectory<S>],
}

/// Trains a fresh uniform policy until `cfg.budget_states` states have
/// been visited or the observer stops it.
pub fn ppo_train<E, F>(env: &E, cfg: &PpoConfig, observe: F) -> Result<PpoPolicy, GfnError>
where
    E: Featurize,
    F: FnMut(&PpoProgress<'_, E::State>, &PpoPolicy) -> Control,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut policy = PpoPolicy::new(env, &cfg.hidden, &mut rng)?;
    ppo_continue(env, cfg, &mut policy, &mut rng, observe)?;
    Ok(policy)
}

/// Continues training `policy` with a fresh optimizer state.
pub fn ppo_continue<E, F, R>(
    env: &E,
    cfg: &PpoConfig,
    policy: &mut PpoPolicy,
    rng: &mut R,
    mut observe: F,
) -> Result<(), GfnError>
where
    E: Featurize,
    R: Rng + ?Sized,
    F: FnMut(&PpoProgress<'_, E::State>, &PpoPolicy) -> Control,
{
    cfg.validate()?;
    let mut adam = Adam::new(policy.net.num_params(), cfg.learning_rate);
    let (mut seen, mut visited, mut update) = (0, 0, 0);
    while visited < cfg.budget_states {
        let batch = policy.sample(env, cfg.rollout_batch, rng)?;
        let states: Vec<E::State> = batch.iter().flat_map(|t| t.steps.iter().map(|(s, _)| s.clone())).collect();
        let evals = policy.evaluate(env, &states)?;
        let mut samples = Vec::with_capacity(states.len());
        let mut k = 0;
        for t in &batch {
            for (s, a) in &t.steps {
                let (p, v) = &evals[k];
                samples.push(Sample {
                    state: s.clone(),
                    action: *a,
                    allowed: env.allowed_actions(s),
                    old_logp: p[a.0].ln(),
                    ret: t.reward,
                    advantage: t.reward - v,
                });
                k += 1;
            }
        }
        if cfg.normalize_advantages && samples.len() > 1 {
            let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / samples.len() as f64;
            let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / samples.len() as f64;
            let sd = var.sqrt() + 1e-8;
            samples.iter_mut().for_each(|s| s.advantage = (s.advantage - mean) / sd);
        }
        let mut loss = PpoLoss { policy: 0.0, value: 0.0, entropy: 0.0 };
        for _ in 0..cfg.epochs {
            loss = ppo_update(policy, &mut adam, env, &samples, cfg)?;
        }
        update += 1;
        seen += batch.len();
        visited += batch.iter().map(|t| t.len()).sum::<usize>();
        let progress = PpoProgress { update, trajectories_seen: seen, states_visited: visited, loss, batch: &batch };
        if observe(&progress, policy) == Control::Stop {
            break;
        }
    }
    Ok(())
}
