//! Comparison samplers on the hypergrid: a Metropolis-Hastings chain over
//! cells and a PPO agent on the construction MDP.

pub mod mcmc;
pub mod ppo;

pub use mcmc::{mh_acceptance, mh_sample_batch, mh_sample_with, mh_step, mh_transition_matrix, neighbors, MhChain, MhRun};
pub use ppo::{ppo_continue, ppo_train, PpoConfig, PpoLoss, PpoPolicy, PpoProgress};
