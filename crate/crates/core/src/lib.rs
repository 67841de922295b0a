//! Generative flow networks on enumerable DAG environments.
//!
//! The crate trains samplers whose terminal distribution is proportional
//! to a positive reward, and ships the tooling needed to check them:
//! exact dynamic-programming oracles, Metropolis-Hastings and PPO
//! baselines, offline training, and a multi-round active-learning loop.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod active;
pub mod baselines;
pub mod env;
pub mod experiments;
pub mod flownet;
pub mod hypergrid;
pub mod nn;
pub mod oracles;
