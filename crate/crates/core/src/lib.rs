//! Token-level MDP formulation of preference optimization.
//!
//! Language generation is modelled as a deterministic, tree-structured MDP whose
//! states are token prefixes and whose actions are vocabulary tokens. On top of
//! that substrate this crate provides:
//!
//! - [`soft_rl`]: exact maximum-entropy (KL-regularized) backward induction,
//!   Bellman inversion from Q back to rewards, potential shaping and advantages.
//! - [`preference`]: Bradley-Terry preference probabilities from dense rewards
//!   and from policy log-ratios, dataset sampling and a tabular bandit reward fit.
//! - [`policy`]: differentiable policies (tabular logits and a small windowed
//!   sequence model), supervised fine-tuning and finite-difference gradient audits.
//! - [`dpo`]: the token-level DPO loss and trainer, per-token implicit rewards and
//!   expected log-ratio diagnostics.
//! - [`decode`]: ancestral sampling, likelihood beam search, value-guided search
//!   and proxy-tuning composition.
//!
//! The crate is `no_std` and only needs `alloc`. All math is `f64` through `libm`,
//! so results are bit-for-bit reproducible across runs on one platform.

#![no_std]

extern crate alloc;

pub mod decode;
pub mod dpo;
mod error;
pub mod math;
pub mod mdp;
pub mod optim;
pub mod policy;
pub mod preference;
pub mod soft_rl;

pub use error::{Error, Result};
pub use mdp::{
    enumerate_responses, step, validate_pair, LabelSource, NodeId, PreferencePair, State,
    StateTree, Token, TokenMdp, Trajectory, DEFAULT_ENUMERATION_CAP,
};
