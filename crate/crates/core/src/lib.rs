//! A desk-scale laboratory for reinforcement learning from feedback: a toy
//! generation task with gold scoring rules, a linear softmax policy, reward
//! models trained on systematically flipped proxy labels, PPO with KL
//! shaping and interruption, and sweeps over reward-model checkpoints.

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod hashing;
pub mod policy;
pub mod ppo;
pub mod reward_model;
pub mod shaping;
pub mod sweep;

pub use error::{Error, Result};

/// Guide chapters, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/task.md")]
    mod task {}
    #[doc = include_str!("../../../book/src/policy.md")]
    mod policy {}
    #[doc = include_str!("../../../book/src/reward_models.md")]
    mod reward_models {}
    #[doc = include_str!("../../../book/src/rewards.md")]
    mod rewards {}
    #[doc = include_str!("../../../book/src/ppo.md")]
    mod ppo {}
    #[doc = include_str!("../../../book/src/sweeps.md")]
    mod sweeps {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
