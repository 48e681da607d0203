//! Hierarchical intermediate rewards inside group-relative policy
//! optimization, for pairwise fine-grained verification.
//!
//! The numerical core (rewards, policy, optimizer) is generic over
//! [`Scalar`]; the aliases below fix it to `f64`, which is what training and
//! the gradient checks use.

pub mod eval;
pub mod grpo;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod scalar;
pub mod synthworld;
pub mod taxonomy;
pub mod trace;

pub use scalar::Scalar;

pub type Policy = policy::Policy<f64>;
pub type PolicyParams = policy::PolicyParams<f64>;
pub type ReferencePolicy = policy::ReferencePolicy<f64>;
pub type RewardBreakdown = reward::RewardBreakdown<f64>;
pub type TrainState = grpo::TrainState<f64>;
pub type Trainer<'a> = grpo::Trainer<'a, f64>;
pub type AdamW = grpo::AdamW<f64>;

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
