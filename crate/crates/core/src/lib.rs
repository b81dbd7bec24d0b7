//! Runtime-adaptive structured pruning for transformer inference.
//!
//! The crate models the memory of a transformer (parameters plus KV cache)
//! per retained block, ranks MHA/FFN blocks by greedy sequential
//! importance against a perplexity oracle, and trains a small DQN that
//! prunes blocks one at a time until a request fits its memory budget.

pub mod dqn;
pub mod env;
pub mod error;
pub mod gsi;
pub mod harness;
pub mod memory;
pub mod surrogate;
pub mod workload;

pub use error::{Error, Result};
