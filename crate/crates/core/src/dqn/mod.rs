//! Deep Q-learning over a two-layer MLP with hand-derived gradients.

mod agent;
pub mod checkpoint;
mod network;
mod replay;

pub use agent::{
    bellman_target, greedy_action, masked_argmax, select_action, td_gradient, td_loss, td_update,
    train, CurvePoint, DqnConfig, EnvStep, Environment, Optimizer, OptimizerState, ResetInfo,
    TrainOutcome,
};
pub use network::QNetwork;
pub use replay::{ReplayBuffer, Transition};
