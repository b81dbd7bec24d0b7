mod common;

use rand_chacha::ChaCha8Rng;

use rap_core::dqn::{
    checkpoint, train, DqnConfig, EnvStep, Environment, Optimizer, ResetInfo,
};
use rap_core::Result;

use common::Chain;

/// One state, one step per episode, deterministic payoffs per arm.
struct Bandit {
    payoffs: Vec<f64>,
}

impl Environment for Bandit {
    fn state_dim(&self) -> usize {
        2
    }
    fn n_actions(&self) -> usize {
        self.payoffs.len()
    }
    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Result<ResetInfo> {
        Ok(ResetInfo {
            state: vec![1.0, 0.5],
            done: false,
            reward: 0.0,
        })
    }
    fn legal_mask(&self) -> Vec<bool> {
        vec![true; self.payoffs.len()]
    }
    fn step(&mut self, action: usize) -> Result<EnvStep> {
        Ok(EnvStep {
            state: vec![0.0, 0.0],
            reward: self.payoffs[action],
            done: true,
        })
    }
}

fn bandit_cfg(seed: u64) -> DqnConfig {
    DqnConfig {
        gamma: 0.0,
        optimizer: Optimizer::Adam,
        learning_rate: 1e-3,
        episodes: 3000,
        hidden: 16,
        minibatch: 16,
        target_refresh: 100,
        seed,
        ..DqnConfig::default()
    }
}

#[test]
fn zero_discount_bandit_learns_immediate_rewards() {
    let payoffs = vec![0.2, -0.4, 0.7];
    let mut env = Bandit { payoffs: payoffs.clone() };
    let out = train(&mut env, &bandit_cfg(4)).unwrap();
    let q = out.net.forward(&[1.0, 0.5]);
    for (a, (&qa, &r)) in q.iter().zip(&payoffs).enumerate() {
        assert!((qa - r).abs() <= 0.02, "arm {a}: Q {qa} vs payoff {r}");
    }
}

#[test]
fn same_seed_training_is_bit_identical() {
    let cfg = DqnConfig {
        episodes: 300,
        hidden: 16,
        gamma: Chain::GAMMA,
        max_steps: 20,
        seed: 9,
        ..DqnConfig::default()
    };
    let a = train(&mut Chain::new(), &cfg).unwrap();
    let b = train(&mut Chain::new(), &cfg).unwrap();
    assert_eq!(a.curve.len(), b.curve.len());
    for (x, y) in a.curve.iter().zip(&b.curve) {
        assert_eq!(x.episode_return.to_bits(), y.episode_return.to_bits());
        assert_eq!(x.steps, y.steps);
    }
    assert_eq!(
        checkpoint::encode(&a.net, 9, cfg.hash()),
        checkpoint::encode(&b.net, 9, cfg.hash())
    );

    let other = train(&mut Chain::new(), &DqnConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.net.flat(), other.net.flat());
}

#[test]
fn total_step_cap_stops_training() {
    let cfg = DqnConfig {
        episodes: 1000,
        hidden: 8,
        max_total_steps: Some(50),
        ..DqnConfig::default()
    };
    let out = train(&mut Chain::new(), &cfg).unwrap();
    assert_eq!(out.total_steps, 50);
}

#[test]
fn checkpoint_round_trips_through_disk() {
    let cfg = DqnConfig {
        episodes: 20,
        hidden: 8,
        ..DqnConfig::default()
    };
    let out = train(&mut Chain::new(), &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.qnet");
    checkpoint::save(&path, &out.net, cfg.seed, cfg.hash()).unwrap();
    let (header, net) = checkpoint::load(&path).unwrap();
    assert_eq!(header.config_hash, cfg.hash());
    assert_eq!(net.flat(), out.net.flat());
}
