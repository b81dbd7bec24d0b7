use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::QNetwork;
use super::replay::{ReplayBuffer, Transition};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of the episodes over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub minibatch: usize,
    pub episodes: usize,
    pub max_steps: usize,
    /// Stop early once this many environment steps have been taken.
    pub max_total_steps: Option<u64>,
    /// Target network refresh interval, in gradient updates.
    pub target_refresh: u64,
    pub replay_capacity: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            learning_rate: 1e-3,
            optimizer: Optimizer::Sgd,
            minibatch: 32,
            episodes: 1000,
            max_steps: 64,
            max_total_steps: None,
            target_refresh: 500,
            replay_capacity: 50_000,
            hidden: 256,
            seed: 0,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("dqn: {m}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1] (got {})", self.gamma));
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("{name} must lie in [0, 1] (got {e})"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return bad("epsilon_decay_fraction must lie in [0, 1]".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.minibatch == 0 || self.hidden == 0 || self.max_steps == 0 {
            return bad("minibatch, hidden and max_steps must be >= 1".into());
        }
        if self.replay_capacity < self.minibatch {
            return bad("replay_capacity must be at least the minibatch size".into());
        }
        if self.target_refresh == 0 {
            return bad("target_refresh must be >= 1".into());
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over the first
    /// `epsilon_decay_fraction` of the episodes, constant afterwards.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let horizon = self.epsilon_decay_fraction * self.episodes as f64;
        if horizon <= 0.0 {
            return self.epsilon_end;
        }
        let progress = (episode as f64 / horizon).min(1.0);
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * progress
    }

    /// Stable 64-bit digest of the configuration.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResetInfo {
    pub state: Vec<f64>,
    /// No decision is needed in this episode.
    pub done: bool,
    /// Reward charged at reset (e.g. an infeasibility penalty).
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Episodic environment with a discrete, maskable action set.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<ResetInfo>;
    fn legal_mask(&self) -> Vec<bool>;
    fn step(&mut self, action: usize) -> Result<EnvStep>;
}

/// Index of the largest legal value; ties go to the lowest index.
pub fn masked_argmax(values: &[f64], legal: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (&v, &ok)) in values.iter().zip(legal).enumerate() {
        if ok && best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// `r` for terminal transitions, else `r + gamma * max_legal Q_target(s')`.
pub fn bellman_target(
    reward: f64,
    next_state: &[f64],
    terminal: bool,
    target: &QNetwork,
    gamma: f64,
    next_legal: &[bool],
) -> Result<f64> {
    if terminal {
        return Ok(reward);
    }
    let q = target.forward(next_state);
    let best = masked_argmax(&q, next_legal).ok_or_else(|| {
        Error::Contract("non-terminal transition with no legal next action".into())
    })?;
    Ok(reward + gamma * q[best])
}

/// Epsilon-greedy over the legal actions. One uniform draw decides the
/// branch; the random branch draws once more to pick the action.
pub fn select_action<R: Rng + ?Sized>(
    net: &QNetwork,
    state: &[f64],
    epsilon: f64,
    legal: &[bool],
    rng: &mut R,
) -> Result<usize> {
    let n_legal = legal.iter().filter(|&&l| l).count();
    if n_legal == 0 {
        return Err(Error::Contract("no legal action to select".into()));
    }
    if rng.gen::<f64>() < epsilon {
        let pick = rng.gen_range(0..n_legal);
        return Ok(legal
            .iter()
            .enumerate()
            .filter(|(_, &l)| l)
            .nth(pick)
            .map(|(i, _)| i)
            .expect("pick < n_legal"));
    }
    let q = net.forward(state);
    Ok(masked_argmax(&q, legal).expect("at least one legal action"))
}

/// `0.5 * mean (y - Q(s, a))^2`.
pub fn td_loss(net: &QNetwork, batch: &[&Transition], targets: &[f64]) -> f64 {
    let sum: f64 = batch
        .iter()
        .zip(targets)
        .map(|(t, y)| (y - net.q_value(&t.state, t.action)).powi(2))
        .sum();
    0.5 * sum / batch.len() as f64
}

/// Gradient of [`td_loss`] with the targets held fixed.
pub fn td_gradient(net: &QNetwork, batch: &[&Transition], targets: &[f64]) -> QNetwork {
    gradient_and_loss(net, batch, targets).0
}

fn gradient_and_loss(net: &QNetwork, batch: &[&Transition], targets: &[f64]) -> (QNetwork, f64) {
    let mut grad = QNetwork::zeros(net.in_dim(), net.hidden(), net.out_dim());
    let mut pre = net.scratch();
    let n = batch.len() as f64;
    let mut sq = 0.0;
    for (t, &y) in batch.iter().zip(targets) {
        let q = net.q_with_pre(&t.state, t.action, &mut pre);
        sq += (y - q) * (y - q);
        // d/dθ 0.5 (y - Q)^2 = -(y - Q) dQ/dθ
        net.accumulate_grad(&t.state, t.action, -(y - q) / n, &mut grad, &pre);
    }
    (grad, 0.5 * sq / n)
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, n_params: usize) -> Self {
        let n = if kind == Optimizer::Adam { n_params } else { 0 };
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn apply(&mut self, net: &mut QNetwork, grad: &QNetwork, lr: f64) {
        match self.kind {
            Optimizer::Sgd => net.zip_apply(grad, |_, p, g| *p -= lr * g),
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                let (m, v) = (&mut self.m, &mut self.v);
                net.zip_apply(grad, |i, p, g| {
                    m[i] = B1 * m[i] + (1.0 - B1) * g;
                    v[i] = B2 * v[i] + (1.0 - B2) * g * g;
                    *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                });
            }
        }
    }
}

/// One gradient step on the minibatch TD loss. Returns the pre-update loss.
pub fn td_update(
    net: &mut QNetwork,
    batch: &[&Transition],
    target: &QNetwork,
    gamma: f64,
    learning_rate: f64,
    opt: &mut OptimizerState,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty minibatch".into()));
    }
    let targets = batch
        .iter()
        .map(|t| bellman_target(t.reward, &t.next_state, t.terminal, target, gamma, &t.next_legal))
        .collect::<Result<Vec<_>>>()?;
    let (grad, loss) = gradient_and_loss(net, batch, &targets);
    if let Some((i, g)) = grad.params().enumerate().find(|(_, g)| !g.is_finite()) {
        let q: Vec<f64> = batch.iter().map(|t| net.q_value(&t.state, t.action)).collect();
        return Err(Error::NonFinite(format!(
            "gradient component {i} is {g}; targets {targets:?}, predictions {q:?}"
        )));
    }
    opt.apply(net, &grad, learning_rate);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub episode: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub epsilon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: QNetwork,
    pub curve: Vec<CurvePoint>,
    pub total_steps: u64,
    pub updates: u64,
}

/// Deep Q-learning with uniform replay and a periodically refreshed target
/// network. The environment owns its workload source; all randomness on the
/// agent side comes from one generator seeded with `cfg.seed`.
pub fn train<E: Environment + ?Sized>(env: &mut E, cfg: &DqnConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = QNetwork::init(env.state_dim(), cfg.hidden, env.n_actions(), &mut rng);
    let mut target = net.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, net.n_params());
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let mut curve = Vec::with_capacity(cfg.episodes);
    let mut total_steps = 0u64;
    let mut updates = 0u64;

    'episodes: for episode in 0..cfg.episodes {
        let epsilon = cfg.epsilon(episode);
        let reset = env.reset(&mut rng)?;
        let mut ret = reset.reward;
        let mut state = reset.state;
        let mut steps = 0;
        let mut done = reset.done;
        while !done && steps < cfg.max_steps {
            if cfg.max_total_steps.is_some_and(|cap| total_steps >= cap) {
                break 'episodes;
            }
            let legal = env.legal_mask();
            let action = select_action(&net, &state, epsilon, &legal, &mut rng)?;
            let out = env.step(action)?;
            ret += out.reward;
            steps += 1;
            total_steps += 1;
            done = out.done;
            replay.push(Transition {
                state: std::mem::take(&mut state),
                action,
                reward: out.reward,
                next_state: out.state.clone(),
                terminal: out.done,
                next_legal: if out.done { Vec::new() } else { env.legal_mask() },
            });
            state = out.state;

            if replay.len() >= cfg.minibatch {
                let batch = replay.sample(cfg.minibatch, &mut rng)?;
                let loss = td_update(&mut net, &batch, &target, cfg.gamma, cfg.learning_rate, &mut opt)?;
                if !loss.is_finite() || !net.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "Q-network diverged after {updates} updates (loss {loss})"
                    )));
                }
                updates += 1;
                if updates % cfg.target_refresh == 0 {
                    target = net.clone();
                }
            }
        }
        curve.push(CurvePoint {
            episode,
            episode_return: ret,
            epsilon,
            steps,
        });
    }

    Ok(TrainOutcome {
        net,
        curve,
        total_steps,
        updates,
    })
}

/// Greedy masked action of a trained network.
pub fn greedy_action(net: &QNetwork, state: &[f64], legal: &[bool]) -> Result<usize> {
    let q = net.forward(state);
    masked_argmax(&q, legal).ok_or_else(|| Error::Contract("no legal action to select".into()))
}
