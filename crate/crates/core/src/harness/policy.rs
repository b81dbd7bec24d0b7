use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::setup::Setup;
use crate::dqn::{greedy_action, EnvStep, Environment, QNetwork, ResetInfo};
use crate::env::{PruningEnv, STATE_DIM};
use crate::error::{Error, Result};
use crate::memory::{BlockId, BlockKind};
use crate::surrogate::PerplexityOracle;
use crate::workload::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Trained DQN controller.
    Rap,
    /// Static GSI order until feasible.
    GsiStatic,
    /// Ascending single-removal perplexity until feasible.
    OneShot,
    /// Uniformly random retained block until feasible.
    RandomDrop,
}

impl PolicyKind {
    /// Expected quality order, best first.
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Rap,
        PolicyKind::GsiStatic,
        PolicyKind::OneShot,
        PolicyKind::RandomDrop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Rap => "rap",
            PolicyKind::GsiStatic => "gsi_static",
            PolicyKind::OneShot => "one_shot",
            PolicyKind::RandomDrop => "random_drop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A policy ready to make decisions.
pub enum Controller<'n> {
    Rap(&'n QNetwork),
    GsiStatic,
    OneShot,
    RandomDrop(ChaCha8Rng),
}

impl<'n> Controller<'n> {
    /// `net` is required for [`PolicyKind::Rap`]; `seed` drives RandomDrop.
    pub fn new(kind: PolicyKind, setup: &Setup, net: Option<&'n QNetwork>, seed: u64) -> Result<Self> {
        Ok(match kind {
            PolicyKind::Rap => {
                let net = net.ok_or_else(|| {
                    Error::Contract("the RAP policy needs a trained Q-network".into())
                })?;
                check_network(net, setup)?;
                Controller::Rap(net)
            }
            PolicyKind::GsiStatic => Controller::GsiStatic,
            PolicyKind::OneShot => Controller::OneShot,
            PolicyKind::RandomDrop => Controller::RandomDrop(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            Controller::Rap(_) => PolicyKind::Rap,
            Controller::GsiStatic => PolicyKind::GsiStatic,
            Controller::OneShot => PolicyKind::OneShot,
            Controller::RandomDrop(_) => PolicyKind::RandomDrop,
        }
    }

    /// Next block to remove in the current episode of `env`.
    pub fn choose(&mut self, setup: &Setup, env: &PruningEnv<'_>) -> Result<BlockId> {
        let mask = env
            .mask()
            .ok_or_else(|| Error::Contract("no active episode".into()))?;
        let seq_len = env.request().map(|r| r.seq_len).unwrap_or(1);
        let first_retained = |order: &[BlockId]| {
            order
                .iter()
                .copied()
                .find(|&b| mask.is_retained(b))
                .ok_or_else(|| Error::Contract("no retained block left".into()))
        };
        match self {
            Controller::Rap(net) => {
                let state = env.state()?;
                let a = greedy_action(net, state.as_slice(), mask.bits())?;
                Ok(BlockId::from_index(a))
            }
            Controller::GsiStatic => first_retained(setup.gsi_order(seq_len)),
            Controller::OneShot => first_retained(setup.one_shot_order(seq_len)),
            Controller::RandomDrop(rng) => env
                .legal_actions()
                .choose(rng)
                .copied()
                .ok_or_else(|| Error::Contract("no retained block left".into())),
        }
    }
}

pub(crate) fn check_network(net: &QNetwork, setup: &Setup) -> Result<()> {
    if net.in_dim() != STATE_DIM {
        return Err(Error::Dimension {
            expected: STATE_DIM,
            got: net.in_dim(),
        });
    }
    if net.out_dim() != setup.spec.n_blocks() {
        return Err(Error::Dimension {
            expected: setup.spec.n_blocks(),
            got: net.out_dim(),
        });
    }
    Ok(())
}

/// Outcome of serving one trace record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutLog {
    pub index: usize,
    pub policy: PolicyKind,
    pub t: u64,
    pub batch: u32,
    pub seq_len: u32,
    pub budget_frac: f64,
    pub steps: usize,
    pub feasible: bool,
    pub mha_pruned: usize,
    pub ffn_pruned: usize,
    /// Surrogate log-perplexity of the final configuration.
    pub log_ppl: f64,
    pub retained_ippl: f64,
    /// Final peak over dense peak.
    pub retained_mem_frac: f64,
    pub final_reward: f64,
    pub episode_return: f64,
    pub final_peak_bytes: u64,
    pub budget_bytes: u64,
    #[serde(skip)]
    pub latency_ns: u64,
}

/// Serves one request with `ctrl`, checking the budget contract.
pub fn rollout(
    setup: &Setup,
    env: &mut PruningEnv<'_>,
    ctrl: &mut Controller<'_>,
    index: usize,
    rec: &TraceRecord,
) -> Result<RolloutLog> {
    let req = rec.request()?;
    let limit = setup.spec.n_blocks();
    let started = Instant::now();
    let reset = env.reset(req, rec.budget_fraction)?;
    let mut done = reset.done;
    let mut steps = 0;
    while !done {
        if steps >= limit {
            return Err(Error::Contract(format!(
                "{} exceeded {limit} removals on record {index}",
                ctrl.kind()
            )));
        }
        let block = ctrl.choose(setup, env)?;
        done = env.step(block)?.done;
        steps += 1;
    }
    let latency_ns = started.elapsed().as_nanos() as u64;

    let summary = env.summary()?;
    if summary.feasible && summary.final_peak_bytes > summary.budget_bytes {
        return Err(Error::Contract(format!(
            "record {index}: flagged feasible but peak {} exceeds budget {}",
            summary.final_peak_bytes, summary.budget_bytes
        )));
    }
    let mask = &summary.mask;
    let row = setup.tables.row(setup.tables.bucket_of(req.seq_len));
    let full_peak = crate::memory::peak_memory(
        &setup.spec,
        &crate::memory::RetentionMask::full(setup.spec.n_layers),
        req,
    )?;
    let count_pruned = |kind| mask.pruned().filter(|b| b.kind == kind).count();
    Ok(RolloutLog {
        index,
        policy: ctrl.kind(),
        t: rec.t,
        batch: rec.batch_size,
        seq_len: rec.seq_len,
        budget_frac: rec.budget_fraction,
        steps: summary.steps,
        feasible: summary.feasible,
        mha_pruned: count_pruned(BlockKind::Mha),
        ffn_pruned: count_pruned(BlockKind::Ffn),
        log_ppl: setup.oracle.log_perplexity(mask, req.seq_len)?,
        retained_ippl: mask.retained().map(|b| row[b.index()]).sum(),
        retained_mem_frac: summary.final_peak_bytes as f64 / full_peak.max(1) as f64,
        final_reward: summary.final_reward,
        episode_return: summary.episode_return,
        final_peak_bytes: summary.final_peak_bytes,
        budget_bytes: summary.budget_bytes,
        latency_ns,
    })
}

/// Pruning environment fed from a trace, for training. Records are served
/// in order and cycled, independent of the agent's generator.
pub struct PruningTask<'a> {
    env: PruningEnv<'a>,
    records: &'a [TraceRecord],
    cursor: usize,
}

impl<'a> PruningTask<'a> {
    pub fn new(setup: &'a Setup, records: &'a [TraceRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("training trace is empty".into()));
        }
        Ok(Self {
            env: setup.env()?,
            records,
            cursor: 0,
        })
    }

    pub fn env(&self) -> &PruningEnv<'a> {
        &self.env
    }
}

impl Environment for PruningTask<'_> {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn n_actions(&self) -> usize {
        self.env.n_actions()
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Result<ResetInfo> {
        let rec = self.records[self.cursor % self.records.len()];
        self.cursor += 1;
        let out = self.env.reset(rec.request()?, rec.budget_fraction)?;
        let reward = if out.done && !out.feasible {
            self.env.params().infeasible_penalty
        } else {
            0.0
        };
        Ok(ResetInfo {
            state: out.state.0.to_vec(),
            done: out.done,
            reward,
        })
    }

    fn legal_mask(&self) -> Vec<bool> {
        self.env.mask().map(|m| m.bits().to_vec()).unwrap_or_default()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if action >= self.env.n_actions() {
            return Err(Error::Contract(format!("action {action} out of range")));
        }
        let out = self.env.step(BlockId::from_index(action))?;
        Ok(EnvStep {
            state: out.next_state.0.to_vec(),
            reward: out.reward,
            done: out.done,
        })
    }
}
