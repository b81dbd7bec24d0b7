//! Oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rap_core::dqn::{td_gradient, td_loss, EnvStep, Environment, QNetwork, ResetInfo, Transition};
use rap_core::env::{reward_value, RewardParams};
use rap_core::gsi::ImportanceTable;
use rap_core::memory::{peak_memory, BlockId, ModelSpec, Request, RetentionMask};
use rap_core::surrogate::{bucket_index, PerplexityOracle, SurrogateModel};
use rap_core::Result;

/// Three-state chain: action 1 moves right, action 0 moves back to the
/// start. Moving right out of state 1 ends the episode with reward 1.
pub struct Chain {
    state: usize,
}

impl Chain {
    pub const GAMMA: f64 = 0.9;

    pub fn new() -> Self {
        Self { state: 0 }
    }

    pub fn encode(state: usize) -> Vec<f64> {
        let mut v = vec![0.0; 3];
        v[state] = 1.0;
        v
    }

    /// `(next_state, reward, terminal)`.
    pub fn dynamics(state: usize, action: usize) -> (usize, f64, bool) {
        match (state, action) {
            (1, 1) => (2, 1.0, true),
            (s, 1) => (s + 1, 0.0, false),
            (_, _) => (0, 0.0, false),
        }
    }

    /// Value iteration over the two non-terminal states.
    pub fn q_star() -> [[f64; 2]; 2] {
        let mut q = [[0.0; 2]; 2];
        for _ in 0..10_000 {
            let mut next = q;
            for s in 0..2 {
                for a in 0..2 {
                    let (s2, r, term) = Self::dynamics(s, a);
                    next[s][a] = if term {
                        r
                    } else {
                        r + Self::GAMMA * q[s2][0].max(q[s2][1])
                    };
                }
            }
            q = next;
        }
        q
    }
}

impl Environment for Chain {
    fn state_dim(&self) -> usize {
        3
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self, _rng: &mut ChaCha8Rng) -> Result<ResetInfo> {
        self.state = 0;
        Ok(ResetInfo {
            state: Self::encode(0),
            done: false,
            reward: 0.0,
        })
    }

    fn legal_mask(&self) -> Vec<bool> {
        vec![true, true]
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        let (s2, r, term) = Self::dynamics(self.state, action);
        self.state = s2;
        Ok(EnvStep {
            state: Self::encode(s2),
            reward: r,
            done: term,
        })
    }
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Default, Clone, Copy)]
pub struct FdStats {
    pub checked: usize,
    /// Coordinates whose ±h perturbation flips a ReLU; not comparable.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

fn hidden_signs(net: &QNetwork, state: &[f64]) -> Vec<bool> {
    (0..net.hidden())
        .map(|j| {
            let row = &net.w1[j * net.in_dim()..(j + 1) * net.in_dim()];
            net.b1[j] + row.iter().zip(state).map(|(w, s)| w * s).sum::<f64>() > 0.0
        })
        .collect()
}

/// Central differences with step `h` on every parameter of a random network
/// against [`td_gradient`] for a single transition.
pub fn finite_difference_check(seed: u64, h: f64) -> FdStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (in_dim, hidden, out_dim) = (6, rng.gen_range(4..16), rng.gen_range(2..10));
    let net = QNetwork::init(in_dim, hidden, out_dim, &mut rng);
    let t = Transition {
        state: (0..in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        action: rng.gen_range(0..out_dim),
        reward: rng.gen_range(-1.0..1.0),
        next_state: vec![0.0; in_dim],
        terminal: true,
        next_legal: Vec::new(),
    };
    let y = rng.gen_range(-2.0..2.0);
    let batch = [&t];
    let analytic = td_gradient(&net, &batch, &[y]).flat();
    let flat = net.flat();
    let base_signs = hidden_signs(&net, &t.state);
    let mut stats = FdStats::default();
    for i in 0..flat.len() {
        let eval = |delta: f64| {
            let mut p = flat.clone();
            p[i] += delta;
            QNetwork::from_flat(in_dim, hidden, out_dim, &p).unwrap()
        };
        let (plus, minus) = (eval(h), eval(-h));
        if hidden_signs(&plus, &t.state) != base_signs || hidden_signs(&minus, &t.state) != base_signs {
            stats.skipped_kinks += 1;
            continue;
        }
        let numeric = (td_loss(&plus, &batch, &[y]) - td_loss(&minus, &batch, &[y])) / (2.0 * h);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        let rel = if scale < 1e-10 { 0.0 } else { (a - numeric).abs() / scale };
        stats.max_rel_err = stats.max_rel_err.max(rel);
        stats.checked += 1;
    }
    stats
}

/// Log-perplexity straight from the model definition.
pub fn direct_log_ppl(m: &SurrogateModel, retained: &[bool], seq_len: u32) -> f64 {
    let b = bucket_index(m.bucket_thresholds(), seq_len);
    let mut lp = m.base_log_ppl();
    for (i, &r) in retained.iter().enumerate() {
        if !r {
            lp += m.unary_cost(BlockId::from_index(i), b);
        }
    }
    for p in m.pairs() {
        if !retained[p.first.index()] && !retained[p.second.index()] {
            lp += p.costs[b];
        }
    }
    lp
}

/// Exhaustive per-step argmin: at each step score every remaining block and
/// keep the first minimum, until the pruned parameter share reaches `ratio`.
pub fn brute_gsi(m: &SurrogateModel, spec: &ModelSpec, ratio: f64, seq_len: u32) -> Vec<BlockId> {
    let n = spec.n_blocks();
    let total: f64 = (0..n)
        .map(|i| spec.block_params(BlockId::from_index(i).kind) as f64)
        .sum();
    let mut retained = vec![true; n];
    let mut pruned_params = 0.0;
    let mut order = Vec::new();
    while total > 0.0 && pruned_params / total < ratio {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if !retained[i] {
                continue;
            }
            retained[i] = false;
            let score = direct_log_ppl(m, &retained, seq_len);
            retained[i] = true;
            if best.map_or(true, |(_, s)| score < s) {
                best = Some((i, score));
            }
        }
        let Some((i, _)) = best else { break };
        retained[i] = false;
        pruned_params += spec.block_params(BlockId::from_index(i).kind) as f64;
        order.push(BlockId::from_index(i));
    }
    order
}

/// Best final reward over every removal order, each stopped at the first
/// mask that fits the budget, as the environment does.
pub fn best_final_reward(
    spec: &ModelSpec,
    tables: &ImportanceTable,
    req: Request,
    budget_fraction: f64,
    params: &RewardParams,
) -> f64 {
    let full = RetentionMask::full(spec.n_layers);
    let full_peak = peak_memory(spec, &full, req).unwrap();
    let budget = (budget_fraction * full_peak as f64).floor() as u64;
    let n = spec.n_blocks();
    let mut best = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..n).collect();
    permute(&mut order, 0, &mut |perm| {
        let mut mask = full.clone();
        for &i in perm {
            if peak_memory(spec, &mask, req).unwrap() <= budget {
                break;
            }
            mask.prune(BlockId::from_index(i));
        }
        let fits = peak_memory(spec, &mask, req).unwrap() <= budget;
        let mut value = reward_value(spec, &mask, tables, req, params).unwrap();
        if !fits {
            value += params.infeasible_penalty;
        }
        best = best.max(value);
    });
    best
}

fn permute(items: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        f(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, f);
        items.swap(k, i);
    }
}
