//! Episodic pruning environment.
//!
//! One episode serves one request under one memory budget. Each step
//! removes one retained block; the episode ends as soon as the peak
//! footprint fits the budget or nothing is left to remove. Rewards are the
//! per-step change of [`reward_value`], so the undiscounted return of an
//! episode telescopes to `reward_value(final) - reward_value(full)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsi::{memory_importance, ImportanceTable};
use crate::memory::{peak_memory, BlockId, BlockKind, ModelSpec, Request, RetentionMask};

pub const STATE_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Retained share of perplexity importance minus retained share of
    /// memory footprint.
    #[default]
    Normalized,
    /// Per-block ratio taken literally: every retained block contributes
    /// `alpha - beta` regardless of its importance.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub alpha: f64,
    pub beta: f64,
    pub infeasible_penalty: f64,
    pub mode: RewardMode,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.03,
            infeasible_penalty: -1.0,
            mode: RewardMode::Normalized,
        }
    }
}

impl RewardParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Config("alpha and beta cannot both be zero".into()));
        }
        if !(self.infeasible_penalty <= 0.0) {
            return Err(Error::Config("infeasible_penalty must be <= 0".into()));
        }
        Ok(())
    }
}

/// Scale constants for the request part of the state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StateNorms {
    pub max_batch: u32,
    pub max_seq: u32,
}

impl Default for StateNorms {
    fn default() -> Self {
        Self {
            max_batch: 16,
            max_seq: 8192,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemState {
    pub mem_budget: u64,
    pub mem_footprint: u64,
}

/// `[batch, seq_len, retained FFN importance, retained MHA importance,
/// budget, footprint]`, the last two relative to the request's dense peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector(pub [f64; STATE_DIM]);

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next_state: StateVector,
    pub reward: f64,
    pub done: bool,
    pub feasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResetOutcome {
    pub state: StateVector,
    /// The dense model already fits, or nothing can make it fit.
    pub done: bool,
    pub feasible: bool,
}

/// Per-request view of the importance inputs to the reward.
#[derive(Debug, Clone)]
pub struct RewardInputs<'t> {
    pub i_ppl: &'t [f64],
    pub block_mem: Vec<u64>,
    pub mem_total: u128,
}

impl<'t> RewardInputs<'t> {
    pub fn new(spec: &ModelSpec, tables: &'t ImportanceTable, req: Request) -> Result<Self> {
        req.validate()?;
        if tables.n_blocks() != spec.n_blocks() {
            return Err(Error::Dimension {
                expected: spec.n_blocks(),
                got: tables.n_blocks(),
            });
        }
        let block_mem = spec
            .blocks()
            .map(|b| memory_importance(spec, req, b))
            .collect::<Result<Vec<_>>>()?;
        let mem_total = block_mem.iter().map(|&m| m as u128).sum();
        Ok(Self {
            i_ppl: tables.row(tables.bucket_of(req.seq_len)),
            block_mem,
            mem_total,
        })
    }

    pub fn mem_share(&self, block: BlockId) -> f64 {
        if self.mem_total == 0 {
            return 0.0;
        }
        self.block_mem[block.index()] as f64 / self.mem_total as f64
    }

    pub fn value(&self, mask: &RetentionMask, params: &RewardParams) -> f64 {
        match params.mode {
            RewardMode::Normalized => {
                let mut ppl = 0.0;
                let mut mem: u128 = 0;
                for block in mask.retained() {
                    ppl += self.i_ppl[block.index()];
                    mem += self.block_mem[block.index()] as u128;
                }
                let mem_share = if self.mem_total == 0 {
                    0.0
                } else {
                    mem as f64 / self.mem_total as f64
                };
                params.alpha * ppl - params.beta * mem_share
            }
            RewardMode::Literal => {
                (params.alpha - params.beta) * mask.count_retained() as f64
            }
        }
    }
}

/// Reward of a retention mask for a request.
pub fn reward_value(
    spec: &ModelSpec,
    mask: &RetentionMask,
    tables: &ImportanceTable,
    req: Request,
    params: &RewardParams,
) -> Result<f64> {
    if mask.len() != spec.n_blocks() {
        return Err(Error::Dimension {
            expected: spec.n_blocks(),
            got: mask.len(),
        });
    }
    Ok(RewardInputs::new(spec, tables, req)?.value(mask, params))
}

/// Exactly the retained blocks.
pub fn legal_actions(mask: &RetentionMask) -> Vec<BlockId> {
    mask.retained().collect()
}

pub fn encode_state(
    req: Request,
    mask: &RetentionMask,
    tables: &ImportanceTable,
    sys: SystemState,
    norms: &StateNorms,
    full_peak: u64,
) -> StateVector {
    let row = tables.row(tables.bucket_of(req.seq_len));
    let (mut ffn, mut mha) = (0.0, 0.0);
    for block in mask.retained() {
        match block.kind {
            BlockKind::Ffn => ffn += row[block.index()],
            BlockKind::Mha => mha += row[block.index()],
        }
    }
    let peak = full_peak.max(1) as f64;
    StateVector([
        req.batch_size as f64 / norms.max_batch.max(1) as f64,
        req.seq_len as f64 / norms.max_seq.max(1) as f64,
        ffn.clamp(0.0, 1.0),
        mha.clamp(0.0, 1.0),
        sys.mem_budget as f64 / peak,
        sys.mem_footprint as f64 / peak,
    ])
}

#[derive(Debug, Clone)]
struct Episode<'t> {
    req: Request,
    inputs: RewardInputs<'t>,
    mask: RetentionMask,
    sys: SystemState,
    full_peak: u64,
    reward_now: f64,
    reward_initial: f64,
    penalty: f64,
    steps: usize,
    done: bool,
    feasible: bool,
}

/// Summary of a finished (or in-progress) episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub steps: usize,
    pub feasible: bool,
    pub final_reward: f64,
    /// Sum of all step rewards plus any penalty charged at reset.
    pub episode_return: f64,
    pub final_peak_bytes: u64,
    pub budget_bytes: u64,
    pub mask: RetentionMask,
}

pub struct PruningEnv<'a> {
    spec: &'a ModelSpec,
    tables: &'a ImportanceTable,
    params: RewardParams,
    norms: StateNorms,
    episode: Option<Episode<'a>>,
}

impl<'a> PruningEnv<'a> {
    pub fn new(
        spec: &'a ModelSpec,
        tables: &'a ImportanceTable,
        params: RewardParams,
        norms: StateNorms,
    ) -> Result<Self> {
        spec.validate()?;
        params.validate()?;
        if tables.n_blocks() != spec.n_blocks() {
            return Err(Error::Dimension {
                expected: spec.n_blocks(),
                got: tables.n_blocks(),
            });
        }
        Ok(Self {
            spec,
            tables,
            params,
            norms,
            episode: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    pub fn params(&self) -> &RewardParams {
        &self.params
    }

    pub fn n_actions(&self) -> usize {
        self.spec.n_blocks()
    }

    /// Starts an episode with the dense model and a budget of
    /// `budget_fraction` times the dense peak. If even the empty model does
    /// not fit, the episode is flagged infeasible immediately and charged
    /// the infeasible penalty.
    pub fn reset(&mut self, req: Request, budget_fraction: f64) -> Result<ResetOutcome> {
        if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "budget fraction must lie in (0, 1] (got {budget_fraction})"
            )));
        }
        let mask = RetentionMask::full(self.spec.n_layers);
        let full_peak = peak_memory(self.spec, &mask, req)?;
        let budget = (budget_fraction * full_peak as f64).floor() as u64;
        let budget = budget.min(full_peak);
        let floor = peak_memory(self.spec, &RetentionMask::empty(self.spec.n_layers), req)?;
        let inputs = RewardInputs::new(self.spec, self.tables, req)?;
        let reward_now = inputs.value(&mask, &self.params);
        let fits = full_peak <= budget;
        let hopeless = floor > budget;
        let episode = Episode {
            req,
            inputs,
            mask,
            sys: SystemState {
                mem_budget: budget,
                mem_footprint: full_peak,
            },
            full_peak,
            reward_now,
            reward_initial: reward_now,
            penalty: if hopeless {
                self.params.infeasible_penalty
            } else {
                0.0
            },
            steps: 0,
            done: fits || hopeless,
            feasible: fits,
        };
        let outcome = ResetOutcome {
            state: self.encode(&episode),
            done: episode.done,
            feasible: episode.feasible,
        };
        self.episode = Some(episode);
        Ok(outcome)
    }

    fn encode(&self, ep: &Episode<'_>) -> StateVector {
        encode_state(ep.req, &ep.mask, self.tables, ep.sys, &self.norms, ep.full_peak)
    }

    fn episode(&self) -> Result<&Episode<'a>> {
        self.episode
            .as_ref()
            .ok_or_else(|| Error::Contract("step called before reset".into()))
    }

    pub fn mask(&self) -> Option<&RetentionMask> {
        self.episode.as_ref().map(|e| &e.mask)
    }

    pub fn system_state(&self) -> Option<SystemState> {
        self.episode.as_ref().map(|e| e.sys)
    }

    pub fn request(&self) -> Option<Request> {
        self.episode.as_ref().map(|e| e.req)
    }

    pub fn is_done(&self) -> bool {
        self.episode.as_ref().map_or(true, |e| e.done)
    }

    pub fn state(&self) -> Result<StateVector> {
        Ok(self.encode(self.episode()?))
    }

    pub fn legal_actions(&self) -> Vec<BlockId> {
        self.episode
            .as_ref()
            .map(|e| legal_actions(&e.mask))
            .unwrap_or_default()
    }

    /// Immediate reward of removing `block` without stepping.
    pub fn step_reward(&self, block: BlockId) -> Result<f64> {
        let ep = self.episode()?;
        let next = ep.mask.with_pruned(block);
        Ok(ep.inputs.value(&next, &self.params) - ep.reward_now)
    }

    pub fn step(&mut self, action: BlockId) -> Result<StepOutcome> {
        let params = self.params;
        let ep = self
            .episode
            .as_mut()
            .ok_or_else(|| Error::Contract("step called before reset".into()))?;
        if ep.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        if action.index() >= ep.mask.len() || !ep.mask.is_retained(action) {
            return Err(Error::Contract(format!(
                "illegal action {action}: block is not retained"
            )));
        }
        ep.mask.prune(action);
        ep.steps += 1;
        ep.sys.mem_footprint -= ep.inputs.block_mem[action.index()];
        let value = ep.inputs.value(&ep.mask, &params);
        let mut reward = value - ep.reward_now;
        ep.reward_now = value;
        ep.feasible = ep.sys.mem_footprint <= ep.sys.mem_budget;
        let exhausted = ep.mask.count_retained() == 0;
        ep.done = ep.feasible || exhausted;
        if exhausted && !ep.feasible {
            reward += params.infeasible_penalty;
            ep.penalty += params.infeasible_penalty;
        }
        let (done, feasible) = (ep.done, ep.feasible);
        let ep = self.episode.as_ref().expect("episode present");
        Ok(StepOutcome {
            next_state: self.encode(ep),
            reward,
            done,
            feasible,
        })
    }

    pub fn summary(&self) -> Result<EpisodeSummary> {
        let ep = self.episode()?;
        Ok(EpisodeSummary {
            steps: ep.steps,
            feasible: ep.feasible,
            final_reward: ep.reward_now,
            episode_return: ep.reward_now - ep.reward_initial + ep.penalty,
            final_peak_bytes: ep.sys.mem_footprint,
            budget_bytes: ep.sys.mem_budget,
            mask: ep.mask.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gsi::build_importance_table;
    use crate::surrogate::{gen_surrogate, SurrogateGenParams};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_tables(spec: &ModelSpec) -> ImportanceTable {
        let m = gen_surrogate(spec, 42, &SurrogateGenParams::default()).unwrap();
        build_importance_table(&m, spec, &m.checksum()).unwrap().0
    }

    fn llama_setup() -> (ModelSpec, ImportanceTable) {
        let spec = ModelSpec::llama2_7b_like();
        let tables = toy_tables(&spec);
        (spec, tables)
    }

    #[test]
    fn full_budget_finishes_immediately() {
        let spec = ModelSpec::toy_4x2();
        let tables = toy_tables(&spec);
        let mut env = PruningEnv::new(&spec, &tables, RewardParams::default(), StateNorms::default()).unwrap();
        let out = env.reset(Request::new(3, 5).unwrap(), 1.0).unwrap();
        assert!(out.done && out.feasible);
        assert!(env.step(BlockId::mha(0)).is_err());
        assert_eq!(env.summary().unwrap().steps, 0);
    }

    #[test]
    fn llama_budget_is_fraction_of_peak() {
        let (spec, tables) = llama_setup();
        let mut env = PruningEnv::new(&spec, &tables, RewardParams::default(), StateNorms::default()).unwrap();
        let req = Request::new(16, 4096).unwrap();
        env.reset(req, 0.8).unwrap();
        let peak = 13_476_831_232u64 + (32u64 << 30);
        let expected = (0.8 * peak as f64).floor() as u64;
        assert_eq!(env.system_state().unwrap().mem_budget, expected);
        assert_eq!(env.system_state().unwrap().mem_footprint, peak);
    }

    #[test]
    fn toy_budget_by_hand() {
        let spec = ModelSpec::toy_4x2();
        let tables = toy_tables(&spec);
        let mut env = PruningEnv::new(&spec, &tables, RewardParams::default(), StateNorms::default()).unwrap();
        env.reset(Request::new(3, 5).unwrap(), 0.5).unwrap();
        // peak = 24_576 parameter bytes + 3_840 KV bytes = 28_416
        assert_eq!(env.system_state().unwrap().mem_budget, 14_208);
    }

    #[test]
    fn hopeless_budget_is_flagged_at_reset() {
        let spec = ModelSpec::toy_4x2();
        let tables = toy_tables(&spec);
        let mut env = PruningEnv::new(&spec, &tables, RewardParams::default(), StateNorms::default()).unwrap();
        // other params alone are 4096 of 28_416 bytes
        let out = env.reset(Request::new(3, 5).unwrap(), 0.1).unwrap();
        assert!(out.done && !out.feasible);
        let s = env.summary().unwrap();
        assert_eq!(s.episode_return, -1.0);
    }

    #[test]
    fn legal_actions_shrink() {
        let (spec, tables) = llama_setup();
        let mut env = PruningEnv::new(&spec, &tables, RewardParams::default(), StateNorms::default()).unwrap();
        env.reset(Request::new(1, 128).unwrap(), 0.5).unwrap();
        assert_eq!(env.legal_actions().len(), 64);
        env.step(BlockId::ffn(3)).unwrap();
        assert!(!env.legal_actions().contains(&BlockId::ffn(3)));
        assert!(matches!(env.step(BlockId::ffn(3)), Err(Error::Contract(_))));
        let mut mask = RetentionMask::empty(2);
        mask.set(BlockId::mha(1), true);
        assert_eq!(legal_actions(&mask), vec![BlockId::mha(1)]);
    }

    #[test]
    fn reward_value_examples() {
        let spec = ModelSpec::toy_4x2();
        let tables = toy_tables(&spec);
        let req = Request::new(2, 9).unwrap();
        let p = RewardParams::new(1.0, 0.03);
        let full = reward_value(&spec, &RetentionMask::full(4), &tables, req, &p).unwrap();
        assert!((full - 0.97).abs() < 1e-12);
        let empty = reward_value(&spec, &RetentionMask::empty(4), &tables, req, &p).unwrap();
        assert_eq!(empty, 0.0);

        // Two layers, uniform importance and equal memory per block: half
        // the blocks retained -> 0.5 - 0.03 * 0.5.
        let flat = ModelSpec {
            name: "flat".into(),
            n_layers: 2,
            n_heads: 1,
            d_head: 1,
            bytes_per_element: 1,
            mha_params: 8,
            ffn_params: 10,
            other_params: 0,
            overhead_bytes: 0,
        };
        // MHA memory = 8 + 2 * 1 * 1 * 1 * tokens(1) = 10 = FFN memory
        let table = ImportanceTable::from_raw(&[1.0; 4]).unwrap();
        let mask = RetentionMask::from_bits(vec![true, false, false, true]).unwrap();
        let v = reward_value(&flat, &mask, &table, Request::new(1, 1).unwrap(), &p).unwrap();
        assert!((v - 0.485).abs() < 1e-12);
    }

    #[test]
    fn literal_reading_counts_blocks() {
        let spec = ModelSpec::toy_4x2();
        let tables = toy_tables(&spec);
        let p = RewardParams {
            mode: RewardMode::Literal,
            ..RewardParams::new(1.0, 0.03)
        };
        let mask = RetentionMask::full(4).with_pruned(BlockId::mha(2));
        let v = reward_value(&spec, &mask, &tables, Request::new(1, 1).unwrap(), &p).unwrap();
        assert!((v - 7.0 * 0.97).abs() < 1e-12);
    }

    #[test]
    fn ffn_step_reward_expansion() {
        let spec = ModelSpec::toy_4x2();
        let tables = toy_tables(&spec);
        let p = RewardParams::new(1.0, 0.03);
        let req = Request::new(3, 5).unwrap();
        let mut env = PruningEnv::new(&spec, &tables, p, StateNorms::default()).unwrap();
        env.reset(req, 0.5).unwrap();
        let out = env.step(BlockId::ffn(1)).unwrap();
        let total_mem: u64 = spec
            .blocks()
            .map(|b| memory_importance(&spec, req, b).unwrap())
            .sum();
        let expected = -tables.get(BlockId::ffn(1), 0) + 0.03 * (1536.0 * 2.0) / total_mem as f64;
        assert!((out.reward - expected).abs() < 1e-12);
    }

    #[test]
    fn exhaustive_orders_telescope() {
        // 2 layers = 4 blocks, hand-built table; every order of removals.
        let spec = ModelSpec {
            n_layers: 2,
            ..ModelSpec::toy_4x2()
        };
        let table = ImportanceTable::from_raw(&[0.1, 0.4, 0.2, 0.3]).unwrap();
        let p = RewardParams::new(1.0, 0.3);
        let req = Request::new(2, 7).unwrap();
        let mut order = [0usize, 1, 2, 3];
        let mut perms = Vec::new();
        permute(&mut order, 0, &mut perms);
        assert_eq!(perms.len(), 24);
        for fraction in [0.2, 0.5, 0.8] {
            for perm in &perms {
                let mut env = PruningEnv::new(&spec, &table, p, StateNorms::default()).unwrap();
                let reset = env.reset(req, fraction).unwrap();
                let mut ret = if reset.done && !reset.feasible { p.infeasible_penalty } else { 0.0 };
                let mut done = reset.done;
                for &i in perm {
                    if done {
                        break;
                    }
                    let out = env.step(BlockId::from_index(i)).unwrap();
                    ret += out.reward;
                    done = out.done;
                }
                let s = env.summary().unwrap();
                let direct = reward_value(&spec, &s.mask, &table, req, &p).unwrap()
                    - reward_value(&spec, &RetentionMask::full(2), &table, req, &p).unwrap();
                let penalty = if s.feasible { 0.0 } else { p.infeasible_penalty };
                assert!((ret - (direct + penalty)).abs() < 1e-9);
                assert!((s.episode_return - ret).abs() < 1e-12);
                if s.feasible {
                    assert!(peak_memory(&spec, &s.mask, req).unwrap() <= s.budget_bytes);
                }
            }
        }
    }

    fn permute(v: &mut [usize; 4], k: usize, out: &mut Vec<[usize; 4]>) {
        if k == v.len() {
            out.push(*v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, out);
            v.swap(k, i);
        }
    }

    #[test]
    fn encoded_state_golden() {
        let spec = ModelSpec {
            n_layers: 2,
            ..ModelSpec::toy_4x2()
        };
        let table = ImportanceTable::from_raw(&[0.1, 0.4, 0.2, 0.3]).unwrap();
        let req = Request::new(4, 1024).unwrap();
        let mask = RetentionMask::from_bits(vec![true, false, true, true]).unwrap();
        let norms = StateNorms {
            max_batch: 16,
            max_seq: 4096,
        };
        // params: (2048 + 1024 * 2 + 1536 * 2) * 2 = 14_336 bytes
        // kv per token per layer: 2 * 2 * 8 * 2 = 64; full = 2 * 64 * 4096 = 524_288
        let full_peak = 14_336 + 524_288;
        assert_eq!(
            peak_memory(&spec, &RetentionMask::full(2), req).unwrap(),
            full_peak
        );
        let footprint = peak_memory(&spec, &mask, req).unwrap();
        assert_eq!(footprint, full_peak - 1536 * 2);
        let sys = SystemState {
            mem_budget: 300_000,
            mem_footprint: footprint,
        };
        let s = encode_state(req, &mask, &table, sys, &norms, full_peak);
        let want = [
            0.25,
            0.25,
            0.3,
            0.1 + 0.2,
            300_000.0 / 538_624.0,
            535_552.0 / 538_624.0,
        ];
        for (g, w) in s.0.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{:?}", s.0);
        }

        let full = encode_state(req, &RetentionMask::full(2), &table, sys, &norms, full_peak);
        assert!((full.0[2] - 0.7).abs() < 1e-12);
        assert!((full.0[3] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn invalid_fraction_rejected() {
        let spec = ModelSpec::toy_4x2();
        let tables = toy_tables(&spec);
        let mut env = PruningEnv::new(&spec, &tables, RewardParams::default(), StateNorms::default()).unwrap();
        assert!(env.reset(Request::new(1, 1).unwrap(), 0.0).is_err());
        assert!(env.reset(Request::new(1, 1).unwrap(), 1.5).is_err());
    }

    proptest! {
        #[test]
        fn random_episodes_hold_invariants(
            seed in 0u64..10_000,
            batch in 1u32..=16,
            seq in 1u32..=8192,
            fraction in 0.05f64..=1.0,
            alpha in 0.0f64..2.0,
            beta in 0.01f64..1.0,
        ) {
            let spec = ModelSpec::toy_4x2();
            let tables = toy_tables(&spec);
            let p = RewardParams::new(alpha, beta);
            let req = Request::new(batch, seq).unwrap();
            let mut env = PruningEnv::new(&spec, &tables, p, StateNorms::default()).unwrap();
            let reset = env.reset(req, fraction).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ret = 0.0;
            let mut done = reset.done;
            let mut steps = 0;
            while !done {
                let legal = env.legal_actions();
                let a = *legal.choose(&mut rng).unwrap();
                let out = env.step(a).unwrap();
                prop_assert!(out.reward >= -p.alpha - p.infeasible_penalty.abs() - 1e-12);
                prop_assert!(out.reward <= p.beta + 1e-12);
                for v in out.next_state.0 {
                    prop_assert!(v.is_finite());
                }
                prop_assert!(out.next_state.0[5] <= 1.0);
                ret += out.reward;
                done = out.done;
                steps += 1;
            }
            prop_assert!(steps <= spec.n_blocks());
            let s = env.summary().unwrap();
            prop_assert_eq!(s.final_peak_bytes, peak_memory(&spec, &s.mask, req).unwrap());
            if s.feasible {
                prop_assert!(s.final_peak_bytes <= s.budget_bytes);
            }
            let full = reward_value(&spec, &RetentionMask::full(4), &tables, req, &p).unwrap();
            let penalty = if s.feasible { 0.0 } else { p.infeasible_penalty };
            prop_assert!((s.final_reward - full + penalty - s.episode_return).abs() < 1e-9);
            if !reset.done {
                prop_assert!((ret - s.episode_return).abs() < 1e-9);
            }
            let v = reward_value(&spec, &s.mask, &tables, req, &p).unwrap();
            prop_assert!(v >= -p.beta - 1e-12 && v <= p.alpha + 1e-12);
        }
    }
}
