//! Table-driven perplexity oracle.
//!
//! The log-perplexity of a pruned configuration is the dense model's
//! log-perplexity plus a unary cost per pruned block plus a pair cost for
//! every coupled pair whose blocks are *both* pruned. Pair terms are what
//! make one-shot scoring and sequential (greedy) scoring disagree.
//!
//! Costs are looked up per sequence-length bucket. With thresholds
//! `[512, 2048]` the buckets are `seq <= 512`, `512 < seq <= 2048`, and
//! `seq > 2048`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::memory::{BlockId, BlockKind, ModelSpec, RetentionMask};

/// Anything that can score a retention mask at a sequence length.
pub trait PerplexityOracle {
    fn n_blocks(&self) -> usize;

    /// Sequence-length bucket thresholds; empty means a single bucket.
    fn bucket_thresholds(&self) -> &[u32];

    fn log_perplexity(&self, mask: &RetentionMask, seq_len: u32) -> Result<f64>;

    fn evaluate(&self, mask: &RetentionMask, seq_len: u32) -> Result<f64> {
        Ok(self.log_perplexity(mask, seq_len)?.exp())
    }

    fn n_buckets(&self) -> usize {
        self.bucket_thresholds().len() + 1
    }

    fn bucket_of(&self, seq_len: u32) -> usize {
        bucket_index(self.bucket_thresholds(), seq_len)
    }
}

pub fn bucket_index(thresholds: &[u32], seq_len: u32) -> usize {
    thresholds.iter().filter(|&&t| seq_len > t).count()
}

/// Smallest sequence length that falls in bucket `bucket`.
pub fn bucket_representative(thresholds: &[u32], bucket: usize) -> u32 {
    if bucket == 0 {
        1
    } else {
        thresholds[bucket - 1] + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairCost {
    /// Canonical order: `first < second`.
    pub first: BlockId,
    pub second: BlockId,
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    n_layers: u32,
    base_log_ppl: f64,
    thresholds: Vec<u32>,
    /// `unary[block][bucket]`
    unary: Vec<Vec<f64>>,
    pairs: Vec<PairCost>,
}

impl SurrogateModel {
    /// Validates and canonicalizes. Pair endpoints are swapped into
    /// canonical order; a pair listed twice is rejected.
    pub fn new(
        n_layers: u32,
        base_log_ppl: f64,
        thresholds: Vec<u32>,
        unary: Vec<Vec<f64>>,
        pairs: Vec<PairCost>,
    ) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::Config("surrogate needs at least one layer".into()));
        }
        if !base_log_ppl.is_finite() {
            return Err(Error::Config("base_log_ppl must be finite".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "bucket thresholds must be strictly increasing".into(),
            ));
        }
        let n_blocks = 2 * n_layers as usize;
        let n_buckets = thresholds.len() + 1;
        if unary.len() != n_blocks {
            return Err(Error::Dimension {
                expected: n_blocks,
                got: unary.len(),
            });
        }
        for (i, row) in unary.iter().enumerate() {
            let block = BlockId::from_index(i);
            if row.len() != n_buckets {
                return Err(Error::Config(format!(
                    "block {block}: expected {n_buckets} bucket costs, got {}",
                    row.len()
                )));
            }
            if let Some((b, c)) = row
                .iter()
                .enumerate()
                .find(|(_, c)| !c.is_finite() || **c < 0.0)
            {
                return Err(Error::Config(format!(
                    "block {block} bucket {b}: unary cost must be finite and >= 0 (got {c})"
                )));
            }
        }
        let mut seen = BTreeMap::new();
        let mut canonical = Vec::with_capacity(pairs.len());
        for mut pair in pairs {
            if pair.first > pair.second {
                std::mem::swap(&mut pair.first, &mut pair.second);
            }
            for block in [pair.first, pair.second] {
                if block.index() >= n_blocks {
                    return Err(Error::Config(format!(
                        "pair references unknown block {block}"
                    )));
                }
            }
            if pair.first == pair.second {
                return Err(Error::Config(format!(
                    "pair couples block {} with itself",
                    pair.first
                )));
            }
            if pair.costs.len() != n_buckets {
                return Err(Error::Config(format!(
                    "pair ({}, {}): expected {n_buckets} bucket costs, got {}",
                    pair.first,
                    pair.second,
                    pair.costs.len()
                )));
            }
            if pair.costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(Error::Config(format!(
                    "pair ({}, {}): pair cost must be finite and >= 0",
                    pair.first, pair.second
                )));
            }
            if seen.insert((pair.first, pair.second), ()).is_some() {
                return Err(Error::Config(format!(
                    "duplicate pair ({}, {})",
                    pair.first, pair.second
                )));
            }
            canonical.push(pair);
        }
        canonical.sort_by_key(|p| (p.first, p.second));
        Ok(Self {
            n_layers,
            base_log_ppl,
            thresholds,
            unary,
            pairs: canonical,
        })
    }

    /// Purely additive model with a single bucket; handy in tests.
    pub fn additive(base_log_ppl: f64, costs: &[f64]) -> Result<Self> {
        if costs.len() % 2 != 0 {
            return Err(Error::Config("block count must be even".into()));
        }
        Self::new(
            (costs.len() / 2) as u32,
            base_log_ppl,
            Vec::new(),
            costs.iter().map(|&c| vec![c]).collect(),
            Vec::new(),
        )
    }

    pub fn n_layers(&self) -> u32 {
        self.n_layers
    }

    pub fn base_log_ppl(&self) -> f64 {
        self.base_log_ppl
    }

    pub fn unary_cost(&self, block: BlockId, bucket: usize) -> f64 {
        self.unary[block.index()][bucket]
    }

    pub fn pairs(&self) -> &[PairCost] {
        &self.pairs
    }

    pub fn is_additive(&self) -> bool {
        self.pairs
            .iter()
            .all(|p| p.costs.iter().all(|&c| c == 0.0))
    }

    /// Serializes to the line-oriented config format.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        out.push_str("# surrogate perplexity model\n");
        out.push_str("# SYNTHETIC VALUES: generated costs, not measurements of any real model.\n");
        let _ = writeln!(out, "blocks {}", 2 * self.n_layers);
        out.push_str("buckets");
        for t in &self.thresholds {
            let _ = write!(out, " {t}");
        }
        out.push('\n');
        let _ = writeln!(out, "base_log_ppl {}", self.base_log_ppl);
        out.push_str("# layer kind bucket cost\n");
        for (i, row) in self.unary.iter().enumerate() {
            let block = BlockId::from_index(i);
            for (b, c) in row.iter().enumerate() {
                let _ = writeln!(out, "{} {} {b} {c}", block.layer, block.kind);
            }
        }
        out.push_str("# layerA kindA layerB kindB bucket cost\n");
        for p in &self.pairs {
            for (b, c) in p.costs.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{} {} {} {} {b} {c}",
                    p.first.layer, p.first.kind, p.second.layer, p.second.kind
                );
            }
        }
        out
    }

    /// Hex digest of the canonical serialization; stamps importance caches.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_config_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        parse_config(text, origin)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_config_string())?;
        Ok(())
    }
}

/// Reads and validates a surrogate config file.
pub fn load_surrogate(path: impl AsRef<Path>) -> Result<SurrogateModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, &path.display().to_string())
}

fn parse_config(text: &str, origin: &str) -> Result<SurrogateModel> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut n_blocks: Option<usize> = None;
    let mut thresholds: Option<Vec<u32>> = None;
    let mut base: Option<f64> = None;
    let mut unary_rows: Vec<(usize, BlockId, usize, f64)> = Vec::new();
    let mut pair_rows: Vec<(usize, BlockId, BlockId, usize, f64)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| err(lineno, format!("expected a number, got `{s}`")))
        };
        let int = |s: &str| -> Result<u32> {
            s.parse::<u32>()
                .map_err(|_| err(lineno, format!("expected an integer, got `{s}`")))
        };
        let kind = |s: &str| -> Result<BlockKind> {
            BlockKind::parse(s).ok_or_else(|| err(lineno, format!("unknown block kind `{s}`")))
        };
        match toks[0] {
            "blocks" if toks.len() == 2 => n_blocks = Some(int(toks[1])? as usize),
            "buckets" => {
                thresholds = Some(toks[1..].iter().map(|t| int(t)).collect::<Result<_>>()?)
            }
            "base_log_ppl" if toks.len() == 2 => base = Some(num(toks[1])?),
            _ if toks.len() == 4 => unary_rows.push((
                lineno,
                BlockId::new(int(toks[0])?, kind(toks[1])?),
                int(toks[2])? as usize,
                num(toks[3])?,
            )),
            _ if toks.len() == 6 => pair_rows.push((
                lineno,
                BlockId::new(int(toks[0])?, kind(toks[1])?),
                BlockId::new(int(toks[2])?, kind(toks[3])?),
                int(toks[4])? as usize,
                num(toks[5])?,
            )),
            _ => return Err(err(lineno, format!("unrecognized line `{line}`"))),
        }
    }

    let n_blocks = n_blocks.ok_or_else(|| err(0, "missing `blocks` header".into()))?;
    if n_blocks == 0 || n_blocks % 2 != 0 {
        return Err(err(0, format!("block count must be even and > 0 (got {n_blocks})")));
    }
    let thresholds = thresholds.unwrap_or_default();
    let base = base.ok_or_else(|| err(0, "missing `base_log_ppl` header".into()))?;
    let n_buckets = thresholds.len() + 1;

    let mut unary: Vec<Vec<Option<f64>>> = vec![vec![None; n_buckets]; n_blocks];
    for (lineno, block, bucket, cost) in unary_rows {
        if block.index() >= n_blocks {
            return Err(err(lineno, format!("unknown block {block}")));
        }
        if bucket >= n_buckets {
            return Err(err(lineno, format!("bucket {bucket} out of range")));
        }
        if cost < 0.0 || !cost.is_finite() {
            return Err(err(
                lineno,
                format!("block {block}: unary cost must be finite and >= 0 (got {cost})"),
            ));
        }
        if unary[block.index()][bucket].replace(cost).is_some() {
            return Err(err(lineno, format!("duplicate cost for block {block} bucket {bucket}")));
        }
    }
    let unary = unary
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            row.into_iter()
                .enumerate()
                .map(|(b, c)| {
                    c.ok_or_else(|| {
                        err(0, format!("block {} bucket {b}: missing unary cost", BlockId::from_index(i)))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut pairs: BTreeMap<(BlockId, BlockId), Vec<Option<f64>>> = BTreeMap::new();
    for (lineno, a, b, bucket, cost) in pair_rows {
        if a.index() >= n_blocks || b.index() >= n_blocks {
            return Err(err(lineno, format!("pair ({a}, {b}) references an unknown block")));
        }
        if bucket >= n_buckets {
            return Err(err(lineno, format!("bucket {bucket} out of range")));
        }
        let key = if a <= b { (a, b) } else { (b, a) };
        let slot = &mut pairs.entry(key).or_insert_with(|| vec![None; n_buckets])[bucket];
        if slot.replace(cost).is_some() {
            return Err(err(lineno, format!("duplicate pair ({a}, {b}) bucket {bucket}")));
        }
    }
    let pairs = pairs
        .into_iter()
        .map(|((first, second), costs)| PairCost {
            first,
            second,
            costs: costs.into_iter().map(|c| c.unwrap_or(0.0)).collect(),
        })
        .collect();

    SurrogateModel::new((n_blocks / 2) as u32, base, thresholds, unary, pairs)
}

impl PerplexityOracle for SurrogateModel {
    fn n_blocks(&self) -> usize {
        2 * self.n_layers as usize
    }

    fn bucket_thresholds(&self) -> &[u32] {
        &self.thresholds
    }

    fn log_perplexity(&self, mask: &RetentionMask, seq_len: u32) -> Result<f64> {
        if mask.len() != self.n_blocks() {
            return Err(Error::Dimension {
                expected: self.n_blocks(),
                got: mask.len(),
            });
        }
        if seq_len == 0 {
            return Err(Error::InvalidRequest("seq_len must be >= 1".into()));
        }
        let bucket = self.bucket_of(seq_len);
        let bits = mask.bits();
        let mut log_ppl = self.base_log_ppl;
        for (row, &kept) in self.unary.iter().zip(bits) {
            if !kept {
                log_ppl += row[bucket];
            }
        }
        for p in &self.pairs {
            if !bits[p.first.index()] && !bits[p.second.index()] {
                log_ppl += p.costs[bucket];
            }
        }
        Ok(log_ppl)
    }
}

/// Knobs for [`gen_surrogate`]. All generated values are synthetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateGenParams {
    pub base_ppl: f64,
    pub thresholds: Vec<u32>,
    pub mha_scale: f64,
    pub ffn_scale: f64,
    /// Extra cost multiplier reached at the first and last layer.
    pub edge_boost: f64,
    /// Half-width of the multiplicative noise band around each cost.
    pub noise: f64,
    /// Relative growth of MHA cost per bucket step.
    pub mha_len_growth: f64,
    /// Fraction of adjacent-layer same-kind pairs that receive a coupling.
    pub pair_fraction: f64,
    /// Mean coupling relative to the pair's mean unary cost.
    pub pair_scale: f64,
}

impl Default for SurrogateGenParams {
    fn default() -> Self {
        Self {
            base_ppl: 5.5,
            thresholds: vec![512, 2048],
            mha_scale: 0.04,
            ffn_scale: 0.06,
            edge_boost: 2.0,
            noise: 0.6,
            mha_len_growth: 0.5,
            pair_fraction: 0.4,
            pair_scale: 1.5,
        }
    }
}

impl SurrogateGenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("surrogate generator: {m}")));
        if !(self.base_ppl > 0.0) {
            return bad("base_ppl must be > 0");
        }
        if self.mha_scale < 0.0 || self.ffn_scale < 0.0 || self.edge_boost < 0.0 {
            return bad("scales must be >= 0");
        }
        if !(0.0..1.0).contains(&self.noise) {
            return bad("noise must lie in [0, 1)");
        }
        if self.mha_len_growth < 0.0 || self.pair_scale < 0.0 {
            return bad("growth and pair scale must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.pair_fraction) {
            return bad("pair_fraction must lie in [0, 1]");
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return bad("thresholds must be strictly increasing");
        }
        Ok(())
    }
}

/// Draws a synthetic surrogate shaped like measured block sensitivity:
/// U-shaped cost profile over depth, MHA cost rising with sequence length,
/// and couplings between same-kind blocks of adjacent layers.
pub fn gen_surrogate(
    spec: &ModelSpec,
    seed: u64,
    params: &SurrogateGenParams,
) -> Result<SurrogateModel> {
    spec.validate()?;
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_layers = spec.n_layers;
    let n_buckets = params.thresholds.len() + 1;

    let mut unary = Vec::with_capacity(spec.n_blocks());
    for block in spec.blocks() {
        let depth = if n_layers > 1 {
            block.layer as f64 / (n_layers - 1) as f64
        } else {
            0.0
        };
        let profile = 1.0 + params.edge_boost * (2.0 * depth - 1.0).powi(2);
        let jitter = 1.0 + rng.gen_range(-params.noise..=params.noise);
        let row = (0..n_buckets)
            .map(|b| match block.kind {
                BlockKind::Mha => {
                    params.mha_scale * profile * jitter * (1.0 + params.mha_len_growth * b as f64)
                }
                BlockKind::Ffn => params.ffn_scale * profile * jitter,
            })
            .collect::<Vec<_>>();
        unary.push(row);
    }

    let mut candidates = Vec::new();
    for layer in 0..n_layers.saturating_sub(1) {
        candidates.push((BlockId::mha(layer), BlockId::mha(layer + 1)));
        candidates.push((BlockId::ffn(layer), BlockId::ffn(layer + 1)));
    }
    let n_pairs = (params.pair_fraction * candidates.len() as f64).round() as usize;
    let mut chosen = sample(&mut rng, candidates.len(), n_pairs).into_vec();
    chosen.sort_unstable();
    let mut pairs = Vec::with_capacity(n_pairs);
    for idx in chosen {
        let (a, b) = candidates[idx];
        let strength = params.pair_scale * rng.gen_range(0.5..=1.5);
        let costs = (0..n_buckets)
            .map(|bucket| strength * 0.5 * (unary[a.index()][bucket] + unary[b.index()][bucket]))
            .collect();
        pairs.push(PairCost {
            first: a,
            second: b,
            costs,
        });
    }

    SurrogateModel::new(
        n_layers,
        params.base_ppl.ln(),
        params.thresholds.clone(),
        unary,
        pairs,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_coupled() -> SurrogateModel {
        // A = mha0 (0.2), B = ffn0 (0.3), coupled with d = 0.5
        SurrogateModel::new(
            1,
            10f64.ln(),
            Vec::new(),
            vec![vec![0.2], vec![0.3]],
            vec![PairCost {
                first: BlockId::ffn(0),
                second: BlockId::mha(0),
                costs: vec![0.5],
            }],
        )
        .unwrap()
    }

    #[test]
    fn full_mask_is_base() {
        let m = two_coupled();
        let ppl = m.evaluate(&RetentionMask::full(1), 100).unwrap();
        assert_eq!(ppl, 10f64.ln().exp());
    }

    #[test]
    fn single_and_pair_pruning() {
        let m = two_coupled();
        let a_only = RetentionMask::full(1).with_pruned(BlockId::mha(0));
        let ppl = m.evaluate(&a_only, 1).unwrap();
        assert!((ppl - 10.0 * 0.2f64.exp()).abs() < 1e-12);
        assert!((ppl - 12.214_027_581_601_698).abs() < 1e-9);

        let both = RetentionMask::empty(1);
        let ppl = m.evaluate(&both, 1).unwrap();
        assert!((ppl - 10.0 * 1f64.exp()).abs() < 1e-9);
        assert!((ppl - 27.182_818_284_590_45).abs() < 1e-9);
        assert!(ppl > 10.0 * 0.5f64.exp());
    }

    #[test]
    fn pairs_are_canonicalized() {
        let m = two_coupled();
        assert_eq!(m.pairs()[0].first, BlockId::mha(0));
        assert_eq!(m.pairs()[0].second, BlockId::ffn(0));
    }

    #[test]
    fn duplicate_pairs_rejected() {
        let pair = PairCost {
            first: BlockId::mha(0),
            second: BlockId::ffn(0),
            costs: vec![0.1],
        };
        let mut flipped = pair.clone();
        std::mem::swap(&mut flipped.first, &mut flipped.second);
        let err = SurrogateModel::new(1, 0.0, Vec::new(), vec![vec![0.1], vec![0.1]], vec![pair, flipped]);
        assert!(matches!(err, Err(Error::Config(m)) if m.contains("duplicate")));
    }

    #[test]
    fn negative_cost_names_block() {
        let text = "blocks 2\nbuckets\nbase_log_ppl 1.0\n0 mha 0 0.1\n0 ffn 0 -0.2\n";
        let err = SurrogateModel::parse(text, "inline").unwrap_err().to_string();
        assert!(err.contains("ffn0"), "{err}");
        assert!(err.contains(":5:"), "{err}");
    }

    #[test]
    fn unknown_block_rejected() {
        let text = "blocks 2\nbase_log_ppl 1.0\n0 mha 0 0.1\n0 ffn 0 0.2\n3 ffn 0 0.2\n";
        let err = SurrogateModel::parse(text, "inline").unwrap_err().to_string();
        assert!(err.contains("unknown block"), "{err}");
    }

    #[test]
    fn missing_cost_rejected() {
        let text = "blocks 2\nbase_log_ppl 1.0\n0 mha 0 0.1\n";
        assert!(SurrogateModel::parse(text, "inline").is_err());
    }

    #[test]
    fn empty_pair_list_is_additive() {
        let text = "blocks 2\nbase_log_ppl 1.0\n0 mha 0 0.1\n0 ffn 0 0.2\n";
        let m = SurrogateModel::parse(text, "inline").unwrap();
        assert!(m.is_additive());
        let lp = m.log_perplexity(&RetentionMask::empty(1), 9).unwrap();
        assert!((lp - 1.3).abs() < 1e-12);
    }

    #[test]
    fn config_roundtrip() {
        let m = gen_surrogate(&ModelSpec::toy_4x2(), 3, &SurrogateGenParams::default()).unwrap();
        let back = SurrogateModel::parse(&m.to_config_string(), "roundtrip").unwrap();
        assert_eq!(m, back);
        assert_eq!(m.checksum(), back.checksum());
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = ModelSpec::llama2_7b_like();
        let p = SurrogateGenParams::default();
        let a = gen_surrogate(&spec, 1, &p).unwrap();
        let b = gen_surrogate(&spec, 1, &p).unwrap();
        let c = gen_surrogate(&spec, 2, &p).unwrap();
        assert_eq!(a.to_config_string(), b.to_config_string());
        assert_ne!(a.to_config_string(), c.to_config_string());
    }

    #[test]
    fn generator_shape() {
        let spec = ModelSpec::llama2_7b_like();
        let p = SurrogateGenParams {
            noise: 0.0,
            ..Default::default()
        };
        let m = gen_surrogate(&spec, 5, &p).unwrap();
        // U-shaped over depth
        let mid = m.unary_cost(BlockId::ffn(16), 0);
        assert!(m.unary_cost(BlockId::ffn(0), 0) > mid);
        assert!(m.unary_cost(BlockId::ffn(31), 0) > mid);
        // MHA sensitivity grows with sequence length relative to FFN
        for layer in 0..32 {
            let mha = BlockId::mha(layer);
            let ffn = BlockId::ffn(layer);
            let r0 = m.unary_cost(mha, 0) / m.unary_cost(ffn, 0);
            let r2 = m.unary_cost(mha, 2) / m.unary_cost(ffn, 2);
            assert!(r2 > r0);
        }
        // 62 adjacent same-kind candidates at 40%
        assert_eq!(m.pairs().len(), 25);
    }

    #[test]
    fn buckets_select_by_threshold() {
        assert_eq!(bucket_index(&[512, 2048], 1), 0);
        assert_eq!(bucket_index(&[512, 2048], 512), 0);
        assert_eq!(bucket_index(&[512, 2048], 513), 1);
        assert_eq!(bucket_index(&[512, 2048], 2048), 1);
        assert_eq!(bucket_index(&[512, 2048], 2049), 2);
        for b in 0..3 {
            assert_eq!(bucket_index(&[512, 2048], bucket_representative(&[512, 2048], b)), b);
        }
    }

    #[test]
    fn bundled_default_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/default-64block.surrogate");
        let m = load_surrogate(path).unwrap();
        assert_eq!(m.n_blocks(), 64);
        assert_eq!(m.n_buckets(), 3);
        let text = std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("data/default-64block.surrogate"),
        )
        .unwrap();
        assert!(text.contains("SYNTHETIC"));
    }

    proptest! {
        #[test]
        fn pruning_more_never_lowers_perplexity(
            seed in 0u64..1000,
            bits in proptest::collection::vec(any::<bool>(), 16),
            extra in 0usize..16,
            seq in 1u32..5000,
        ) {
            let spec = ModelSpec { n_layers: 8, ..ModelSpec::toy_4x2() };
            let m = gen_surrogate(&spec, seed, &SurrogateGenParams::default()).unwrap();
            let mask = RetentionMask::from_bits(bits).unwrap();
            let smaller = mask.with_pruned(BlockId::from_index(extra));
            prop_assert!(m.log_perplexity(&smaller, seq).unwrap() >= m.log_perplexity(&mask, seq).unwrap());
        }

        #[test]
        fn constant_within_bucket(seed in 0u64..100, a in 1u32..=512, b in 1u32..=512) {
            let spec = ModelSpec::toy_4x2();
            let m = gen_surrogate(&spec, seed, &SurrogateGenParams::default()).unwrap();
            let mask = RetentionMask::from_bits(vec![true, false, false, true, true, false, true, false]).unwrap();
            prop_assert_eq!(m.log_perplexity(&mask, a).unwrap(), m.log_perplexity(&mask, b).unwrap());
        }
    }
}
