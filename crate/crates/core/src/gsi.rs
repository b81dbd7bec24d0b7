//! Greedy sequential importance.
//!
//! Blocks are removed one at a time; at every step each remaining block is
//! scored by the perplexity of the model with that block additionally
//! removed, and the cheapest one goes. The per-step log-perplexity
//! increments become the perplexity importance table consumed by the
//! pruning environment.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::memory::{BlockId, BlockKind, ModelSpec, Request, RetentionMask};
use crate::surrogate::{bucket_index, bucket_representative, PerplexityOracle};

/// Importance increments below this are floored before normalization.
pub const IMPORTANCE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GsiConfig {
    /// Fraction of prunable parameter bytes to remove, in `[0, 1]`.
    pub target_prune_ratio: f64,
    /// Selects the oracle's sequence-length bucket.
    pub seq_len: u32,
}

impl GsiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target_prune_ratio) {
            return Err(Error::Config(format!(
                "target prune ratio must lie in [0, 1] (got {})",
                self.target_prune_ratio
            )));
        }
        if self.seq_len == 0 {
            return Err(Error::Config("seq_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GsiTrace {
    pub removed: Vec<BlockId>,
    /// Perplexity after each removal.
    pub ppl_after: Vec<f64>,
    pub start_ppl: f64,
    pub log_ppl_after: Vec<f64>,
    pub start_log_ppl: f64,
}

/// Pruned share of prunable parameter bytes.
pub fn prune_ratio(spec: &ModelSpec, mask: &RetentionMask) -> f64 {
    let total = spec.n_layers as u128 * (spec.mha_params as u128 + spec.ffn_params as u128);
    if total == 0 {
        return 0.0;
    }
    let pruned: u128 = mask
        .pruned()
        .map(|b| spec.block_params(b.kind) as u128)
        .sum();
    pruned as f64 / total as f64
}

fn check_oracle<O: PerplexityOracle + ?Sized>(oracle: &O, spec: &ModelSpec) -> Result<()> {
    if oracle.n_blocks() != spec.n_blocks() {
        return Err(Error::Dimension {
            expected: spec.n_blocks(),
            got: oracle.n_blocks(),
        });
    }
    Ok(())
}

/// Runs greedy sequential removal until the pruned parameter share reaches
/// the target. Ties go to the lowest block in canonical order.
pub fn gsi_run<O: PerplexityOracle + ?Sized>(
    oracle: &O,
    spec: &ModelSpec,
    cfg: &GsiConfig,
) -> Result<GsiTrace> {
    cfg.validate()?;
    spec.validate()?;
    check_oracle(oracle, spec)?;
    if cfg.target_prune_ratio > 0.0 && spec.mha_params == 0 && spec.ffn_params == 0 {
        return Err(Error::Degenerate(
            "nonzero prune ratio requested but the model has no prunable parameters".into(),
        ));
    }

    let mut mask = RetentionMask::full(spec.n_layers);
    let start_log_ppl = oracle.log_perplexity(&mask, cfg.seq_len)?;
    let mut trace = GsiTrace {
        removed: Vec::new(),
        ppl_after: Vec::new(),
        start_ppl: start_log_ppl.exp(),
        log_ppl_after: Vec::new(),
        start_log_ppl,
    };

    while prune_ratio(spec, &mask) < cfg.target_prune_ratio {
        let mut best: Option<(BlockId, f64)> = None;
        for candidate in mask.retained() {
            let score = oracle.log_perplexity(&mask.with_pruned(candidate), cfg.seq_len)?;
            if !score.is_finite() {
                return Err(Error::NonFinite(format!(
                    "oracle returned {score} for candidate {candidate}"
                )));
            }
            if best.map_or(true, |(_, s)| score < s) {
                best = Some((candidate, score));
            }
        }
        // Blocks can only run out when every prunable block has zero size.
        let Some((block, log_ppl)) = best else { break };
        mask.prune(block);
        trace.removed.push(block);
        trace.log_ppl_after.push(log_ppl);
        trace.ppl_after.push(log_ppl.exp());
    }
    Ok(trace)
}

/// Blocks ordered by the perplexity of removing each one alone from the
/// dense model, ascending (stable, so ties keep canonical order).
pub fn one_shot_rank<O: PerplexityOracle + ?Sized>(
    oracle: &O,
    spec: &ModelSpec,
    seq_len: u32,
) -> Result<Vec<BlockId>> {
    check_oracle(oracle, spec)?;
    let full = RetentionMask::full(spec.n_layers);
    let mut scored = spec
        .blocks()
        .map(|b| Ok((b, oracle.log_perplexity(&full.with_pruned(b), seq_len)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(scored.into_iter().map(|(b, _)| b).collect())
}

/// Normalized perplexity importance for one bucket from a complete trace.
///
/// Each block's raw score is the log-perplexity increase observed at the
/// step where it was removed, floored at [`IMPORTANCE_FLOOR`].
pub fn importance_from_trace(trace: &GsiTrace, spec: &ModelSpec) -> Result<Vec<f64>> {
    let n = spec.n_blocks();
    if trace.removed.len() != n || trace.log_ppl_after.len() != n {
        return Err(Error::Coverage(format!(
            "trace removes {} of {n} blocks; build importance with prune ratio 1",
            trace.removed.len()
        )));
    }
    let mut raw = vec![None; n];
    let mut prev = trace.start_log_ppl;
    for (&block, &lp) in trace.removed.iter().zip(&trace.log_ppl_after) {
        let slot = raw.get_mut(block.index()).ok_or_else(|| {
            Error::Coverage(format!("trace references unknown block {block}"))
        })?;
        if slot.replace((lp - prev).max(IMPORTANCE_FLOOR)).is_some() {
            return Err(Error::Coverage(format!("block {block} removed twice")));
        }
        prev = lp;
    }
    let raw: Vec<f64> = raw.into_iter().map(|v| v.expect("n distinct blocks")).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Bytes attributable to one block for a request: its parameters, plus for
/// MHA the layer's K/V share.
pub fn memory_importance(spec: &ModelSpec, req: Request, block: BlockId) -> Result<u64> {
    let params = spec.block_params(block.kind) as u128 * spec.bytes_per_element as u128;
    let kv = match block.kind {
        BlockKind::Mha => spec.kv_bytes_per_token_per_layer() * req.tokens() as u128,
        BlockKind::Ffn => 0,
    };
    u64::try_from(params + kv).map_err(|_| Error::Overflow("block memory importance"))
}

/// Per-bucket perplexity importance for every block.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    thresholds: Vec<u32>,
    /// `i_ppl[bucket][block]`, each row summing to 1.
    i_ppl: Vec<Vec<f64>>,
    surrogate_checksum: String,
}

impl ImportanceTable {
    pub fn new(thresholds: Vec<u32>, i_ppl: Vec<Vec<f64>>, surrogate_checksum: String) -> Result<Self> {
        if i_ppl.len() != thresholds.len() + 1 {
            return Err(Error::Config(format!(
                "importance table has {} buckets but {} thresholds",
                i_ppl.len(),
                thresholds.len()
            )));
        }
        let n = i_ppl.first().map_or(0, Vec::len);
        if n == 0 || n % 2 != 0 {
            return Err(Error::Config(format!("invalid block count {n}")));
        }
        for (b, row) in i_ppl.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!("bucket {b}: importance must be >= 0")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "bucket {b}: importance sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self {
            thresholds,
            i_ppl,
            surrogate_checksum,
        })
    }

    /// A single-bucket table; the values are normalized here.
    pub fn from_raw(values: &[f64]) -> Result<Self> {
        let total: f64 = values.iter().sum();
        Self::new(
            Vec::new(),
            vec![values.iter().map(|v| v / total).collect()],
            String::new(),
        )
    }

    pub fn n_blocks(&self) -> usize {
        self.i_ppl[0].len()
    }

    pub fn n_buckets(&self) -> usize {
        self.i_ppl.len()
    }

    pub fn thresholds(&self) -> &[u32] {
        &self.thresholds
    }

    pub fn surrogate_checksum(&self) -> &str {
        &self.surrogate_checksum
    }

    pub fn bucket_of(&self, seq_len: u32) -> usize {
        bucket_index(&self.thresholds, seq_len)
    }

    pub fn row(&self, bucket: usize) -> &[f64] {
        &self.i_ppl[bucket]
    }

    pub fn get(&self, block: BlockId, bucket: usize) -> f64 {
        self.i_ppl[bucket][block.index()]
    }

    pub fn to_cache_string(&self, model_name: &str) -> String {
        let mut out = String::new();
        out.push_str("# importance-cache v1\n");
        let _ = writeln!(out, "# surrogate_checksum={}", self.surrogate_checksum);
        let _ = writeln!(out, "# model={model_name}");
        let thresholds: Vec<String> = self.thresholds.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "# buckets={}", thresholds.join(" "));
        out.push_str("layer,kind,bucket,i_ppl\n");
        for (bucket, row) in self.i_ppl.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                let block = BlockId::from_index(i);
                let _ = writeln!(out, "{},{},{bucket},{v}", block.layer, block.kind);
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>, model_name: &str) -> Result<()> {
        std::fs::write(path, self.to_cache_string(model_name))?;
        Ok(())
    }

    /// Loads a cache file. When `expected_checksum` is given, a cache built
    /// from a different surrogate is rejected as stale.
    pub fn load(path: impl AsRef<Path>, expected_checksum: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact {
                what: "importance cache",
                path: path.to_path_buf(),
                step: "rap gsi-build",
            });
        }
        let origin = path.display().to_string();
        let reader = BufReader::new(std::fs::File::open(path)?);
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.clone(),
            line,
            msg,
        };
        let mut checksum = None;
        let mut thresholds = None;
        let mut rows: Vec<(usize, usize, usize, f64)> = Vec::new();
        let mut header_seen = false;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let meta = meta.trim();
                if let Some(v) = meta.strip_prefix("surrogate_checksum=") {
                    checksum = Some(v.to_string());
                } else if let Some(v) = meta.strip_prefix("buckets=") {
                    thresholds = Some(
                        v.split_whitespace()
                            .map(|t| t.parse::<u32>().map_err(|e| err(lineno, e.to_string())))
                            .collect::<Result<Vec<_>>>()?,
                    );
                }
                continue;
            }
            if !header_seen {
                if line != "layer,kind,bucket,i_ppl" {
                    return Err(err(lineno, format!("unexpected header `{line}`")));
                }
                header_seen = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(err(lineno, "expected 4 fields".into()));
            }
            let layer: u32 = fields[0].parse().map_err(|_| err(lineno, "bad layer".into()))?;
            let kind = BlockKind::parse(fields[1]).ok_or_else(|| err(lineno, "bad kind".into()))?;
            let bucket: usize = fields[2].parse().map_err(|_| err(lineno, "bad bucket".into()))?;
            let value: f64 = fields[3].parse().map_err(|_| err(lineno, "bad i_ppl".into()))?;
            rows.push((lineno, BlockId::new(layer, kind).index(), bucket, value));
        }
        let checksum = checksum.ok_or_else(|| err(0, "missing surrogate_checksum".into()))?;
        if let Some(expected) = expected_checksum {
            if expected != checksum {
                return Err(Error::Stale {
                    what: "importance cache",
                    msg: format!(
                        "{origin} was built from surrogate {checksum}, current surrogate is {expected}; rerun `rap gsi-build`"
                    ),
                });
            }
        }
        let thresholds = thresholds.ok_or_else(|| err(0, "missing buckets".into()))?;
        let n_buckets = thresholds.len() + 1;
        let n_blocks = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let n_blocks = n_blocks + n_blocks % 2;
        let mut table = vec![vec![None; n_blocks]; n_buckets];
        for (lineno, block, bucket, value) in rows {
            if bucket >= n_buckets {
                return Err(err(lineno, format!("bucket {bucket} out of range")));
            }
            if table[bucket][block].replace(value).is_some() {
                return Err(err(lineno, "duplicate row".into()));
            }
        }
        let i_ppl = table
            .into_iter()
            .enumerate()
            .map(|(b, row)| {
                row.into_iter()
                    .enumerate()
                    .map(|(i, v)| {
                        v.ok_or_else(|| {
                            Error::Coverage(format!(
                                "{origin}: no entry for block {} bucket {b}",
                                BlockId::from_index(i)
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(thresholds, i_ppl, checksum)
    }
}

/// Runs a full GSI pass per bucket and assembles the importance table.
pub fn build_importance_table<O: PerplexityOracle + ?Sized>(
    oracle: &O,
    spec: &ModelSpec,
    surrogate_checksum: &str,
) -> Result<(ImportanceTable, Vec<GsiTrace>)> {
    let thresholds = oracle.bucket_thresholds().to_vec();
    let mut rows = Vec::with_capacity(thresholds.len() + 1);
    let mut traces = Vec::with_capacity(thresholds.len() + 1);
    for bucket in 0..=thresholds.len() {
        let cfg = GsiConfig {
            target_prune_ratio: 1.0,
            seq_len: bucket_representative(&thresholds, bucket),
        };
        let trace = gsi_run(oracle, spec, &cfg)?;
        rows.push(importance_from_trace(&trace, spec)?);
        traces.push(trace);
    }
    Ok((
        ImportanceTable::new(thresholds, rows, surrogate_checksum.to_string())?,
        traces,
    ))
}
