use crate::env::{PruningEnv, RewardParams, StateNorms};
use crate::error::{Error, Result};
use crate::gsi::{build_importance_table, gsi_run, one_shot_rank, GsiConfig, ImportanceTable};
use crate::memory::{BlockId, ModelSpec};
use crate::surrogate::{bucket_representative, PerplexityOracle, SurrogateModel};

/// Everything an experiment needs besides the trace and the policy: the
/// model, its surrogate, the importance cache, and the static removal
/// orders used by the baseline policies.
#[derive(Debug, Clone)]
pub struct Setup {
    pub spec: ModelSpec,
    pub oracle: SurrogateModel,
    pub tables: ImportanceTable,
    pub params: RewardParams,
    pub norms: StateNorms,
    gsi_orders: Vec<Vec<BlockId>>,
    one_shot_orders: Vec<Vec<BlockId>>,
}

impl Setup {
    /// Builds the importance table from the surrogate.
    pub fn build(
        spec: ModelSpec,
        oracle: SurrogateModel,
        params: RewardParams,
        norms: StateNorms,
    ) -> Result<Self> {
        let (tables, _) = build_importance_table(&oracle, &spec, &oracle.checksum())?;
        Self::new(spec, oracle, tables, params, norms)
    }

    /// Uses a previously built table, which must come from this surrogate.
    pub fn new(
        spec: ModelSpec,
        oracle: SurrogateModel,
        tables: ImportanceTable,
        params: RewardParams,
        norms: StateNorms,
    ) -> Result<Self> {
        spec.validate()?;
        params.validate()?;
        if oracle.n_blocks() != spec.n_blocks() {
            return Err(Error::Dimension {
                expected: spec.n_blocks(),
                got: oracle.n_blocks(),
            });
        }
        if tables.surrogate_checksum() != oracle.checksum() {
            return Err(Error::Stale {
                what: "importance cache",
                msg: format!(
                    "built for surrogate {}, current surrogate is {}; rerun `rap gsi-build`",
                    tables.surrogate_checksum(),
                    oracle.checksum()
                ),
            });
        }
        if tables.thresholds() != oracle.bucket_thresholds() {
            return Err(Error::Stale {
                what: "importance cache",
                msg: "bucket thresholds differ from the surrogate's".into(),
            });
        }
        let mut gsi_orders = Vec::new();
        let mut one_shot_orders = Vec::new();
        for bucket in 0..oracle.n_buckets() {
            let seq_len = bucket_representative(oracle.bucket_thresholds(), bucket);
            let cfg = GsiConfig {
                target_prune_ratio: 1.0,
                seq_len,
            };
            gsi_orders.push(gsi_run(&oracle, &spec, &cfg)?.removed);
            one_shot_orders.push(one_shot_rank(&oracle, &spec, seq_len)?);
        }
        Ok(Self {
            spec,
            oracle,
            tables,
            params,
            norms,
            gsi_orders,
            one_shot_orders,
        })
    }

    pub fn with_params(&self, params: RewardParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            ..self.clone()
        })
    }

    pub fn bucket_of(&self, seq_len: u32) -> usize {
        self.oracle.bucket_of(seq_len)
    }

    pub fn gsi_order(&self, seq_len: u32) -> &[BlockId] {
        &self.gsi_orders[self.bucket_of(seq_len)]
    }

    pub fn one_shot_order(&self, seq_len: u32) -> &[BlockId] {
        &self.one_shot_orders[self.bucket_of(seq_len)]
    }

    pub fn env(&self) -> Result<PruningEnv<'_>> {
        PruningEnv::new(&self.spec, &self.tables, self.params, self.norms)
    }
}
