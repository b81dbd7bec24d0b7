//! Byte-exact accounting of parameter and KV-cache memory.
//!
//! Every quantity here is an integer byte count. Products are formed in
//! `u128` and narrowed back to `u64`, so an oversized request surfaces as
//! [`Error::Overflow`] instead of wrapping.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GIB: u64 = 1 << 30;
pub const GB: u64 = 1_000_000_000;

/// Architecture constants that drive all memory math.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub n_layers: u32,
    pub n_heads: u32,
    pub d_head: u32,
    /// Bytes per stored element (2 for half precision).
    pub bytes_per_element: u32,
    pub mha_params: u64,
    pub ffn_params: u64,
    /// Embeddings, norms and head; never prunable.
    pub other_params: u64,
    /// Constant extra bytes added to every peak figure. Zero reproduces the
    /// parameters-plus-KV budget exactly.
    #[serde(default)]
    pub overhead_bytes: u64,
}

impl ModelSpec {
    /// 32 layers, 32 heads of width 128, fp16; parameter counts of the 7B
    /// Llama-2 checkpoint (6,738,415,616 in total).
    pub fn llama2_7b_like() -> Self {
        let d_model: u64 = 4096;
        let d_ff: u64 = 11008;
        let vocab: u64 = 32000;
        let n_layers = 32u64;
        Self {
            name: "llama2-7b-like".into(),
            n_layers: n_layers as u32,
            n_heads: 32,
            d_head: 128,
            bytes_per_element: 2,
            mha_params: 4 * d_model * d_model,
            ffn_params: 3 * d_model * d_ff,
            // token embedding + lm head + two norms per layer + final norm
            other_params: 2 * vocab * d_model + (2 * n_layers + 1) * d_model,
            overhead_bytes: 0,
        }
    }

    /// Tiny 4-layer model used throughout the tests.
    pub fn toy_4x2() -> Self {
        Self {
            name: "toy-4x2".into(),
            n_layers: 4,
            n_heads: 2,
            d_head: 8,
            bytes_per_element: 2,
            mha_params: 1024,
            ffn_params: 1536,
            other_params: 2048,
            overhead_bytes: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "llama2-7b-like" => Some(Self::llama2_7b_like()),
            "toy-4x2" => Some(Self::toy_4x2()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 {
            return Err(Error::Config(format!(
                "model `{}`: n_layers, n_heads and d_head must all be >= 1",
                self.name
            )));
        }
        if !matches!(self.bytes_per_element, 1 | 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "model `{}`: bytes_per_element must be one of 1, 2, 4, 8 (got {})",
                self.name, self.bytes_per_element
            )));
        }
        self.total_params()?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("model spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    /// Number of prunable blocks (one MHA and one FFN per layer).
    pub fn n_blocks(&self) -> usize {
        2 * self.n_layers as usize
    }

    pub fn total_params(&self) -> Result<u64> {
        let per_layer = self.mha_params as u128 + self.ffn_params as u128;
        narrow(
            self.other_params as u128 + self.n_layers as u128 * per_layer,
            "total parameter count",
        )
    }

    pub fn block_params(&self, kind: BlockKind) -> u64 {
        match kind {
            BlockKind::Mha => self.mha_params,
            BlockKind::Ffn => self.ffn_params,
        }
    }

    /// K and V bytes one token contributes to one retained attention layer.
    pub fn kv_bytes_per_token_per_layer(&self) -> u128 {
        2 * self.n_heads as u128 * self.d_head as u128 * self.bytes_per_element as u128
    }

    /// Prunable parameter bytes of the full model.
    pub fn prunable_param_bytes(&self) -> Result<u64> {
        let per_layer = self.mha_params as u128 + self.ffn_params as u128;
        narrow(
            self.n_layers as u128 * per_layer * self.bytes_per_element as u128,
            "prunable parameter bytes",
        )
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> {
        (0..self.n_blocks()).map(BlockId::from_index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Mha,
    Ffn,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Mha => "mha",
            BlockKind::Ffn => "ffn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mha" => Some(BlockKind::Mha),
            "ffn" => Some(BlockKind::Ffn),
            _ => None,
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One prunable block. Ordering is the canonical one: layer ascending,
/// MHA before FFN; it is also the tie-break order everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId {
    pub layer: u32,
    pub kind: BlockKind,
}

impl BlockId {
    pub fn new(layer: u32, kind: BlockKind) -> Self {
        Self { layer, kind }
    }

    pub fn mha(layer: u32) -> Self {
        Self::new(layer, BlockKind::Mha)
    }

    pub fn ffn(layer: u32) -> Self {
        Self::new(layer, BlockKind::Ffn)
    }

    /// Position in the canonical order, also the DQN action index.
    pub fn index(self) -> usize {
        2 * self.layer as usize
            + match self.kind {
                BlockKind::Mha => 0,
                BlockKind::Ffn => 1,
            }
    }

    pub fn from_index(index: usize) -> Self {
        let kind = if index % 2 == 0 {
            BlockKind::Mha
        } else {
            BlockKind::Ffn
        };
        Self::new((index / 2) as u32, kind)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.kind, self.layer)
    }
}

/// Retain/prune bit per block, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RetentionMask {
    retained: Vec<bool>,
}

impl RetentionMask {
    pub fn full(n_layers: u32) -> Self {
        Self {
            retained: vec![true; 2 * n_layers as usize],
        }
    }

    pub fn empty(n_layers: u32) -> Self {
        Self {
            retained: vec![false; 2 * n_layers as usize],
        }
    }

    /// Builds a mask from raw bits; the length must be even.
    pub fn from_bits(retained: Vec<bool>) -> Result<Self> {
        if retained.len() % 2 != 0 {
            return Err(Error::Dimension {
                expected: retained.len() + 1,
                got: retained.len(),
            });
        }
        Ok(Self { retained })
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn n_layers(&self) -> u32 {
        (self.retained.len() / 2) as u32
    }

    pub fn bits(&self) -> &[bool] {
        &self.retained
    }

    pub fn is_retained(&self, block: BlockId) -> bool {
        self.retained.get(block.index()).copied().unwrap_or(false)
    }

    pub fn set(&mut self, block: BlockId, retained: bool) {
        self.retained[block.index()] = retained;
    }

    pub fn prune(&mut self, block: BlockId) {
        self.set(block, false);
    }

    pub fn with_pruned(&self, block: BlockId) -> Self {
        let mut next = self.clone();
        next.prune(block);
        next
    }

    pub fn retained(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.retained
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(i, _)| BlockId::from_index(i))
    }

    pub fn pruned(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.retained
            .iter()
            .enumerate()
            .filter(|(_, &r)| !r)
            .map(|(i, _)| BlockId::from_index(i))
    }

    pub fn count_retained(&self) -> usize {
        self.retained.iter().filter(|&&r| r).count()
    }

    pub fn count_retained_kind(&self, kind: BlockKind) -> usize {
        self.retained().filter(|b| b.kind == kind).count()
    }

    /// True when every block retained here is also retained in `other`.
    pub fn is_subset_of(&self, other: &RetentionMask) -> bool {
        self.len() == other.len()
            && self
                .retained
                .iter()
                .zip(&other.retained)
                .all(|(&a, &b)| !a || b)
    }

    pub(crate) fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.len() != spec.n_blocks() {
            return Err(Error::Dimension {
                expected: spec.n_blocks(),
                got: self.len(),
            });
        }
        Ok(())
    }
}

/// Runtime request shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Request {
    pub batch_size: u32,
    pub seq_len: u32,
}

impl Request {
    pub fn new(batch_size: u32, seq_len: u32) -> Result<Self> {
        let req = Self {
            batch_size,
            seq_len,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::InvalidRequest(format!(
                "batch_size and seq_len must be >= 1 (got {} x {})",
                self.batch_size, self.seq_len
            )));
        }
        Ok(())
    }

    pub fn tokens(&self) -> u64 {
        self.batch_size as u64 * self.seq_len as u64
    }
}

fn narrow(value: u128, what: &'static str) -> Result<u64> {
    u64::try_from(value).map_err(|_| Error::Overflow(what))
}

pub fn kv_bytes_per_token(spec: &ModelSpec, mask: &RetentionMask) -> Result<u64> {
    mask.check(spec)?;
    let layers = mask.count_retained_kind(BlockKind::Mha) as u128;
    narrow(
        layers * spec.kv_bytes_per_token_per_layer(),
        "KV bytes per token",
    )
}

pub fn kv_bytes_total(spec: &ModelSpec, mask: &RetentionMask, req: Request) -> Result<u64> {
    req.validate()?;
    let per_token = kv_bytes_per_token(spec, mask)? as u128;
    narrow(per_token * req.tokens() as u128, "total KV bytes")
}

pub fn param_bytes(spec: &ModelSpec, mask: &RetentionMask) -> Result<u64> {
    mask.check(spec)?;
    let retained: u128 = mask
        .retained()
        .map(|b| spec.block_params(b.kind) as u128)
        .sum();
    narrow(
        (spec.other_params as u128 + retained) * spec.bytes_per_element as u128,
        "parameter bytes",
    )
}

/// Parameters plus KV cache (plus the spec's constant overhead, zero by
/// default). This is the quantity every budget is compared against.
pub fn peak_memory(spec: &ModelSpec, mask: &RetentionMask, req: Request) -> Result<u64> {
    let total = param_bytes(spec, mask)? as u128
        + kv_bytes_total(spec, mask, req)? as u128
        + spec.overhead_bytes as u128;
    narrow(total, "peak memory")
}

/// Formats a byte count in both binary and decimal units.
pub fn describe_bytes(bytes: u64) -> String {
    format!(
        "{bytes} B ({:.3} GiB / {:.3} GB)",
        bytes as f64 / GIB as f64,
        bytes as f64 / GB as f64
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_two_layer() -> ModelSpec {
        ModelSpec {
            name: "toy-2".into(),
            n_layers: 2,
            n_heads: 1,
            d_head: 1,
            bytes_per_element: 2,
            mha_params: 100,
            ffn_params: 200,
            other_params: 50,
            overhead_bytes: 0,
        }
    }

    #[test]
    fn llama_kv_per_token() {
        let spec = ModelSpec::llama2_7b_like();
        let full = RetentionMask::full(32);
        assert_eq!(kv_bytes_per_token(&spec, &full).unwrap(), 524_288);

        let mut no_attn = full.clone();
        for l in 0..32 {
            no_attn.prune(BlockId::mha(l));
        }
        assert_eq!(kv_bytes_per_token(&spec, &no_attn).unwrap(), 0);

        let one_less = full.with_pruned(BlockId::mha(7));
        assert_eq!(kv_bytes_per_token(&spec, &one_less).unwrap(), 507_904);
    }

    #[test]
    fn llama_kv_total_is_32_gib() {
        let spec = ModelSpec::llama2_7b_like();
        let full = RetentionMask::full(32);
        let req = Request::new(16, 4096).unwrap();
        let kv = kv_bytes_total(&spec, &full, req).unwrap();
        assert_eq!(kv, 34_359_738_368);
        assert_eq!(kv, 32 * GIB);
    }

    #[test]
    fn unit_request_equals_per_token() {
        let spec = ModelSpec::llama2_7b_like();
        let mask = RetentionMask::full(32).with_pruned(BlockId::mha(3));
        let req = Request::new(1, 1).unwrap();
        assert_eq!(
            kv_bytes_total(&spec, &mask, req).unwrap(),
            kv_bytes_per_token(&spec, &mask).unwrap()
        );
    }

    #[test]
    fn toy_kv_total() {
        let spec = ModelSpec::toy_4x2();
        let req = Request::new(3, 5).unwrap();
        // 2 (K,V) * 4 layers * 2 heads * 8 dims * 2 bytes * 3 * 5
        assert_eq!(
            kv_bytes_total(&spec, &RetentionMask::full(4), req).unwrap(),
            3_840
        );
    }

    #[test]
    fn param_bytes_examples() {
        let llama = ModelSpec::llama2_7b_like();
        assert_eq!(llama.total_params().unwrap(), 6_738_415_616);
        assert_eq!(
            param_bytes(&llama, &RetentionMask::full(32)).unwrap(),
            13_476_831_232
        );

        let toy = toy_two_layer();
        assert_eq!(
            param_bytes(&toy, &RetentionMask::empty(2)).unwrap(),
            50 * 2
        );
        let mask = RetentionMask::full(2).with_pruned(BlockId::ffn(1));
        assert_eq!(param_bytes(&toy, &mask).unwrap(), 900);
    }

    #[test]
    fn peak_is_sum_of_parts() {
        let llama = ModelSpec::llama2_7b_like();
        let req = Request::new(16, 4096).unwrap();
        let full = RetentionMask::full(32);
        assert_eq!(
            peak_memory(&llama, &full, req).unwrap(),
            13_476_831_232 + 32 * GIB
        );

        let toy = ModelSpec::toy_4x2();
        let req = Request::new(3, 5).unwrap();
        // (2048 + 4 * (1024 + 1536)) * 2 = 24_576 parameter bytes
        assert_eq!(peak_memory(&toy, &RetentionMask::full(4), req).unwrap(), 24_576 + 3_840);
    }

    #[test]
    fn zero_batch_rejected() {
        let spec = ModelSpec::toy_4x2();
        let req = Request {
            batch_size: 0,
            seq_len: 5,
        };
        assert!(matches!(
            peak_memory(&spec, &RetentionMask::full(4), req),
            Err(Error::InvalidRequest(_))
        ));
    }

    #[test]
    fn mask_size_mismatch() {
        let spec = ModelSpec::toy_4x2();
        let err = kv_bytes_per_token(&spec, &RetentionMask::full(3)).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 8, got: 6 }));
        assert!(param_bytes(&spec, &RetentionMask::full(5)).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let mut spec = ModelSpec::llama2_7b_like();
        spec.n_heads = u32::MAX;
        spec.d_head = u32::MAX;
        let req = Request::new(u32::MAX, u32::MAX).unwrap();
        assert!(matches!(
            kv_bytes_total(&spec, &RetentionMask::full(32), req),
            Err(Error::Overflow(_))
        ));
    }

    #[test]
    fn block_index_roundtrip() {
        for i in 0..64 {
            assert_eq!(BlockId::from_index(i).index(), i);
        }
        assert!(BlockId::mha(0) < BlockId::ffn(0));
        assert!(BlockId::ffn(0) < BlockId::mha(1));
    }

    #[test]
    fn spec_validation() {
        let mut spec = ModelSpec::toy_4x2();
        spec.bytes_per_element = 3;
        assert!(spec.validate().is_err());
        spec.bytes_per_element = 2;
        spec.n_layers = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn toml_roundtrip() {
        let spec = ModelSpec::llama2_7b_like();
        let back = ModelSpec::from_toml_str(&spec.to_toml_string()).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn bundled_spec_files_match_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
        for name in ["llama2-7b-like", "toy-4x2"] {
            let loaded = ModelSpec::load(dir.join(format!("{name}.toml"))).unwrap();
            assert_eq!(loaded, ModelSpec::preset(name).unwrap());
        }
    }
}
