//! Policy checkpoint: a fixed little-endian header followed by the flat
//! parameter array.
//!
//! ```text
//! magic     8 bytes  "RAPQNET\0"
//! version   u32      1
//! state_dim u32
//! actions   u32
//! hidden    u32
//! seed      u64
//! cfg_hash  u64
//! n_params  u64
//! params    f64 x n_params   (w1, b1, w2, b2)
//! ```

use std::path::Path;

use super::network::QNetwork;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RAPQNET\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 4 + 8 * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub state_dim: u32,
    pub n_actions: u32,
    pub hidden: u32,
    pub seed: u64,
    pub config_hash: u64,
}

pub fn encode(net: &QNetwork, seed: u64, config_hash: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * net.n_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.in_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(net.out_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(net.hidden() as u32).to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&config_hash.to_le_bytes());
    out.extend_from_slice(&(net.n_params() as u64).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, QNetwork)> {
    let corrupt = |m: &str| Error::Config(format!("policy checkpoint: {m}"));
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(8);
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header = CheckpointHeader {
        state_dim: u32_at(12),
        n_actions: u32_at(16),
        hidden: u32_at(20),
        seed: u64_at(24),
        config_hash: u64_at(32),
    };
    let n_params = u64_at(40) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * n_params {
        return Err(corrupt(&format!(
            "expected {n_params} parameters, found {} bytes",
            body.len()
        )));
    }
    let flat: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let net = QNetwork::from_flat(
        header.state_dim as usize,
        header.hidden as usize,
        header.n_actions as usize,
        &flat,
    )?;
    Ok((header, net))
}

pub fn save(path: impl AsRef<Path>, net: &QNetwork, seed: u64, config_hash: u64) -> Result<()> {
    std::fs::write(path, encode(net, seed, config_hash))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(CheckpointHeader, QNetwork)> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: "policy checkpoint",
            path: path.to_path_buf(),
            step: "rap train",
        });
    }
    decode(&std::fs::read(path)?)
}
