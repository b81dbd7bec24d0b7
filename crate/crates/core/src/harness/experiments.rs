use serde::{Deserialize, Serialize};

use super::policy::{check_network, rollout, Controller, PolicyKind, PruningTask};
use super::setup::Setup;
use crate::dqn::{train, CurvePoint, DqnConfig, QNetwork, TrainOutcome};
use crate::env::{RewardInputs, RewardParams};
use crate::error::{Error, Result};
use crate::memory::{peak_memory, RetentionMask};
use crate::surrogate::PerplexityOracle;
use crate::workload::TraceRecord;

/// Trains a DQN controller on `trace` (cycled as needed).
pub fn train_policy(setup: &Setup, trace: &[TraceRecord], cfg: &DqnConfig) -> Result<TrainOutcome> {
    let mut task = PruningTask::new(setup, trace)?;
    train(&mut task, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            alphas: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            betas: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub mean_reward: f64,
    pub retained_mem_frac: f64,
    pub mean_log_ppl: f64,
    pub mean_pruned: f64,
}

/// Static GSI policy under one reward setting: remove blocks in GSI order
/// until the request fits, then keep removing along the same order while
/// the next removal has positive reward.
fn gsi_reward_aware(setup: &Setup, rec: &TraceRecord) -> Result<(RetentionMask, f64)> {
    let mut env = setup.env()?;
    let mut ctrl = Controller::GsiStatic;
    let log = rollout(setup, &mut env, &mut ctrl, 0, rec)?;
    let req = rec.request()?;
    let mut mask = env.summary()?.mask;
    let inputs = RewardInputs::new(&setup.spec, &setup.tables, req)?;
    let mut value = inputs.value(&mask, &setup.params);
    if log.feasible {
        for &block in setup.gsi_order(req.seq_len) {
            if !mask.is_retained(block) {
                continue;
            }
            let next = mask.with_pruned(block);
            let next_value = inputs.value(&next, &setup.params);
            if next_value - value <= 0.0 {
                break;
            }
            mask = next;
            value = next_value;
        }
    }
    Ok((mask, value))
}

/// One GSI-static evaluation per `(alpha, beta)` grid point, rows ordered by
/// alpha then beta.
pub fn sweep_alpha_beta(setup: &Setup, trace: &[TraceRecord], grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(grid.alphas.len() * grid.betas.len());
    for &alpha in &grid.alphas {
        for &beta in &grid.betas {
            let params = RewardParams {
                alpha,
                beta,
                ..setup.params
            };
            let point = setup.with_params(params)?;
            let (mut reward, mut mem, mut ppl, mut pruned) = (0.0, 0.0, 0.0, 0.0);
            for rec in trace {
                let req = rec.request()?;
                let (mask, value) = gsi_reward_aware(&point, rec)?;
                let full = peak_memory(&point.spec, &RetentionMask::full(point.spec.n_layers), req)?;
                reward += value;
                mem += peak_memory(&point.spec, &mask, req)? as f64 / full.max(1) as f64;
                ppl += point.oracle.log_perplexity(&mask, req.seq_len)?;
                pruned += mask.pruned().count() as f64;
            }
            let n = trace.len().max(1) as f64;
            rows.push(SweepRow {
                alpha,
                beta,
                mean_reward: reward / n,
                retained_mem_frac: mem / n,
                mean_log_ppl: ppl / n,
                mean_pruned: pruned / n,
            });
        }
    }
    Ok(rows)
}

/// Grid points `(alpha, beta_lo, beta_hi)` where raising beta raised the
/// retained-memory fraction.
pub fn beta_monotonicity_violations(rows: &[SweepRow]) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for a in rows {
        for b in rows {
            if a.alpha == b.alpha && a.beta < b.beta && b.retained_mem_frac > a.retained_mem_frac {
                out.push((a.alpha, a.beta, b.beta));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub seeds: Vec<u64>,
    /// Trailing episodes averaged for the band statistic.
    pub window: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            window: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedCurve {
    pub seed: u64,
    pub curve: Vec<CurvePoint>,
    pub net: QNetwork,
}

#[derive(Debug, Clone)]
pub struct Robustness {
    pub curves: Vec<SeedCurve>,
    pub trailing_means: Vec<f64>,
    pub band: f64,
}

/// Mean return over the last `window` episodes of a curve.
pub fn trailing_mean(curve: &[CurvePoint], window: usize) -> f64 {
    let tail = &curve[curve.len().saturating_sub(window.max(1))..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().map(|p| p.episode_return).sum::<f64>() / tail.len() as f64
}

/// Largest deviation of a per-seed trailing mean from the cross-seed mean,
/// relative to the magnitude of that mean.
pub fn band_statistic(trailing: &[f64]) -> f64 {
    if trailing.is_empty() {
        return 0.0;
    }
    let mean = trailing.iter().sum::<f64>() / trailing.len() as f64;
    let dev = trailing.iter().map(|t| (t - mean).abs()).fold(0.0, f64::max);
    if dev == 0.0 {
        0.0
    } else {
        dev / mean.abs()
    }
}

/// Retrains the controller once per seed on the same trace.
pub fn seed_robustness(
    setup: &Setup,
    trace: &[TraceRecord],
    cfg: &DqnConfig,
    robust: &RobustnessConfig,
) -> Result<Robustness> {
    if robust.seeds.is_empty() {
        return Err(Error::Config("robustness needs at least one seed".into()));
    }
    let mut curves = Vec::new();
    for &seed in &robust.seeds {
        let cfg = DqnConfig {
            seed,
            ..cfg.clone()
        };
        let out = train_policy(setup, trace, &cfg)?;
        curves.push(SeedCurve {
            seed,
            curve: out.curve,
            net: out.net,
        });
    }
    let trailing_means: Vec<f64> = curves
        .iter()
        .map(|c| trailing_mean(&c.curve, robust.window))
        .collect();
    let band = band_statistic(&trailing_means);
    Ok(Robustness {
        curves,
        trailing_means,
        band,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverheadReport {
    pub param_count: usize,
    pub decisions: usize,
    pub mean_latency_us: f64,
    pub p99_latency_us: f64,
    pub max_latency_us: f64,
    pub mean_steps: f64,
    pub mean_mha_pruned: f64,
    pub mean_ffn_pruned: f64,
}

/// Times full RAP decisions (reset plus every removal) over `trace`.
pub fn overhead_report(setup: &Setup, net: &QNetwork, trace: &[TraceRecord]) -> Result<OverheadReport> {
    check_network(net, setup)?;
    if trace.is_empty() {
        return Err(Error::Config("overhead needs at least one record".into()));
    }
    let mut env = setup.env()?;
    let mut ctrl = Controller::new(PolicyKind::Rap, setup, Some(net), 0)?;
    let logs = trace
        .iter()
        .enumerate()
        .map(|(i, rec)| rollout(setup, &mut env, &mut ctrl, i, rec))
        .collect::<Result<Vec<_>>>()?;
    let mut lat: Vec<f64> = logs.iter().map(|l| l.latency_ns as f64 / 1e3).collect();
    lat.sort_by(f64::total_cmp);
    let n = logs.len() as f64;
    let p99 = lat[((0.99 * lat.len() as f64).ceil() as usize).clamp(1, lat.len()) - 1];
    Ok(OverheadReport {
        param_count: net.n_params(),
        decisions: logs.len(),
        mean_latency_us: lat.iter().sum::<f64>() / n,
        p99_latency_us: p99,
        max_latency_us: *lat.last().expect("non-empty"),
        mean_steps: logs.iter().map(|l| l.steps as f64).sum::<f64>() / n,
        mean_mha_pruned: logs.iter().map(|l| l.mha_pruned as f64).sum::<f64>() / n,
        mean_ffn_pruned: logs.iter().map(|l| l.ffn_pruned as f64).sum::<f64>() / n,
    })
}
