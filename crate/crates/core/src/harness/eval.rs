use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{rollout, Controller, PolicyKind, RolloutLog};
use super::setup::Setup;
use crate::dqn::QNetwork;
use crate::error::{Error, Result};
use crate::workload::TraceRecord;

/// Aggregates of one policy over a trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub policy: PolicyKind,
    pub episodes: usize,
    pub mean_log_ppl: f64,
    pub mean_retained_ippl: f64,
    pub feasibility_rate: f64,
    pub mean_mha_pruned: f64,
    pub mean_ffn_pruned: f64,
    pub mean_return: f64,
    pub mean_retained_mem_frac: f64,
    /// Wall clock; kept out of the deterministic CSV.
    #[serde(skip)]
    pub mean_latency_us: f64,
}

impl EvalReport {
    pub fn from_logs(policy: PolicyKind, logs: &[RolloutLog]) -> Self {
        let n = logs.len();
        let mean = |f: &dyn Fn(&RolloutLog) -> f64| {
            if n == 0 {
                0.0
            } else {
                logs.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            policy,
            episodes: n,
            mean_log_ppl: mean(&|l| l.log_ppl),
            mean_retained_ippl: mean(&|l| l.retained_ippl),
            feasibility_rate: mean(&|l| if l.feasible { 1.0 } else { 0.0 }),
            mean_mha_pruned: mean(&|l| l.mha_pruned as f64),
            mean_ffn_pruned: mean(&|l| l.ffn_pruned as f64),
            mean_return: mean(&|l| l.episode_return),
            mean_retained_mem_frac: mean(&|l| l.retained_mem_frac),
            mean_latency_us: mean(&|l| l.latency_ns as f64 / 1e3),
        }
    }
}

/// Serves every record of `trace` with one policy.
pub fn run_eval(
    setup: &Setup,
    policy: PolicyKind,
    trace: &[TraceRecord],
    net: Option<&QNetwork>,
    seed: u64,
) -> Result<(EvalReport, Vec<RolloutLog>)> {
    let mut ctrl = Controller::new(policy, setup, net, seed)?;
    let mut env = setup.env()?;
    let logs = trace
        .iter()
        .enumerate()
        .map(|(i, rec)| rollout(setup, &mut env, &mut ctrl, i, rec))
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalReport::from_logs(policy, &logs), logs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            confidence: 0.95,
            seed: 0,
        }
    }
}

/// Percentile bootstrap interval for the mean. `None` for an empty sample.
pub fn bootstrap_mean_ci<R: Rng + ?Sized>(
    values: &[f64],
    resamples: usize,
    confidence: f64,
    rng: &mut R,
) -> Option<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return None;
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let pick = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Some((pick(tail), pick(1.0 - tail)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub policy: PolicyKind,
    pub episodes: usize,
    pub mean_log_ppl: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub feasibility_rate: f64,
    pub mean_retained_ippl: f64,
}

/// Paired difference `a - b` of per-record log-perplexity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedDiff {
    pub a: PolicyKind,
    pub b: PolicyKind,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl PairedDiff {
    /// `a` is better than `b` with the configured confidence.
    pub fn separated(&self) -> bool {
        self.ci_high < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub rap_vs_random: Option<PairedDiff>,
    pub logs: Vec<RolloutLog>,
}

impl Ablation {
    /// Means are non-decreasing in [`PolicyKind::ALL`] order.
    pub fn ordering_holds(&self) -> bool {
        self.rows
            .windows(2)
            .all(|w| w[0].mean_log_ppl <= w[1].mean_log_ppl)
    }

    pub fn row(&self, policy: PolicyKind) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }
}

/// Evaluates every policy on the same records (RAP only when a network is
/// given) and attaches bootstrap intervals.
pub fn ablation_compare(
    setup: &Setup,
    trace: &[TraceRecord],
    net: Option<&QNetwork>,
    boot: &BootstrapConfig,
) -> Result<Ablation> {
    if !(boot.confidence > 0.0 && boot.confidence < 1.0) {
        return Err(Error::Config("bootstrap confidence must lie in (0, 1)".into()));
    }
    if trace.is_empty() {
        return Ok(Ablation::default());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(boot.seed);
    let mut out = Ablation::default();
    let mut per_policy = Vec::new();
    for policy in PolicyKind::ALL {
        if policy == PolicyKind::Rap && net.is_none() {
            continue;
        }
        let (report, logs) = run_eval(setup, policy, trace, net, boot.seed)?;
        let values: Vec<f64> = logs.iter().map(|l| l.log_ppl).collect();
        let (lo, hi) = bootstrap_mean_ci(&values, boot.resamples, boot.confidence, &mut rng)
            .unwrap_or((report.mean_log_ppl, report.mean_log_ppl));
        out.rows.push(AblationRow {
            policy,
            episodes: report.episodes,
            mean_log_ppl: report.mean_log_ppl,
            ci_low: lo,
            ci_high: hi,
            feasibility_rate: report.feasibility_rate,
            mean_retained_ippl: report.mean_retained_ippl,
        });
        per_policy.push((policy, values));
        out.logs.extend(logs);
    }
    let find = |k| per_policy.iter().find(|(p, _)| *p == k).map(|(_, v)| v);
    if let (Some(rap), Some(random)) = (find(PolicyKind::Rap), find(PolicyKind::RandomDrop)) {
        let diffs: Vec<f64> = rap.iter().zip(random).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let (lo, hi) = bootstrap_mean_ci(&diffs, boot.resamples, boot.confidence, &mut rng)
            .unwrap_or((mean, mean));
        out.rap_vs_random = Some(PairedDiff {
            a: PolicyKind::Rap,
            b: PolicyKind::RandomDrop,
            mean,
            ci_low: lo,
            ci_high: hi,
        });
    }
    Ok(out)
}
