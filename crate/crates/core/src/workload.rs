//! Request/budget traces.
//!
//! Generated traces mix short conversational prompts with bursts of long
//! inputs (two log-normal length modes whose weights change per phase of a
//! "day"), draw batch sizes from a truncated geometric law, and let the
//! available memory drift as a bounded, step-limited random walk with a
//! diurnal swing. Budgets are fractions of the dense model's peak memory
//! for the record's own request.
//!
//! Traces are stored one JSON object per line:
//! `{"t":0,"batch":2,"seq_len":181,"budget_frac":0.75}`.

use std::f64::consts::TAU;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::Request;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub t: u64,
    #[serde(rename = "batch")]
    pub batch_size: u32,
    pub seq_len: u32,
    #[serde(rename = "budget_frac")]
    pub budget_fraction: f64,
}

impl TraceRecord {
    pub fn request(&self) -> Result<Request> {
        Request::new(self.batch_size, self.seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        self.request()?;
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::InvalidRequest(format!(
                "budget_frac must lie in (0, 1] (got {})",
                self.budget_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceGenConfig {
    pub seed: u64,
    pub count: usize,
    /// `[short, long]` mode weights for each phase of a day.
    pub phase_weights: Vec<[f64; 2]>,
    pub records_per_phase: usize,
    pub short_median: f64,
    pub long_median: f64,
    /// Standard deviation of ln(seq_len) within a mode.
    pub mode_sigma: f64,
    pub min_seq: u32,
    pub max_seq: u32,
    /// Success probability of the batch-size geometric law.
    pub batch_p: f64,
    pub max_batch: u32,
    pub budget_min: f64,
    pub budget_max: f64,
    pub budget_start: f64,
    /// Largest change of the budget fraction between consecutive records.
    pub budget_step: f64,
    pub budget_diurnal_amplitude: f64,
}

impl Default for TraceGenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 1000,
            phase_weights: vec![[0.85, 0.15], [0.65, 0.35], [0.4, 0.6], [0.65, 0.35]],
            records_per_phase: 50,
            short_median: 200.0,
            long_median: 3000.0,
            mode_sigma: 0.35,
            min_seq: 16,
            max_seq: 8192,
            batch_p: 0.35,
            max_batch: 16,
            budget_min: 0.5,
            budget_max: 1.0,
            budget_start: 0.75,
            budget_step: 0.03,
            budget_diurnal_amplitude: 0.15,
        }
    }
}

impl TraceGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("trace generator: {m}")));
        if self.phase_weights.is_empty() {
            return bad("at least one phase is required".into());
        }
        for (i, w) in self.phase_weights.iter().enumerate() {
            if w.iter().any(|v| !(0.0..=1.0).contains(v)) || (w[0] + w[1] - 1.0).abs() > 1e-9 {
                return bad(format!("phase {i}: weights must be in [0, 1] and sum to 1"));
            }
        }
        if self.records_per_phase == 0 {
            return bad("records_per_phase must be >= 1".into());
        }
        if !(self.short_median > 0.0 && self.long_median > 0.0 && self.mode_sigma >= 0.0) {
            return bad("mode medians must be > 0 and sigma >= 0".into());
        }
        if self.min_seq == 0 || self.min_seq > self.max_seq {
            return bad("need 1 <= min_seq <= max_seq".into());
        }
        if !(self.batch_p > 0.0 && self.batch_p <= 1.0) || self.max_batch == 0 {
            return bad("batch_p must lie in (0, 1] and max_batch >= 1".into());
        }
        if !(self.budget_min > 0.0 && self.budget_min <= self.budget_max && self.budget_max <= 1.0) {
            return bad("budget bounds must satisfy 0 < min <= max <= 1".into());
        }
        if !(self.budget_min..=self.budget_max).contains(&self.budget_start) {
            return bad("budget_start must lie within the budget bounds".into());
        }
        if !(self.budget_step >= 0.0 && self.budget_diurnal_amplitude >= 0.0) {
            return bad("budget_step and amplitude must be >= 0".into());
        }
        Ok(())
    }

    fn day_len(&self) -> usize {
        self.records_per_phase * self.phase_weights.len()
    }
}

/// Iterator over generated records.
pub struct TraceGenerator {
    cfg: TraceGenConfig,
    rng: ChaCha8Rng,
    short: Normal<f64>,
    long: Normal<f64>,
    batch: Geometric,
    budget: f64,
    t: u64,
}

impl TraceGenerator {
    fn diurnal(&self, t: u64) -> f64 {
        let day = self.cfg.day_len() as f64;
        self.cfg.budget_diurnal_amplitude * (TAU * t as f64 / day).sin()
    }

    fn sample_seq(&mut self, phase: usize) -> u32 {
        let long_w = self.cfg.phase_weights[phase][1];
        let mode = if self.rng.gen::<f64>() < long_w {
            &self.long
        } else {
            &self.short
        };
        let len = mode.sample(&mut self.rng).exp().round();
        len.clamp(self.cfg.min_seq as f64, self.cfg.max_seq as f64) as u32
    }

    fn sample_batch(&mut self) -> u32 {
        loop {
            let k = self.batch.sample(&mut self.rng) + 1;
            if k <= self.cfg.max_batch as u64 {
                return k as u32;
            }
        }
    }
}

impl Iterator for TraceGenerator {
    type Item = TraceRecord;

    fn next(&mut self) -> Option<TraceRecord> {
        if self.t as usize >= self.cfg.count {
            return None;
        }
        let t = self.t;
        let phase = (t as usize / self.cfg.records_per_phase) % self.cfg.phase_weights.len();
        let seq_len = self.sample_seq(phase);
        let batch_size = self.sample_batch();
        if t > 0 {
            let step = self.cfg.budget_step;
            let drift = self.diurnal(t) - self.diurnal(t - 1);
            let noise = if step > 0.0 {
                self.rng.gen_range(-0.5 * step..=0.5 * step)
            } else {
                0.0
            };
            let delta = (noise + drift).clamp(-step, step);
            self.budget = (self.budget + delta).clamp(self.cfg.budget_min, self.cfg.budget_max);
        }
        self.t += 1;
        Some(TraceRecord {
            t,
            batch_size,
            seq_len,
            budget_fraction: self.budget,
        })
    }
}

pub fn generate(cfg: &TraceGenConfig) -> Result<TraceGenerator> {
    cfg.validate()?;
    let normal = |median: f64| {
        Normal::new(median.ln(), cfg.mode_sigma)
            .map_err(|e| Error::Config(format!("trace generator: {e}")))
    };
    Ok(TraceGenerator {
        short: normal(cfg.short_median)?,
        long: normal(cfg.long_median)?,
        batch: Geometric::new(cfg.batch_p)
            .map_err(|e| Error::Config(format!("trace generator: {e}")))?,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        budget: cfg.budget_start,
        cfg: cfg.clone(),
        t: 0,
    })
}

pub fn write_trace<'a, W: Write>(
    records: impl IntoIterator<Item = &'a TraceRecord>,
    mut out: W,
) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_trace(records: &[TraceRecord], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_trace(records, std::io::BufWriter::new(file))
}

/// Parses records lazily, reporting the 1-based line of any failure.
pub fn read_trace<R: BufRead>(
    reader: R,
    origin: String,
) -> impl Iterator<Item = Result<TraceRecord>> {
    reader
        .lines()
        .enumerate()
        .filter_map(move |(idx, line)| {
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::Io(e))),
            };
            if line.trim().is_empty() {
                return None;
            }
            let parsed = serde_json::from_str::<TraceRecord>(&line)
                .map_err(|e| e.to_string())
                .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()));
            Some(parsed.map_err(|msg| Error::Parse {
                path: origin.clone(),
                line: idx + 1,
                msg,
            }))
        })
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact {
            what: "trace",
            path: path.to_path_buf(),
            step: "rap trace-gen",
        });
    }
    let reader = BufReader::new(std::fs::File::open(path)?);
    read_trace(reader, path.display().to_string()).collect()
}
