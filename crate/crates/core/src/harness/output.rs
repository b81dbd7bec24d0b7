use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::experiments::SeedCurve;
use crate::dqn::CurvePoint;
use crate::error::Result;

/// Writes rows with a header derived from the row type.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(rows, std::io::BufWriter::new(file))
}

#[derive(Serialize)]
struct SeedCurveRow {
    seed: u64,
    episode: usize,
    #[serde(rename = "return")]
    episode_return: f64,
    epsilon: f64,
    steps: usize,
}

/// One long-format CSV: `seed,episode,return,epsilon,steps`.
pub fn seed_curves_rows(curves: &[SeedCurve]) -> Vec<impl Serialize> {
    curves
        .iter()
        .flat_map(|c| {
            c.curve.iter().map(move |p: &CurvePoint| SeedCurveRow {
                seed: c.seed,
                episode: p.episode,
                episode_return: p.episode_return,
                epsilon: p.epsilon,
                steps: p.steps,
            })
        })
        .collect()
}
