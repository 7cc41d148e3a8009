//! Wall-clock comparison of per-frame reference extraction and batched
//! surrogate inference.

use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::surrogate::Surrogate;
use super::{extract_single, FeatureError, ReferenceExtractor, Result};
use crate::segment::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedRow {
    pub batch: usize,
    /// Mean seconds per batch.
    pub reference_s: f64,
    pub surrogate_s: f64,
    pub speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub iterations: usize,
    pub rows: Vec<SpeedRow>,
}

impl SpeedReport {
    pub fn row(&self, batch: usize) -> Option<&SpeedRow> {
        self.rows.iter().find(|r| r.batch == batch)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,reference_s,surrogate_s,speedup\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.2}\n",
                r.batch, r.reference_s, r.surrogate_s, r.speedup
            ));
        }
        out
    }
}

impl fmt::Display for SpeedReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "averaged over {} iterations", self.iterations)?;
        writeln!(f, "{:>6} {:>14} {:>14} {:>10}", "batch", "reference (s)", "surrogate (s)", "speedup")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>6} {:>14.6} {:>14.6} {:>9.2}x",
                r.batch, r.reference_s, r.surrogate_s, r.speedup
            )?;
        }
        Ok(())
    }
}

/// Times both extractors on identical batches drawn cyclically from
/// `frames`. One untimed warm-up pass precedes each measurement.
pub fn benchmark_extractors(
    frames: &[Image],
    reference: &ReferenceExtractor,
    surrogate: &Surrogate,
    batches: &[usize],
    iterations: usize,
) -> Result<SpeedReport> {
    if iterations < 10 {
        return Err(FeatureError::Config(format!("iterations must be at least 10, got {iterations}")));
    }
    if frames.is_empty() {
        return Err(FeatureError::InvalidInput("no frames to benchmark".into()));
    }
    let mut rows = Vec::with_capacity(batches.len());
    for &b in batches {
        let batch: Vec<&Image> = (0..b).map(|i| &frames[i % frames.len()]).collect();
        let run_reference = |batch: &[&Image]| -> Result<usize> {
            let mut n = 0;
            for f in batch {
                n += extract_single(f, reference)?.len();
            }
            Ok(n)
        };
        std::hint::black_box(run_reference(&batch)?);
        let t = Instant::now();
        for _ in 0..iterations {
            std::hint::black_box(run_reference(&batch)?);
        }
        let reference_s = t.elapsed().as_secs_f64() / iterations as f64;

        std::hint::black_box(surrogate.predict_batch(&batch)?);
        let t = Instant::now();
        for _ in 0..iterations {
            std::hint::black_box(surrogate.predict_batch(&batch)?);
        }
        let surrogate_s = t.elapsed().as_secs_f64() / iterations as f64;
        rows.push(SpeedRow {
            batch: b,
            reference_s,
            surrogate_s,
            speedup: reference_s / surrogate_s,
        });
    }
    Ok(SpeedReport { iterations, rows })
}
