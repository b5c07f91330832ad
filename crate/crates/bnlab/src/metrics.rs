//! Metrics records, CSV emission, and percentile estimation.
//!
//! The CSV layout is part of the tool's contract: identical configuration and
//! seed must reproduce the file byte for byte, so rows are formatted with a
//! fixed 9-significant-digit scientific notation rather than shortest-float.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

pub const CSV_HEADER: &str = "step,test_accuracy,train_loss,p15,p50,p85";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub test_accuracy: f64,
    pub train_loss: f64,
    pub p15: f64,
    pub p50: f64,
    pub p85: f64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.test_accuracy) {
            return Err(Error::Verification(format!(
                "test accuracy {} outside [0, 1] at step {}",
                self.test_accuracy, self.step
            )));
        }
        for (name, v) in [
            ("train_loss", self.train_loss),
            ("p15", self.p15),
            ("p50", self.p50),
            ("p85", self.p85),
        ] {
            if !v.is_finite() {
                return Err(Error::Verification(format!(
                    "{name} is not finite at step {}",
                    self.step
                )));
            }
        }
        if !(self.p15 <= self.p50 && self.p50 <= self.p85) {
            return Err(Error::Verification(format!(
                "percentiles out of order at step {}: {} / {} / {}",
                self.step, self.p15, self.p50, self.p85
            )));
        }
        Ok(())
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.step, self.test_accuracy, self.train_loss, self.p15, self.p50, self.p85
        )
    }
}

/// Streams records to a CSV file, header first.
pub struct MetricsWriter {
    out: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        writeln!(out, "{CSV_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        record.validate()?;
        writeln!(self.out, "{}", record.to_csv_row())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Percentile by linear interpolation between order statistics: the p-th
/// percentile of n sorted values sits at fractional rank p/100 * (n - 1).
pub fn percentile(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyBatch("percentile"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Config(format!("percentile {p} outside [0, 100]")));
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Sorts in place and returns the (15th, 50th, 85th) percentiles.
pub fn percentiles_15_50_85(values: &mut [f64]) -> Result<(f64, f64, f64)> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("percentile input"));
    }
    values.sort_by(|a, b| a.total_cmp(b));
    Ok((
        percentile(values, 15.0)?,
        percentile(values, 50.0)?,
        percentile(values, 85.0)?,
    ))
}
