//! Per-step training metrics and their CSV form.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "step,loss,lr,grad_norm,tokens_seen,cumulative_flops,resolved_ponder_steps";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub tokens_seen: u64,
    pub cumulative_flops: f64,
    pub resolved_ponder_steps: usize,
}

impl MetricsRow {
    /// Shortest round-tripping decimal for every float, so equal runs give
    /// equal bytes.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.loss,
            self.lr,
            self.grad_norm,
            self.tokens_seen,
            self.cumulative_flops,
            self.resolved_ponder_steps
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = || Error::Data(format!("malformed metrics line: {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            loss: f[1].parse().map_err(|_| bad())?,
            lr: f[2].parse().map_err(|_| bad())?,
            grad_norm: f[3].parse().map_err(|_| bad())?,
            tokens_seen: f[4].parse().map_err(|_| bad())?,
            cumulative_flops: f[5].parse().map_err(|_| bad())?,
            resolved_ponder_steps: f[6].parse().map_err(|_| bad())?,
        })
    }
}

/// Appends rows to `metrics.csv`, writing the header when the file is new.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.into(),
            out,
        })
    }

    /// Continue an existing log; rows after `step` are dropped so a resumed
    /// run does not duplicate steps.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let rows = read_metrics(path)?;
        let mut log = Self::create(path)?;
        for r in rows.iter().filter(|r| r.step <= step) {
            log.push(r)?;
        }
        Ok(log)
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.csv_line()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => {
            return Err(Error::Format {
                path: path.into(),
                reason: "missing metrics header".into(),
            })
        }
    }
    lines
        .filter(|l| !l.is_empty())
        .map(MetricsRow::parse)
        .collect()
}
