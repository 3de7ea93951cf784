//! Trace capture over validation windows, the combined analysis report, and
//! its on-disk form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::flops::FlopsEstimate;
use super::series::{cosine_series, kl_series, spectral_report, SpectralStep};
use crate::data::{sequential_batches, TokenShard};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ponder::{ponder_forward_batch, PonderConfig, PonderTrace};
use crate::tensor::Matrix;
use crate::train::checkpoint::{decode_tensors, encode_tensors};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub cosine_series: Vec<f64>,
    pub kl_series: Vec<f64>,
    pub spectral: Vec<SpectralStep>,
    pub flops: Option<FlopsEstimate>,
}

pub fn analyze(
    trace: &PonderTrace<f32>,
    top_m: usize,
    flops: Option<FlopsEstimate>,
) -> Result<AnalysisReport> {
    Ok(AnalysisReport {
        cosine_series: cosine_series(trace)?,
        kl_series: kl_series(trace)?,
        spectral: spectral_report(trace, top_m)?,
        flops,
    })
}

/// Trace of `steps` pondering steps over the first `sequences` windows of
/// `shards`, all positions stacked.
pub fn capture_trace(
    model: &Model<f32>,
    ponder: &PonderConfig,
    shards: &[TokenShard],
    context_len: usize,
    sequences: usize,
    steps: usize,
) -> Result<PonderTrace<f32>> {
    let batches = sequential_batches(shards, context_len, sequences)?;
    let batch = &batches[0];
    let cfg = PonderConfig {
        trace_capture: true,
        ..ponder.clone()
    };
    let (_, trace) = ponder_forward_batch(&batch.inputs, batch.layout, model, &cfg, steps)?;
    Ok(trace.expect("trace requested"))
}

/// Full trace as a tensor file: `e.<t>` and `p.<t>` for every step.
pub fn save_trace(path: &Path, trace: &PonderTrace<f32>) -> Result<()> {
    let names: Vec<(String, &Matrix<f32>)> = trace
        .embeddings
        .iter()
        .enumerate()
        .flat_map(|(t, e)| {
            [
                (format!("e.{t}"), e),
                (format!("p.{t}"), &trace.distributions[t]),
            ]
        })
        .collect();
    let records: Vec<(&str, &Matrix<f32>)> = names.iter().map(|(n, m)| (n.as_str(), *m)).collect();
    std::fs::write(path, encode_tensors(&records)).map_err(|e| Error::io(path, e))
}

pub fn load_trace(path: &Path) -> Result<PonderTrace<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut trace = PonderTrace::default();
    for (i, (name, m)) in decode_tensors(&bytes, path)?.into_iter().enumerate() {
        let want = if i % 2 == 0 {
            format!("e.{}", i / 2)
        } else {
            format!("p.{}", i / 2)
        };
        if name != want {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("expected tensor {want}, found {name}"),
            });
        }
        if i % 2 == 0 {
            trace.embeddings.push(m);
        } else {
            trace.distributions.push(m);
        }
    }
    if trace.embeddings.len() != trace.distributions.len() {
        return Err(Error::Format {
            path: path.into(),
            reason: "unpaired embedding state".into(),
        });
    }
    Ok(trace)
}

fn series_csv(header: &str, values: &[f64]) -> String {
    let mut out = format!("step,{header}\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{},{v}\n", i + 1));
    }
    out
}

pub fn spectral_csv(steps: &[SpectralStep]) -> String {
    let m = steps
        .iter()
        .map(|s| s.explained_variance.len())
        .max()
        .unwrap_or(0);
    let mut out = "step,effective_rank,cumulative_variance_top_m".to_string();
    for i in 1..=m {
        out.push_str(&format!(",ratio_{i}"));
    }
    out.push('\n');
    for s in steps {
        out.push_str(&format!(
            "{},{},{}",
            s.step, s.effective_rank, s.cumulative_variance_top_m
        ));
        for i in 0..m {
            match s.explained_variance.get(i) {
                Some(r) => out.push_str(&format!(",{r}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// `cosine.csv`, `kl.csv`, `spectral.csv` and `report.json` under `dir`.
pub fn write_report(dir: &Path, report: &AnalysisReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("cosine.csv", series_csv("cosine", &report.cosine_series)),
        ("kl.csv", series_csv("kl", &report.kl_series)),
        ("spectral.csv", spectral_csv(&report.spectral)),
        (
            "report.json",
            serde_json::to_string_pretty(report).map_err(|e| Error::json(dir, e))?,
        ),
    ];
    for (name, text) in files {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
