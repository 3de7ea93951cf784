//! Trace analyses and FLOPs accounting.

pub mod flops;
pub mod report;
pub mod series;

pub use flops::{flops_estimate, FlopsEstimate};
pub use report::{analyze, capture_trace, load_trace, save_trace, write_report, AnalysisReport};
pub use series::{cosine_series, kl_series, spectral_report, SpectralStep, DEFAULT_TOP_M};
