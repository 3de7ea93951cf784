//! Step-to-step metrics over a pondering trace: cosine similarity of
//! consecutive embedding states, KL divergence of consecutive distributions,
//! and the spectrum of each (position-centered) embedding state.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ponder::PonderTrace;
use crate::tensor::{Matrix, Real};

pub const KL_FLOOR: f64 = 1e-12;
pub const DEFAULT_TOP_M: usize = 8;

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    // sqrt(x·x) == x, so identical rows give exactly 1
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Mean over positions of `cos(a_j, b_j)`. Rows where either side is the
/// zero vector count as 0.
pub fn mean_row_cosine<F: Real>(a: &Matrix<F>, b: &Matrix<F>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mut zero_rows = 0;
    let mut sum = 0.0;
    for r in 0..a.rows() {
        let x: Vec<f64> = a.row(r).iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.row(r).iter().map(|v| v.as_f64()).collect();
        match cosine(&x, &y) {
            Some(c) => sum += c,
            None => zero_rows += 1,
        }
    }
    if zero_rows > 0 {
        warn!("{zero_rows} zero-vector rows given cosine 0");
    }
    sum / a.rows().max(1) as f64
}

/// `D_KL(p ‖ q)` in nats from floored log-probabilities; never negative.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| pi * ((pi + KL_FLOOR).ln() - (qi + KL_FLOOR).ln()))
        .sum();
    kl.max(0.0)
}

pub fn mean_row_kl<F: Real>(p: &Matrix<F>, q: &Matrix<F>) -> f64 {
    assert_eq!(p.shape(), q.shape());
    let sum: f64 = (0..p.rows())
        .map(|r| {
            let a: Vec<f64> = p.row(r).iter().map(|v| v.as_f64()).collect();
            let b: Vec<f64> = q.row(r).iter().map(|v| v.as_f64()).collect();
            kl_divergence(&a, &b)
        })
        .sum();
    sum / p.rows().max(1) as f64
}

fn need_two<T>(states: &[T]) -> Result<()> {
    if states.len() < 2 {
        return Err(Error::EmptyInput("trace needs at least two states"));
    }
    Ok(())
}

/// Entry `t−1` is the mean cosine between `E^{t−1}` and `E^t`, `t = 1..s`.
pub fn cosine_series<F: Real>(trace: &PonderTrace<F>) -> Result<Vec<f64>> {
    need_two(&trace.embeddings)?;
    Ok(trace
        .embeddings
        .windows(2)
        .map(|w| mean_row_cosine(&w[0], &w[1]))
        .collect())
}

/// Entry `t−1` is the mean `D_KL(P^{t−1} ‖ P^t)`, `t = 1..s`.
pub fn kl_series<F: Real>(trace: &PonderTrace<F>) -> Result<Vec<f64>> {
    need_two(&trace.distributions)?;
    Ok(trace
        .distributions
        .windows(2)
        .map(|w| mean_row_kl(&w[0], &w[1]))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralStep {
    pub step: usize,
    /// Leading `σ_i² / Σσ_j²`, largest first.
    pub explained_variance: Vec<f64>,
    pub cumulative_variance_top_m: f64,
    pub effective_rank: f64,
}

/// Singular values of `m` after subtracting the column means, descending.
pub fn centered_singular_values<F: Real>(m: &Matrix<F>) -> Vec<f64> {
    let (n, d) = m.shape();
    let mut x = DMatrix::<f64>::from_fn(n, d, |r, c| m.get(r, c).as_f64());
    for c in 0..d {
        let mean = x.column(c).mean();
        x.column_mut(c).add_scalar_mut(-mean);
    }
    let mut s: Vec<f64> = x.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Explained-variance ratios, top-`m` cumulative variance and entropy
/// effective rank of a singular-value spectrum. `None` when the spectrum is
/// numerically zero.
pub fn spectrum_metrics(singular: &[f64], top_m: usize) -> Option<(Vec<f64>, f64, f64)> {
    let max = singular.first().copied().unwrap_or(0.0);
    let cutoff = max * singular.len() as f64 * f64::EPSILON;
    let s: Vec<f64> = singular
        .iter()
        .map(|&x| if x > cutoff { x } else { 0.0 })
        .collect();
    let energy: f64 = s.iter().map(|x| x * x).sum();
    let mass: f64 = s.iter().sum();
    if !(energy > 0.0) {
        return None;
    }
    let ratios: Vec<f64> = s.iter().map(|x| x * x / energy).collect();
    let top: Vec<f64> = ratios.iter().take(top_m).copied().collect();
    let cumulative = top.iter().sum::<f64>().min(1.0);
    let entropy: f64 = s
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let p = x / mass;
            -p * p.ln()
        })
        .sum();
    Some((top, cumulative, entropy.exp()))
}

pub fn spectral_step<F: Real>(step: usize, e: &Matrix<F>, top_m: usize) -> Result<SpectralStep> {
    if e.rows() < top_m {
        return Err(Error::Validation(format!(
            "spectral analysis of the top {top_m} components needs at least {top_m} positions, state {step} has {}",
            e.rows()
        )));
    }
    let sv = centered_singular_values(e);
    Ok(match spectrum_metrics(&sv, top_m) {
        Some((explained_variance, cumulative_variance_top_m, effective_rank)) => SpectralStep {
            step,
            explained_variance,
            cumulative_variance_top_m,
            effective_rank,
        },
        None => {
            warn!("embedding state {step} has identical rows; rank 0, effective rank set to 1");
            SpectralStep {
                step,
                explained_variance: vec![0.0; top_m.min(sv.len())],
                cumulative_variance_top_m: 0.0,
                effective_rank: 1.0,
            }
        }
    })
}

/// Spectral metrics of every embedding state `E^0..E^s`.
pub fn spectral_report<F: Real>(trace: &PonderTrace<F>, top_m: usize) -> Result<Vec<SpectralStep>> {
    if trace.embeddings.is_empty() {
        return Err(Error::EmptyInput("trace has no embedding states"));
    }
    trace
        .embeddings
        .iter()
        .enumerate()
        .map(|(t, e)| spectral_step(t, e, top_m))
        .collect()
}
