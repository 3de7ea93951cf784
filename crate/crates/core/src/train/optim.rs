//! Adam with decoupled weight decay, and global-norm gradient clipping.

use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter tensor, plus the step count used
/// for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Matrix<F>>,
    pub v: Vec<Matrix<F>>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &[Matrix<F>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Moments for tensors added after the state was created (mechanism
    /// extras on warm start) start at zero.
    pub fn matches(&self, params: &[Matrix<F>]) -> bool {
        self.m.len() == params.len()
            && self
                .m
                .iter()
                .zip(params)
                .all(|(m, p)| m.shape() == p.shape())
    }
}

/// One AdamW update of a flat tensor at step `t` (1-based).
pub fn adamw_update<F: Real>(
    param: &mut [F],
    grad: &[F],
    m: &mut [F],
    v: &mut [F],
    t: u64,
    h: &AdamHyper,
    decay: bool,
) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    let wd = if decay { h.weight_decay } else { 0.0 };
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        let mi = h.beta1 * m[i].as_f64() + (1.0 - h.beta1) * g;
        let vi = h.beta2 * v[i].as_f64() + (1.0 - h.beta2) * g * g;
        m[i] = F::lit(mi);
        v[i] = F::lit(vi);
        let p = param[i].as_f64();
        let update = (mi / c1) / ((vi / c2).sqrt() + h.epsilon) + wd * p;
        param[i] = F::lit(p - h.lr * update);
    }
}

/// L2 norm over every gradient entry, accumulated in f64.
pub fn global_norm<F: Real>(grads: &[Matrix<F>]) -> f64 {
    grads.iter().map(Matrix::sum_sq).sum::<f64>().sqrt()
}

/// Scale factor that brings `norm` down to `max_norm`; 1 when already within.
pub fn clip_factor(norm: f64, max_norm: Option<f64>) -> f64 {
    match max_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}
