//! Closed-form FLOPs per token. Counts multiply-adds as 2 FLOPs for the
//! dense projections, the MLP, attention scores and weighted values, and the
//! output head; norms, softmax and residual adds are ignored.

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineKind;
use crate::mechanism::Mechanism;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub forward_per_token: f64,
    /// Training FLOPs per token: forward plus backward, 3× forward.
    pub train_per_token: f64,
    /// The top-K mixture part of `forward_per_token` (pondering only).
    pub mixture_per_token: f64,
}

/// One pass of the block stack per token with attention over `context` keys.
pub fn stack_flops(cfg: &ModelConfig, context: usize) -> f64 {
    let d = cfg.d_model as f64;
    let h = cfg.mlp_hidden() as f64;
    let per_layer = 2.0 * 4.0 * d * d + 2.0 * 2.0 * d * h + 2.0 * 2.0 * context as f64 * d;
    cfg.n_layers as f64 * per_layer
}

pub fn head_flops(cfg: &ModelConfig) -> f64 {
    2.0 * cfg.d_model as f64 * cfg.vocab_size as f64
}

pub fn vanilla_forward_flops(cfg: &ModelConfig) -> f64 {
    stack_flops(cfg, cfg.context_len) + head_flops(cfg)
}

/// `count` is the mechanism's repetition parameter: pondering steps, loops,
/// pauses per token, or feedback steps. The mechanism's own settings other
/// than that count (top-K, projection) are read from `mechanism`.
pub fn flops_estimate(cfg: &ModelConfig, mechanism: &Mechanism, count: usize) -> FlopsEstimate {
    let c = count as f64;
    let d = cfg.d_model as f64;
    let vanilla = vanilla_forward_flops(cfg);
    let (forward, mixture) = match mechanism {
        Mechanism::Vanilla => (vanilla, 0.0),
        Mechanism::Ponder(p) => {
            let mix = c * 2.0 * p.top_k.min(cfg.vocab_size) as f64 * d;
            ((c + 1.0) * vanilla + mix, mix)
        }
        Mechanism::Baseline(BaselineKind::Looped { .. }) => (
            c.max(1.0) * stack_flops(cfg, cfg.context_len) + head_flops(cfg),
            0.0,
        ),
        Mechanism::Baseline(BaselineKind::Pause { .. }) => {
            let wide = cfg.context_len * (1 + count);
            ((1.0 + c) * (stack_flops(cfg, wide) + head_flops(cfg)), 0.0)
        }
        Mechanism::Baseline(BaselineKind::HiddenFeedback { projected, .. }) => {
            let proj = if *projected { c * 2.0 * d * d } else { 0.0 };
            (
                (c + 1.0) * stack_flops(cfg, cfg.context_len) + head_flops(cfg) + proj,
                0.0,
            )
        }
    };
    FlopsEstimate {
        forward_per_token: forward,
        train_per_token: 3.0 * forward,
        mixture_per_token: mixture,
    }
}

impl Mechanism {
    /// The repetition count a batch runs with, given the pondering steps
    /// resolved for it.
    pub fn compute_count(&self, resolved_ponder_steps: usize) -> usize {
        match self {
            Mechanism::Vanilla => 0,
            Mechanism::Ponder(_) => resolved_ponder_steps,
            Mechanism::Baseline(BaselineKind::Looped { loops }) => *loops,
            Mechanism::Baseline(BaselineKind::Pause { n_pauses }) => *n_pauses,
            Mechanism::Baseline(BaselineKind::HiddenFeedback { steps, .. }) => *steps,
        }
    }
}
