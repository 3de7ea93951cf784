//! Pondering: feed the probability-weighted mixture of token embeddings
//! back into the same language model before committing to a prediction.
//!
//! With `P^t = softmax(LM(E^t))` and `T^{t+1} = topk(P^t)·V`, the state
//! after `s` steps is `E^s = E^0 + T^1 + … + T^s`, accumulated in that
//! order, and the prediction is `P^s`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{top_k_indices, Graph, SeqLayout, Var};
use crate::error::{Error, Result};
use crate::model::{logits_to_probs, Lm, Model};
use crate::tensor::{Matrix, Real};

pub const DEFAULT_STEPS: usize = 3;
pub const DEFAULT_TOP_K: usize = 100;
pub const DEFAULT_RANDOM_RANGE: (usize, usize) = (1, 10);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Fixed(usize),
    UniformRandom { min: usize, max: usize },
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Fixed(DEFAULT_STEPS)
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Fixed(_) => Ok(()),
            StepSchedule::UniformRandom { min, max } => {
                if min < 1 {
                    Err(Error::Config(format!(
                        "step range minimum must be >= 1, got {min}"
                    )))
                } else if max < min {
                    Err(Error::Config(format!("step range {min}..{max} is empty")))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Largest step count this schedule can produce.
    pub fn max_steps(&self) -> usize {
        match *self {
            StepSchedule::Fixed(s) => s,
            StepSchedule::UniformRandom { max, .. } => max,
        }
    }
}

/// Resolve the number of pondering steps for one batch.
pub fn sample_steps<R: Rng>(schedule: &StepSchedule, rng: &mut R) -> usize {
    match *schedule {
        StepSchedule::Fixed(s) => s,
        StepSchedule::UniformRandom { min, max } => rng.random_range(min..=max),
    }
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PonderConfig {
    #[serde(default)]
    pub schedule: StepSchedule,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_true")]
    pub renormalize_topk: bool,
    #[serde(default)]
    pub trace_capture: bool,
}

impl Default for PonderConfig {
    fn default() -> Self {
        Self {
            schedule: StepSchedule::default(),
            top_k: DEFAULT_TOP_K,
            renormalize_topk: true,
            trace_capture: false,
        }
    }
}

impl PonderConfig {
    pub fn fixed(steps: usize, top_k: usize) -> Self {
        Self {
            schedule: StepSchedule::Fixed(steps),
            top_k,
            ..Self::default()
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.schedule.validate()?;
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if self.top_k > vocab_size {
            return Err(Error::Config(format!(
                "top_k {} exceeds vocab_size {vocab_size}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Embedding states `E^0..E^s` and distributions `P^0..P^s` of one forward.
#[derive(Clone, Debug, PartialEq)]
pub struct PonderTrace<F> {
    pub embeddings: Vec<Matrix<F>>,
    pub distributions: Vec<Matrix<F>>,
}

impl<F: Real> Default for PonderTrace<F> {
    fn default() -> Self {
        Self {
            embeddings: Vec::new(),
            distributions: Vec::new(),
        }
    }
}

impl<F: Real> PonderTrace<F> {
    pub fn step_count(&self) -> usize {
        self.embeddings.len().saturating_sub(1)
    }

    /// Pondering embeddings `T^t = E^t − E^{t−1}` recovered from the chain.
    pub fn increments(&self) -> Vec<Matrix<F>> {
        self.embeddings
            .windows(2)
            .map(|w| w[1].sub(&w[0]))
            .collect()
    }
}

/// Graph-level pondering forward. Returns the final logits; when `trace` is
/// given it receives every `(E^t, P^t)` pair.
#[allow(clippy::too_many_arguments)]
pub fn ponder_logits<F: Real>(
    g: &mut Graph<F>,
    lm: &Lm<'_, F>,
    tokens: &[usize],
    layout: SeqLayout,
    top_k: usize,
    renormalize: bool,
    steps: usize,
    mut trace: Option<&mut PonderTrace<F>>,
) -> Result<Var> {
    lm.check_layout(layout)?;
    let mut e = lm.embed(g, tokens)?;
    for _ in 0..steps {
        let logits = lm.forward(g, e, layout);
        let p = g.softmax(logits);
        if let Some(t) = trace.as_deref_mut() {
            t.embeddings.push(g.value(e).clone());
            t.distributions.push(g.value(p).clone());
        }
        let mix = g.top_k_mix(p, lm.embedding(), top_k, renormalize)?;
        e = g.add(e, mix);
    }
    let logits = lm.forward(g, e, layout);
    if let Some(t) = trace {
        t.embeddings.push(g.value(e).clone());
        t.distributions.push(logits_to_probs(g.value(logits))?);
    }
    Ok(logits)
}

/// Pondering embedding of a distribution matrix: per row, the top-`k`
/// probabilities (ties to lower index), optionally renormalized, weighting
/// rows of `embedding`.
pub fn ponder_embedding<F: Real>(
    probs: &Matrix<F>,
    embedding: &Matrix<F>,
    top_k: usize,
    renormalize: bool,
) -> Result<Matrix<F>> {
    let mut g = Graph::new();
    let p = g.leaf(probs.clone(), false);
    let v = g.leaf(embedding.clone(), false);
    let t = g.top_k_mix(p, v, top_k, renormalize)?;
    Ok(g.value(t).clone())
}

/// One pondering step: `P = softmax(LM(E))`, `E' = E + ponder_embedding(P)`.
pub fn ponder_advance<F: Real>(
    embeddings: &Matrix<F>,
    model: &Model<F>,
    cfg: &PonderConfig,
) -> Result<(Matrix<F>, Matrix<F>)> {
    cfg.validate(model.config.vocab_size)?;
    if !embeddings.all_finite() {
        return Err(Error::Numeric("non-finite embedding state".into()));
    }
    let layout = SeqLayout::single(embeddings.rows());
    let mut g = Graph::new();
    let lm = model.on(&mut g, false);
    lm.check_layout(layout)?;
    let e = g.leaf(embeddings.clone(), false);
    let logits = lm.forward(&mut g, e, layout);
    let probs = logits_to_probs(g.value(logits))?;
    let mix = ponder_embedding(
        &probs,
        model.params.input_embedding(),
        cfg.top_k,
        cfg.renormalize_topk,
    )?;
    Ok((probs, embeddings.add(&mix)))
}

/// `resolved_steps` pondering steps then one final forward over a single
/// sequence. Returns `P^s` and, if `cfg.trace_capture`, the full trace.
pub fn ponder_forward<F: Real>(
    tokens: &[usize],
    model: &Model<F>,
    cfg: &PonderConfig,
    resolved_steps: usize,
) -> Result<(Matrix<F>, Option<PonderTrace<F>>)> {
    ponder_forward_batch(
        tokens,
        SeqLayout::single(tokens.len()),
        model,
        cfg,
        resolved_steps,
    )
}

/// Batched [`ponder_forward`] over row-stacked sequences.
pub fn ponder_forward_batch<F: Real>(
    tokens: &[usize],
    layout: SeqLayout,
    model: &Model<F>,
    cfg: &PonderConfig,
    resolved_steps: usize,
) -> Result<(Matrix<F>, Option<PonderTrace<F>>)> {
    cfg.validate(model.config.vocab_size)?;
    if tokens.len() != layout.rows() {
        return Err(Error::Validation(
            "token count does not match layout".into(),
        ));
    }
    let mut g = Graph::new();
    let lm = model.on(&mut g, false);
    let mut trace = cfg.trace_capture.then(PonderTrace::default);
    let logits = ponder_logits(
        &mut g,
        &lm,
        tokens,
        layout,
        cfg.top_k,
        cfg.renormalize_topk,
        resolved_steps,
        trace.as_mut(),
    )?;
    let probs = match &trace {
        Some(t) => t.distributions.last().expect("final distribution").clone(),
        None => logits_to_probs(g.value(logits))?,
    };
    Ok((probs, trace))
}

/// Summary of one embedding state for trace export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    pub mean_row_norm: f64,
    pub mean: f64,
    pub std: f64,
    pub max_abs: f64,
}

impl EmbeddingStats {
    pub fn of<F: Real>(m: &Matrix<F>) -> Self {
        let n = m.len().max(1) as f64;
        let mean = m.data().iter().map(|x| x.as_f64()).sum::<f64>() / n;
        let var = m
            .data()
            .iter()
            .map(|x| (x.as_f64() - mean).powi(2))
            .sum::<f64>()
            / n;
        let rows = m.rows().max(1) as f64;
        let mean_row_norm = (0..m.rows())
            .map(|r| {
                m.row(r)
                    .iter()
                    .map(|x| x.as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / rows;
        let max_abs = m
            .data()
            .iter()
            .map(|x| x.as_f64().abs())
            .fold(0.0, f64::max);
        Self {
            mean_row_norm,
            mean,
            std: var.sqrt(),
            max_abs,
        }
    }
}

/// One line of the trace export (JSON lines, one record per step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub step: usize,
    /// Per position, the top token ids, most probable first.
    pub top_ids: Vec<Vec<usize>>,
    /// Per position, the matching probabilities.
    pub top_probs: Vec<Vec<f64>>,
    pub embedding: EmbeddingStats,
}

pub fn trace_records<F: Real>(trace: &PonderTrace<F>, top_k: usize) -> Vec<TraceRecord> {
    trace
        .embeddings
        .iter()
        .zip(&trace.distributions)
        .enumerate()
        .map(|(step, (e, p))| {
            let mut top_ids = Vec::with_capacity(p.rows());
            let mut top_probs = Vec::with_capacity(p.rows());
            for r in 0..p.rows() {
                let ids = top_k_indices(p.row(r), top_k);
                top_probs.push(ids.iter().map(|&i| p.get(r, i).as_f64()).collect());
                top_ids.push(ids);
            }
            TraceRecord {
                step,
                top_ids,
                top_probs,
                embedding: EmbeddingStats::of(e),
            }
        })
        .collect()
}
