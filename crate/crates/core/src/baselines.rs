//! Extra-compute baselines built on the same language model: looped layer
//! stack, pause tokens, and hidden-state feedback (raw or projected).

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SeqLayout, Var};
use crate::error::{Error, Result};
use crate::model::{logits_to_probs, Extras, Lm, Model};
use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineKind {
    /// Run the block stack `loops` times; loop `i > 1` sees `E^0 + H_{i-1}`.
    Looped { loops: usize },
    /// Insert `n_pauses` learnable pause embeddings after every token.
    Pause { n_pauses: usize },
    /// Pondering control flow with the final hidden state (optionally
    /// projected) in place of the probability-weighted embedding.
    HiddenFeedback { steps: usize, projected: bool },
}

impl BaselineKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BaselineKind::Looped { loops } if loops < 1 => {
                Err(Error::Config("looped baseline needs loops >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn extras(&self) -> Extras {
        match *self {
            BaselineKind::Pause { .. } => Extras {
                pause: true,
                projector: false,
            },
            BaselineKind::HiddenFeedback {
                projected: true, ..
            } => Extras {
                pause: false,
                projector: true,
            },
            _ => Extras::default(),
        }
    }

    /// Factor by which a training window grows inside the model.
    pub fn expansion(&self) -> usize {
        match *self {
            BaselineKind::Pause { n_pauses } => 1 + n_pauses,
            _ => 1,
        }
    }
}

/// Graph-level looped forward, returning logits.
pub fn looped_logits<F: Real>(
    g: &mut Graph<F>,
    lm: &Lm<'_, F>,
    tokens: &[usize],
    layout: SeqLayout,
    loops: usize,
) -> Result<Var> {
    if loops < 1 {
        return Err(Error::Config("looped baseline needs loops >= 1".into()));
    }
    lm.check_layout(layout)?;
    let e0 = lm.embed(g, tokens)?;
    let mut h = lm.stack(g, e0, layout);
    for _ in 1..loops {
        let x = g.add(e0, h);
        h = lm.stack(g, x, layout);
    }
    Ok(lm.head(g, h))
}

/// Expanded token positions for the pause baseline. Returns the expanded
/// ids (pause slots use `pause_id`) and the scoring position of each
/// original token: the last pause after it, or the token itself when
/// `n_pauses == 0`.
pub fn pause_expand(
    tokens: &[usize],
    n_pauses: usize,
    pause_id: usize,
) -> (Vec<usize>, Vec<usize>) {
    let stride = 1 + n_pauses;
    let mut ids = Vec::with_capacity(tokens.len() * stride);
    let mut scoring = Vec::with_capacity(tokens.len());
    for (j, &t) in tokens.iter().enumerate() {
        ids.push(t);
        ids.extend(std::iter::repeat_n(pause_id, n_pauses));
        scoring.push(j * stride + n_pauses);
    }
    (ids, scoring)
}

/// Graph-level pause forward over the expanded sequence. Returns logits for
/// every expanded position, the expanded layout, and a mask marking the
/// scoring positions.
pub fn pause_logits<F: Real>(
    g: &mut Graph<F>,
    lm: &Lm<'_, F>,
    tokens: &[usize],
    layout: SeqLayout,
    n_pauses: usize,
) -> Result<(Var, SeqLayout, Vec<bool>, Vec<usize>)> {
    let expanded = SeqLayout {
        batch: layout.batch,
        seq_len: layout.seq_len * (1 + n_pauses),
    };
    lm.check_layout(expanded)?;
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    let vocab = lm.config().vocab_size;
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::InvalidToken {
            id: bad,
            vocab_size: vocab,
        });
    }
    let (ids, scoring) = pause_expand(tokens, n_pauses, vocab);
    let x = if n_pauses == 0 {
        g.gather(lm.embedding(), &ids)?
    } else {
        let pause = lm
            .pause()
            .ok_or_else(|| Error::Config("pause baseline requires a pause embedding".into()))?;
        let table = g.concat_rows(lm.embedding(), pause);
        g.gather(table, &ids)?
    };
    let logits = lm.forward(g, x, expanded);
    let mut mask = vec![false; ids.len()];
    for &s in &scoring {
        mask[s] = true;
    }
    Ok((logits, expanded, mask, scoring))
}

/// Graph-level hidden-state feedback, returning logits and the per-step
/// `(E^t, H^t)` states when `capture` is set.
pub fn hidden_feedback_logits<F: Real>(
    g: &mut Graph<F>,
    lm: &Lm<'_, F>,
    tokens: &[usize],
    layout: SeqLayout,
    steps: usize,
    projected: bool,
    mut capture: Option<&mut FeedbackTrace<F>>,
) -> Result<Var> {
    lm.check_layout(layout)?;
    let mut e = lm.embed(g, tokens)?;
    for _ in 0..steps {
        let h = lm.stack(g, e, layout);
        if let Some(c) = capture.as_deref_mut() {
            c.embeddings.push(g.value(e).clone());
            c.hiddens.push(g.value(h).clone());
        }
        let fb = if projected {
            lm.project(g, h)
                .ok_or_else(|| Error::Config("projected feedback requires a projector".into()))?
        } else {
            h
        };
        e = g.add(e, fb);
    }
    let h = lm.stack(g, e, layout);
    if let Some(c) = capture {
        c.embeddings.push(g.value(e).clone());
        c.hiddens.push(g.value(h).clone());
    }
    Ok(lm.head(g, h))
}

/// Embedding states and the final hidden states computed from each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeedbackTrace<F> {
    pub embeddings: Vec<Matrix<F>>,
    pub hiddens: Vec<Matrix<F>>,
}

fn single<F: Real>(tokens: &[usize]) -> Result<SeqLayout> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    Ok(SeqLayout::single(tokens.len()))
}

pub fn looped_forward<F: Real>(
    tokens: &[usize],
    model: &Model<F>,
    loops: usize,
) -> Result<Matrix<F>> {
    let layout = single::<F>(tokens)?;
    let mut g = Graph::new();
    let lm = model.on(&mut g, false);
    let logits = looped_logits(&mut g, &lm, tokens, layout, loops)?;
    logits_to_probs(g.value(logits))
}

/// Probabilities at the original positions plus the scoring mask over the
/// expanded sequence.
pub fn pause_forward<F: Real>(
    tokens: &[usize],
    model: &Model<F>,
    n_pauses: usize,
) -> Result<(Matrix<F>, Vec<bool>)> {
    let layout = single::<F>(tokens)?;
    let mut g = Graph::new();
    let lm = model.on(&mut g, false);
    let (logits, _, mask, scoring) = pause_logits(&mut g, &lm, tokens, layout, n_pauses)?;
    let probs = logits_to_probs(&g.value(logits).select_rows(&scoring))?;
    Ok((probs, mask))
}

pub fn hidden_feedback_forward<F: Real>(
    tokens: &[usize],
    model: &Model<F>,
    steps: usize,
    projected: bool,
) -> Result<(Matrix<F>, FeedbackTrace<F>)> {
    let layout = single::<F>(tokens)?;
    let mut g = Graph::new();
    let lm = model.on(&mut g, false);
    let mut trace = FeedbackTrace::default();
    let logits = hidden_feedback_logits(
        &mut g,
        &lm,
        tokens,
        layout,
        steps,
        projected,
        Some(&mut trace),
    )?;
    Ok((logits_to_probs(g.value(logits))?, trace))
}
