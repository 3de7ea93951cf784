//! Which forward a run trains and evaluates with, and the loss objective it
//! produces. Every mechanism ends in next-token cross-entropy on its final
//! output only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SeqLayout, Var};
use crate::baselines::{hidden_feedback_logits, looped_logits, pause_logits, BaselineKind};
use crate::error::Result;
use crate::model::{Extras, Lm};
use crate::ponder::{ponder_logits, sample_steps, PonderConfig};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Mechanism {
    Vanilla,
    Ponder(PonderConfig),
    Baseline(BaselineKind),
}

/// Logits plus the targets and mask the loss is taken over.
pub struct Objective {
    pub logits: Var,
    pub targets: Vec<usize>,
    pub mask: Option<Vec<bool>>,
}

impl Mechanism {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self {
            Mechanism::Vanilla => Ok(()),
            Mechanism::Ponder(p) => p.validate(vocab_size),
            Mechanism::Baseline(b) => b.validate(),
        }
    }

    pub fn extras(&self) -> Extras {
        match self {
            Mechanism::Baseline(b) => b.extras(),
            _ => Extras::default(),
        }
    }

    /// Context the model needs for windows of `seq_len` original tokens.
    pub fn required_context(&self, seq_len: usize) -> usize {
        match self {
            Mechanism::Baseline(b) => seq_len * b.expansion(),
            _ => seq_len,
        }
    }

    /// Pondering steps for the next batch; 0 for mechanisms without a schedule.
    pub fn resolve_steps<R: Rng>(&self, rng: &mut R) -> usize {
        match self {
            Mechanism::Ponder(p) => sample_steps(&p.schedule, rng),
            _ => 0,
        }
    }

    /// Step count used at evaluation time when none is requested.
    pub fn default_eval_steps(&self) -> usize {
        match self {
            Mechanism::Ponder(p) => p.schedule.max_steps(),
            _ => 0,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Mechanism::Vanilla => "vanilla".into(),
            Mechanism::Ponder(p) => format!("ponder(k={})", p.top_k),
            Mechanism::Baseline(BaselineKind::Looped { loops }) => format!("looped({loops})"),
            Mechanism::Baseline(BaselineKind::Pause { n_pauses }) => format!("pause({n_pauses})"),
            Mechanism::Baseline(BaselineKind::HiddenFeedback { steps, projected }) => {
                if *projected {
                    format!("projected_hidden({steps})")
                } else {
                    format!("hidden({steps})")
                }
            }
        }
    }

    /// Record the forward for `inputs`/`targets` (row-stacked per `layout`).
    /// `ponder_steps` is only consulted by the pondering mechanism.
    pub fn objective<F: Real>(
        &self,
        g: &mut Graph<F>,
        lm: &Lm<'_, F>,
        inputs: &[usize],
        targets: &[usize],
        layout: SeqLayout,
        ponder_steps: usize,
    ) -> Result<Objective> {
        let plain = |logits| Objective {
            logits,
            targets: targets.to_vec(),
            mask: None,
        };
        Ok(match self {
            Mechanism::Vanilla => {
                lm.check_layout(layout)?;
                let e = lm.embed(g, inputs)?;
                plain(lm.forward(g, e, layout))
            }
            Mechanism::Ponder(p) => plain(ponder_logits(
                g,
                lm,
                inputs,
                layout,
                p.top_k,
                p.renormalize_topk,
                ponder_steps,
                None,
            )?),
            Mechanism::Baseline(BaselineKind::Looped { loops }) => {
                plain(looped_logits(g, lm, inputs, layout, *loops)?)
            }
            Mechanism::Baseline(BaselineKind::HiddenFeedback { steps, projected }) => plain(
                hidden_feedback_logits(g, lm, inputs, layout, *steps, *projected, None)?,
            ),
            Mechanism::Baseline(BaselineKind::Pause { n_pauses }) => {
                let (logits, _, mask, scoring) = pause_logits(g, lm, inputs, layout, *n_pauses)?;
                let mut expanded_targets = vec![0usize; mask.len()];
                for (&pos, &t) in scoring.iter().zip(targets) {
                    expanded_targets[pos] = t;
                }
                Objective {
                    logits,
                    targets: expanded_targets,
                    mask: Some(mask),
                }
            }
        })
    }

    /// Mean cross-entropy of the objective.
    pub fn loss<F: Real>(
        &self,
        g: &mut Graph<F>,
        lm: &Lm<'_, F>,
        inputs: &[usize],
        targets: &[usize],
        layout: SeqLayout,
        ponder_steps: usize,
    ) -> Result<Var> {
        let obj = self.objective(g, lm, inputs, targets, layout, ponder_steps)?;
        g.cross_entropy(obj.logits, &obj.targets, obj.mask.as_deref())
    }
}
