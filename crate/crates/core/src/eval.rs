//! Perplexity, inference-time step sweeps and the per-step case-study tracer.

use serde::{Deserialize, Serialize};

use crate::autograd::{top_k_indices, Graph};
use crate::data::{sequential_batches, TokenShard, Tokenizer};
use crate::error::{Error, Result};
use crate::mechanism::Mechanism;
use crate::model::Model;
use crate::ponder::{ponder_forward, PonderConfig, PonderTrace};
use crate::tensor::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    /// Mean next-token loss in nats.
    pub loss: f64,
    pub ppl: f64,
    /// Number of scored tokens.
    pub tokens: u64,
}

impl Perplexity {
    pub fn from_loss(loss: f64, tokens: u64) -> Self {
        Self {
            loss,
            ppl: loss.exp(),
            tokens,
        }
    }
}

/// `−ln softmax(row)[target]` in f64.
pub fn token_nll<F: Real>(row: &[F], target: usize) -> f64 {
    let max = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = row
        .iter()
        .map(|x| (x.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    lse - row[target].as_f64()
}

/// Sum of per-token losses over the scored rows of `logits`.
fn summed_nll<F: Real>(logits: &Matrix<F>, targets: &[usize], mask: Option<&[bool]>) -> (f64, u64) {
    let mut sum = 0.0;
    let mut n = 0;
    for (r, &t) in targets.iter().enumerate() {
        if mask.is_some_and(|m| !m[r]) {
            continue;
        }
        sum += token_nll(logits.row(r), t);
        n += 1;
    }
    (sum, n)
}

/// Token-weighted mean loss over every non-overlapping window of `shards`.
/// `steps` is the pondering step count; other mechanisms ignore it.
pub fn perplexity<F: Real>(
    model: &Model<F>,
    mechanism: &Mechanism,
    shards: &[TokenShard],
    context_len: usize,
    windows_per_batch: usize,
    steps: usize,
) -> Result<Perplexity> {
    let vocab = model.config.vocab_size;
    for s in shards {
        if s.vocab_size as usize != vocab {
            return Err(Error::Validation(format!(
                "shard vocab size {} does not match checkpoint vocab size {vocab}",
                s.vocab_size
            )));
        }
    }
    mechanism.validate(vocab)?;
    let mut sum = 0.0;
    let mut tokens = 0u64;
    for batch in sequential_batches(shards, context_len, windows_per_batch)? {
        let mut g = Graph::<F>::new();
        let lm = model.on(&mut g, false);
        let obj = mechanism.objective(
            &mut g,
            &lm,
            &batch.inputs,
            &batch.targets,
            batch.layout,
            steps,
        )?;
        let logits = g.value(obj.logits);
        if !logits.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite logits in eval batch {}",
                batch.id
            )));
        }
        let (s, n) = summed_nll(logits, &obj.targets, obj.mask.as_deref());
        sum += s;
        tokens += n;
    }
    Ok(Perplexity::from_loss(sum / tokens as f64, tokens))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub steps: usize,
    pub loss: f64,
    pub ppl: f64,
}

pub const SWEEP_HEADER: &str = "steps,loss,ppl";

/// One perplexity evaluation per entry of `steps_list`.
pub fn step_sweep<F: Real>(
    model: &Model<F>,
    mechanism: &Mechanism,
    shards: &[TokenShard],
    context_len: usize,
    windows_per_batch: usize,
    steps_list: &[usize],
) -> Result<Vec<SweepRow>> {
    if steps_list.is_empty() {
        return Err(Error::EmptyInput("step list"));
    }
    steps_list
        .iter()
        .map(|&steps| {
            let p = perplexity(
                model,
                mechanism,
                shards,
                context_len,
                windows_per_batch,
                steps,
            )?;
            Ok(SweepRow {
                steps,
                loss: p.loss,
                ppl: p.ppl,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.steps, r.loss, r.ppl));
    }
    out
}

/// One cell of the case-study table. `step` indexes the trace: `0..steps`
/// are the pondering distributions `P^0..P^{s−1}`, `steps` is the final one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub step: usize,
    pub rank: usize,
    pub token_id: usize,
    pub token_text: String,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseStudy {
    pub prompt: String,
    pub steps: usize,
    pub display_k: usize,
    pub records: Vec<CaseRecord>,
    pub trace: PonderTrace<f32>,
}

impl CaseStudy {
    pub fn jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    /// Ranks down, steps across.
    pub fn table(&self) -> String {
        let mut header = vec!["".to_string()];
        header.extend((1..=self.steps).map(|s| format!("step {s}")));
        header.push("final".into());
        let mut rows = vec![header];
        for rank in 1..=self.display_k {
            let mut row = vec![format!("rank {rank}")];
            for step in 0..=self.steps {
                let cell = self
                    .records
                    .iter()
                    .find(|r| r.step == step && r.rank == rank)
                    .map(|r| format!("{:?} ({:.2})", r.token_text, r.prob))
                    .unwrap_or_default();
                row.push(cell);
            }
            rows.push(row);
        }
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("prompt: {:?}\n", self.prompt);
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(cells.join(" | ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Run `steps` pondering steps on `prompt` and report the top `display_k`
/// candidates of every distribution at the last prompt position.
pub fn trace_inference(
    model: &Model<f32>,
    tokenizer: &Tokenizer,
    ponder: &PonderConfig,
    prompt: &str,
    steps: usize,
    display_k: usize,
) -> Result<CaseStudy> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    let vocab = model.config.vocab_size;
    if display_k == 0 || display_k > vocab {
        return Err(Error::Config(format!(
            "display_k must lie in [1, {vocab}], got {display_k}"
        )));
    }
    let mut ids: Vec<usize> = tokenizer
        .encode(prompt.as_bytes())
        .into_iter()
        .map(|i| i as usize)
        .collect();
    if ids.len() > model.config.context_len {
        ids.drain(..ids.len() - model.config.context_len);
    }
    let cfg = PonderConfig {
        trace_capture: true,
        ..ponder.clone()
    };
    let (_, trace) = ponder_forward(&ids, model, &cfg, steps)?;
    let trace = trace.expect("trace requested");
    let last = ids.len() - 1;
    let mut records = Vec::new();
    for (step, p) in trace.distributions.iter().enumerate() {
        let row = p.row(last);
        for (rank, id) in top_k_indices(row, display_k).into_iter().enumerate() {
            records.push(CaseRecord {
                step,
                rank: rank + 1,
                token_id: id,
                token_text: tokenizer.token_text(id),
                prob: row[id] as f64,
            });
        }
    }
    Ok(CaseStudy {
        prompt: prompt.to_string(),
        steps,
        display_k,
        records,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::train_bpe;
    use crate::model::{Extras, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(vocab: usize) -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Model::init(
            ModelConfig::new(vocab, 16, 1, 2, 8),
            Extras::default(),
            &mut rng,
        )
        .unwrap()
    }

    fn shard(vocab: u32, n: u32) -> TokenShard {
        TokenShard::new((0..n).map(|i| (i * 7 + i / 3) % vocab).collect(), vocab).unwrap()
    }

    #[test]
    fn trivial_perplexities() {
        assert_eq!(Perplexity::from_loss(0.0, 1).ppl, 1.0);
        assert!((Perplexity::from_loss(4f64.ln(), 1).ppl - 4.0).abs() < 1e-12);
        assert!((token_nll(&[0.0f64; 4], 2) - 4f64.ln()).abs() < 1e-15);
        assert!((token_nll(&[1.0f64, 2.0, 3.0], 2) - 0.4076).abs() < 1e-3);
    }

    #[test]
    fn zero_steps_match_vanilla() {
        let m = model(20);
        let s = [shard(20, 200)];
        let v = perplexity(&m, &Mechanism::Vanilla, &s, 8, 3, 0).unwrap();
        let p = perplexity(
            &m,
            &Mechanism::Ponder(PonderConfig::fixed(3, 20)),
            &s,
            8,
            3,
            0,
        )
        .unwrap();
        assert_eq!(v.tokens, (199 / 8) * 8);
        assert!(((v.loss - p.loss) / v.loss).abs() < 1e-6);
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let m = model(20);
        let s = [shard(30, 100)];
        assert!(matches!(
            perplexity(&m, &Mechanism::Vanilla, &s, 8, 2, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn sweep_rows() {
        let m = model(20);
        let s = [shard(20, 100)];
        let mech = Mechanism::Ponder(PonderConfig::fixed(1, 5));
        let rows = step_sweep(&m, &mech, &s, 8, 4, &[1, 2, 3]).unwrap();
        assert_eq!(rows.len(), 3);
        let single = perplexity(&m, &mech, &s, 8, 4, 1).unwrap();
        assert_eq!(rows[0].loss, single.loss);
        assert_eq!(sweep_csv(&rows).lines().count(), 4);
        assert!(step_sweep(&m, &mech, &s, 8, 4, &[]).is_err());
    }

    #[test]
    fn tracer_rows() {
        let tok = train_bpe(b"the cat sat on the mat and the cat ran", 270).unwrap();
        let m = model(tok.vocab_size());
        let cfg = PonderConfig::fixed(3, 10);
        let cs = trace_inference(&m, &tok, &cfg, "the cat", 3, 1).unwrap();
        assert_eq!(cs.records.len(), 4);
        let cs = trace_inference(&m, &tok, &cfg, "the cat", 2, 5).unwrap();
        for step in 0..=2 {
            let probs: Vec<f64> = cs
                .records
                .iter()
                .filter(|r| r.step == step)
                .map(|r| r.prob)
                .collect();
            assert_eq!(probs.len(), 5);
            assert!(probs.windows(2).all(|w| w[0] >= w[1]));
            assert!(probs.iter().sum::<f64>() <= 1.0 + 1e-6);
        }
        assert_eq!(cs.table().lines().count(), 1 + 1 + 5);
        assert_eq!(cs.jsonl().lines().count(), 15);
        assert!(matches!(
            trace_inference(&m, &tok, &cfg, "", 2, 1),
            Err(Error::EmptyInput(_))
        ));
    }
}
