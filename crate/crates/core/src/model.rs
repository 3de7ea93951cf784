//! Decoder-only transformer over input embeddings.
//!
//! The language model is split into three pieces so the pondering loop and
//! the baselines can re-enter it at the embedding level:
//! [`Lm::embed`] (token lookup), [`Lm::stack`] (blocks plus final norm,
//! producing hidden states) and [`Lm::head`] (hidden states to logits).

use std::marker::PhantomData;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SeqLayout, Var};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real, Trans};

pub const ROPE_BASE: f64 = 10_000.0;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockStyle {
    /// `x + Attn(norm(x)) + Mlp(norm(x))` with one shared input norm.
    Parallel,
    /// `x + Attn(norm1(x))`, then `+ Mlp(norm2(·))`.
    Sequential,
}

fn default_block_style() -> BlockStyle {
    BlockStyle::Parallel
}
fn default_rotary_fraction() -> f64 {
    0.25
}
fn default_mlp_ratio() -> f64 {
    4.0
}
fn default_norm_epsilon() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    #[serde(default = "default_block_style")]
    pub block_style: BlockStyle,
    #[serde(default = "default_rotary_fraction")]
    pub rotary_fraction: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default = "default_norm_epsilon")]
    pub norm_epsilon: f64,
}

impl ModelConfig {
    /// Config with the Pythia-style defaults for every optional field.
    pub fn new(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        context_len: usize,
    ) -> Self {
        Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            context_len,
            block_style: default_block_style(),
            rotary_fraction: default_rotary_fraction(),
            tie_embeddings: false,
            mlp_ratio: default_mlp_ratio(),
            norm_epsilon: default_norm_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.context_len < 2 {
            return bad(format!(
                "context_len must be >= 2, got {}",
                self.context_len
            ));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 {
            return bad("d_model, n_layers and n_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.rotary_fraction > 0.0 && self.rotary_fraction <= 1.0) {
            return bad(format!(
                "rotary_fraction must be in (0, 1], got {}",
                self.rotary_fraction
            ));
        }
        let rot = self.rotary_fraction * self.head_dim() as f64;
        if (rot - rot.round()).abs() > 1e-9 || rot.round() as usize % 2 != 0 || rot.round() < 2.0 {
            return bad(format!(
                "rotary_fraction * head_dim = {rot} must be an even integer"
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            ));
        }
        if !(self.norm_epsilon > 0.0) {
            return bad(format!(
                "norm_epsilon must be positive, got {}",
                self.norm_epsilon
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn rotary_dims(&self) -> usize {
        (self.rotary_fraction * self.head_dim() as f64).round() as usize
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.d_model as f64).round() as usize
    }
}

/// Optional tensors required by some mechanisms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Extras {
    /// Learnable pause embedding (one extra row beside the vocabulary).
    pub pause: bool,
    /// `d_model × d_model` projector for projected hidden-state feedback.
    pub projector: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Norm {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct LayerSlots {
    ln1: Norm,
    ln2: Option<Norm>,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    fc: Linear,
    proj: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Slots {
    embed: usize,
    head: Option<usize>,
    layers: Vec<LayerSlots>,
    final_norm: Norm,
    pause: Option<usize>,
    projector: Option<Linear>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Expected parameter inventory for a config: `(name, rows, cols, init)`.
fn inventory(cfg: &ModelConfig, extras: Extras) -> Vec<(String, usize, usize, Init)> {
    let d = cfg.d_model;
    let h = cfg.mlp_hidden();
    let mut v = vec![("embed".to_string(), cfg.vocab_size, d, Init::Normal)];
    let norm = |v: &mut Vec<_>, name: String| {
        v.push((format!("{name}.weight"), 1, d, Init::Ones));
        v.push((format!("{name}.bias"), 1, d, Init::Zeros));
    };
    let linear = |v: &mut Vec<_>, name: String, i: usize, o: usize| {
        v.push((format!("{name}.weight"), i, o, Init::Normal));
        v.push((format!("{name}.bias"), 1, o, Init::Zeros));
    };
    for l in 0..cfg.n_layers {
        norm(&mut v, format!("layers.{l}.ln1"));
        if cfg.block_style == BlockStyle::Sequential {
            norm(&mut v, format!("layers.{l}.ln2"));
        }
        for p in ["q", "k", "v", "out"] {
            linear(&mut v, format!("layers.{l}.attn.{p}"), d, d);
        }
        linear(&mut v, format!("layers.{l}.mlp.fc"), d, h);
        linear(&mut v, format!("layers.{l}.mlp.proj"), h, d);
    }
    norm(&mut v, "final_norm".into());
    if !cfg.tie_embeddings {
        v.push(("head.weight".into(), d, cfg.vocab_size, Init::Normal));
    }
    if extras.pause {
        v.push(("pause".into(), 1, d, Init::Normal));
    }
    if extras.projector {
        linear(&mut v, "projector".into(), d, d);
    }
    v
}

/// Named learnable tensors of a model. With tied embeddings there is no
/// separate output head: the head is the embedding matrix used transposed,
/// so the two can never diverge.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<F> {
    names: Vec<String>,
    tensors: Vec<Matrix<F>>,
    slots: Slots,
}

impl<F: Real> Parameters<F> {
    /// Fresh initialization: normal(0, 0.02) matrices, zero biases, unit norm scales.
    pub fn init<R: Rng>(cfg: &ModelConfig, extras: Extras, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, rows, cols, init) in inventory(cfg, extras) {
            let t = match init {
                Init::Normal => Matrix::from_vec(
                    rows,
                    cols,
                    (0..rows * cols)
                        .map(|_| F::lit(normal.sample(rng)))
                        .collect(),
                ),
                Init::Zeros => Matrix::zeros(rows, cols),
                Init::Ones => Matrix::filled(rows, cols, F::one()),
            };
            names.push(name);
            tensors.push(t);
        }
        Self::from_named(cfg, names.into_iter().zip(tensors).collect())
    }

    /// Assemble from named tensors, checking the inventory against `cfg`.
    /// Extras are detected from the names present.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Matrix<F>)>) -> Result<Self> {
        cfg.validate()?;
        let has = |n: &str| named.iter().any(|(k, _)| k == n);
        let extras = Extras {
            pause: has("pause"),
            projector: has("projector.weight"),
        };
        let expected = inventory(cfg, extras);
        let mut problems = Vec::new();
        for (name, rows, cols, _) in &expected {
            match named.iter().find(|(k, _)| k == name) {
                None => problems.push(format!("{name} (missing)")),
                Some((_, t)) if t.shape() != (*rows, *cols) => problems.push(format!(
                    "{name} (have {}x{}, want {rows}x{cols})",
                    t.rows(),
                    t.cols()
                )),
                Some((_, t)) if !t.all_finite() => problems.push(format!("{name} (non-finite)")),
                _ => {}
            }
        }
        for (k, _) in &named {
            if !expected.iter().any(|(n, ..)| n == k) {
                problems.push(format!("{k} (unexpected)"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Incompatible(problems));
        }
        let mut names = Vec::with_capacity(expected.len());
        let mut tensors = Vec::with_capacity(expected.len());
        let mut named = named;
        for (name, ..) in &expected {
            let pos = named.iter().position(|(k, _)| k == name).expect("checked");
            let (k, t) = named.swap_remove(pos);
            names.push(k);
            tensors.push(t);
        }
        let find = |n: &str| names.iter().position(|k| k == n);
        let norm = |p: &str| Norm {
            weight: find(&format!("{p}.weight")).expect("inventory"),
            bias: find(&format!("{p}.bias")).expect("inventory"),
        };
        let linear = |p: &str| Linear {
            weight: find(&format!("{p}.weight")).expect("inventory"),
            bias: find(&format!("{p}.bias")).expect("inventory"),
        };
        let layers = (0..cfg.n_layers)
            .map(|l| LayerSlots {
                ln1: norm(&format!("layers.{l}.ln1")),
                ln2: (cfg.block_style == BlockStyle::Sequential)
                    .then(|| norm(&format!("layers.{l}.ln2"))),
                q: linear(&format!("layers.{l}.attn.q")),
                k: linear(&format!("layers.{l}.attn.k")),
                v: linear(&format!("layers.{l}.attn.v")),
                out: linear(&format!("layers.{l}.attn.out")),
                fc: linear(&format!("layers.{l}.mlp.fc")),
                proj: linear(&format!("layers.{l}.mlp.proj")),
            })
            .collect();
        let slots = Slots {
            embed: find("embed").expect("inventory"),
            head: find("head.weight"),
            layers,
            final_norm: norm("final_norm"),
            pause: find("pause"),
            projector: extras.projector.then(|| linear("projector")),
        };
        Ok(Self {
            names,
            tensors,
            slots,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<F>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix<F>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &mut self.tensors[i])
    }

    pub fn extras(&self) -> Extras {
        Extras {
            pause: self.slots.pause.is_some(),
            projector: self.slots.projector.is_some(),
        }
    }

    /// Input embedding matrix `[vocab × d_model]`.
    pub fn input_embedding(&self) -> &Matrix<F> {
        &self.tensors[self.slots.embed]
    }

    /// Output head `[d_model × vocab]`; the transposed embedding when tied.
    pub fn output_head(&self) -> Matrix<F> {
        match self.slots.head {
            Some(i) => self.tensors[i].clone(),
            None => self.input_embedding().transpose(),
        }
    }

    pub fn is_tied(&self) -> bool {
        self.slots.head.is_none()
    }

    /// Whether decoupled weight decay applies: matrices only (norm scales,
    /// biases and the pause row are single-row tensors).
    pub fn decays(&self, index: usize) -> bool {
        self.tensors[index].rows() > 1
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::all_finite)
    }

    pub fn cast<G: Real>(&self) -> Parameters<G> {
        Parameters {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Matrix::cast).collect(),
            slots: self.slots.clone(),
        }
    }

    /// Put every tensor on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<F>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| graph.leaf(t.clone(), trainable))
            .collect()
    }

    /// Add the tensors a mechanism needs that are not present yet.
    pub fn with_extras<R: Rng>(
        mut self,
        cfg: &ModelConfig,
        extras: Extras,
        rng: &mut R,
    ) -> Result<Self> {
        let want = Extras {
            pause: extras.pause || self.extras().pause,
            projector: extras.projector || self.extras().projector,
        };
        if want == self.extras() {
            return Ok(self);
        }
        let fresh = Parameters::<F>::init(cfg, want, rng)?;
        let mut named: Vec<(String, Matrix<F>)> =
            self.names.drain(..).zip(self.tensors.drain(..)).collect();
        for (n, t) in fresh.names.into_iter().zip(fresh.tensors) {
            if !named.iter().any(|(k, _)| *k == n) {
                named.push((n, t));
            }
        }
        Parameters::from_named(cfg, named)
    }
}

/// A config with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: Parameters<F>,
}

impl<F: Real> Model<F> {
    pub fn init<R: Rng>(config: ModelConfig, extras: Extras, rng: &mut R) -> Result<Self> {
        let params = Parameters::init(&config, extras, rng)?;
        Ok(Self { config, params })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Bind parameters onto `graph` and return a view for building forwards.
    pub fn on<'a>(&'a self, graph: &mut Graph<F>, trainable: bool) -> Lm<'a, F> {
        let vars = self.params.bind(graph, trainable);
        Lm {
            config: &self.config,
            slots: &self.params.slots,
            vars,
            _real: PhantomData,
        }
    }
}

/// Parameters bound to a graph.
pub struct Lm<'a, F> {
    config: &'a ModelConfig,
    slots: &'a Slots,
    vars: Vec<Var>,
    _real: PhantomData<fn() -> F>,
}

impl<F: Real> Lm<'_, F> {
    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    /// Leaf handles in [`Parameters::names`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn embedding(&self) -> Var {
        self.vars[self.slots.embed]
    }

    pub fn pause(&self) -> Option<Var> {
        self.slots.pause.map(|i| self.vars[i])
    }

    pub fn check_layout(&self, layout: SeqLayout) -> Result<()> {
        if layout.seq_len == 0 || layout.batch == 0 {
            return Err(Error::EmptyInput("sequence"));
        }
        if layout.seq_len > self.config.context_len {
            return Err(Error::Length {
                len: layout.seq_len,
                context_len: self.config.context_len,
            });
        }
        Ok(())
    }

    /// Token lookup into the input embedding.
    pub fn embed(&self, g: &mut Graph<F>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence"));
        }
        g.gather(self.embedding(), tokens)
    }

    fn linear(&self, g: &mut Graph<F>, x: Var, l: Linear) -> Var {
        let y = g.matmul(x, self.vars[l.weight], Trans::No);
        g.add_row(y, self.vars[l.bias])
    }

    fn norm(&self, g: &mut Graph<F>, x: Var, n: Norm) -> Var {
        g.layer_norm(
            x,
            self.vars[n.weight],
            self.vars[n.bias],
            self.config.norm_epsilon,
        )
    }

    fn attention(&self, g: &mut Graph<F>, x: Var, s: &LayerSlots, layout: SeqLayout) -> Var {
        let c = self.config;
        let q = self.linear(g, x, s.q);
        let k = self.linear(g, x, s.k);
        let v = self.linear(g, x, s.v);
        let q = g.rope(q, layout.seq_len, c.n_heads, c.rotary_dims(), ROPE_BASE);
        let k = g.rope(k, layout.seq_len, c.n_heads, c.rotary_dims(), ROPE_BASE);
        let o = g.causal_attention(q, k, v, layout, c.n_heads);
        self.linear(g, o, s.out)
    }

    fn mlp(&self, g: &mut Graph<F>, x: Var, s: &LayerSlots) -> Var {
        let h = self.linear(g, x, s.fc);
        let h = g.gelu(h);
        self.linear(g, h, s.proj)
    }

    /// Transformer blocks followed by the final norm: input embeddings to
    /// final hidden states, `[rows × d_model]`.
    pub fn stack(&self, g: &mut Graph<F>, x: Var, layout: SeqLayout) -> Var {
        let mut x = x;
        for s in &self.slots.layers {
            x = match self.config.block_style {
                BlockStyle::Parallel => {
                    let h = self.norm(g, x, s.ln1);
                    let a = self.attention(g, h, s, layout);
                    let m = self.mlp(g, h, s);
                    let am = g.add(a, m);
                    g.add(x, am)
                }
                BlockStyle::Sequential => {
                    let h = self.norm(g, x, s.ln1);
                    let a = self.attention(g, h, s, layout);
                    let x = g.add(x, a);
                    let h = self.norm(g, x, s.ln2.expect("sequential block has ln2"));
                    let m = self.mlp(g, h, s);
                    g.add(x, m)
                }
            };
        }
        self.norm(g, x, self.slots.final_norm)
    }

    /// Hidden states to vocabulary logits.
    pub fn head(&self, g: &mut Graph<F>, h: Var) -> Var {
        match self.slots.head {
            Some(i) => g.matmul(h, self.vars[i], Trans::No),
            None => g.matmul(h, self.embedding(), Trans::Yes),
        }
    }

    pub fn project(&self, g: &mut Graph<F>, h: Var) -> Option<Var> {
        self.slots.projector.map(|p| self.linear(g, h, p))
    }

    /// Full LM forward from input embeddings to logits.
    pub fn forward(&self, g: &mut Graph<F>, x: Var, layout: SeqLayout) -> Var {
        let h = self.stack(g, x, layout);
        self.head(g, h)
    }
}

/// Row `j` of the result is row `tokens[j]` of the input embedding.
pub fn embed_tokens<F: Real>(model: &Model<F>, tokens: &[usize]) -> Result<Matrix<F>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("token sequence"));
    }
    if tokens.len() > model.config.context_len {
        return Err(Error::Length {
            len: tokens.len(),
            context_len: model.config.context_len,
        });
    }
    let v = model.params.input_embedding();
    let mut out = Matrix::zeros(tokens.len(), v.cols());
    for (j, &t) in tokens.iter().enumerate() {
        if t >= v.rows() {
            return Err(Error::InvalidToken {
                id: t,
                vocab_size: v.rows(),
            });
        }
        out.row_mut(j).copy_from_slice(v.row(t));
    }
    Ok(out)
}

/// Logits `[n × vocab]` for one sequence of input embeddings.
pub fn lm_forward<F: Real>(model: &Model<F>, embeddings: &Matrix<F>) -> Result<Matrix<F>> {
    lm_forward_batch(model, embeddings, SeqLayout::single(embeddings.rows()))
}

/// Logits for a row-stacked batch of input embeddings.
pub fn lm_forward_batch<F: Real>(
    model: &Model<F>,
    embeddings: &Matrix<F>,
    layout: SeqLayout,
) -> Result<Matrix<F>> {
    if embeddings.cols() != model.config.d_model {
        return Err(Error::Validation(format!(
            "embedding width {} != d_model {}",
            embeddings.cols(),
            model.config.d_model
        )));
    }
    if embeddings.rows() != layout.rows() {
        return Err(Error::Validation(
            "embedding rows do not match layout".into(),
        ));
    }
    if !embeddings.all_finite() {
        return Err(Error::Numeric("non-finite input embeddings".into()));
    }
    let mut g = Graph::new();
    let lm = model.on(&mut g, false);
    lm.check_layout(layout)?;
    let x = g.leaf(embeddings.clone(), false);
    let logits = lm.forward(&mut g, x, layout);
    let out = g.value(logits).clone();
    if !out.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(out)
}

/// Row-wise softmax with max subtraction.
pub fn logits_to_probs<F: Real>(logits: &Matrix<F>) -> Result<Matrix<F>> {
    if !logits.all_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(tie: bool, style: BlockStyle) -> Model<f64> {
        let mut cfg = ModelConfig::new(7, 4, 1, 1, 5);
        cfg.rotary_fraction = 0.5;
        cfg.tie_embeddings = tie;
        cfg.block_style = style;
        Model::init(cfg, Extras::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new(10, 8, 1, 3, 4);
        assert!(c.validate().is_err(), "8 not divisible by 3");
        c.n_heads = 2;
        c.rotary_fraction = 0.25; // 0.25 * 4 = 1, odd
        assert!(c.validate().is_err());
        c.rotary_fraction = 0.5;
        assert!(c.validate().is_ok());
        c.vocab_size = 1;
        assert!(c.validate().is_err());
        c.vocab_size = 2;
        c.context_len = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embed_lookup_and_errors() {
        let mut m = toy(false, BlockStyle::Parallel);
        m.params
            .get_mut("embed")
            .unwrap()
            .row_mut(2)
            .copy_from_slice(&[0.1, -0.3, 0.0, 0.0]);
        let e = embed_tokens(&m, &[2]).unwrap();
        assert_eq!(e.row(0), &[0.1, -0.3, 0.0, 0.0]);
        let e = embed_tokens(&m, &[0, 0]).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert_eq!(e.row(0), m.params.input_embedding().row(0));
        assert!(matches!(
            embed_tokens(&m, &[7]),
            Err(Error::InvalidToken { id: 7, .. })
        ));
        assert!(matches!(embed_tokens(&m, &[]), Err(Error::EmptyInput(_))));
        assert!(matches!(
            embed_tokens(&m, &[0; 6]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn forward_errors() {
        let m = toy(false, BlockStyle::Parallel);
        let mut e = embed_tokens(&m, &[1, 2]).unwrap();
        e.set(0, 0, f64::NAN);
        assert!(matches!(lm_forward(&m, &e), Err(Error::Numeric(_))));
        let long = Matrix::zeros(6, 4);
        assert!(matches!(lm_forward(&m, &long), Err(Error::Length { .. })));
    }

    #[test]
    fn forward_is_causal_and_deterministic() {
        for style in [BlockStyle::Parallel, BlockStyle::Sequential] {
            let m = toy(true, style);
            let e = embed_tokens(&m, &[1, 4, 2, 6, 0]).unwrap();
            let base = lm_forward(&m, &e).unwrap();
            assert_eq!(base, lm_forward(&m, &e).unwrap());
            for k in 0..5 {
                let mut p = e.clone();
                p.row_mut(k).iter_mut().for_each(|x| *x += 0.5);
                let out = lm_forward(&m, &p).unwrap();
                for j in 0..k {
                    assert_eq!(
                        out.row(j),
                        base.row(j),
                        "position {j} changed when perturbing {k}"
                    );
                }
                assert_ne!(out.row(k), base.row(k));
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let p = logits_to_probs(&Matrix::from_rows(&[vec![0.0f64, 0.0]])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = logits_to_probs(&Matrix::from_rows(&[vec![1000.0f64, 0.0, 0.0]])).unwrap();
        assert!((p.get(0, 0) - 1.0).abs() < 1e-12 && p.all_finite());
        let p = logits_to_probs(&Matrix::from_rows(&[vec![1.0f64, 2.0, 3.0]])).unwrap();
        for (got, want) in p.data().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((got - want).abs() < 1e-4);
        }
        assert!(logits_to_probs(&Matrix::from_rows(&[vec![f64::INFINITY, 0.0]])).is_err());
    }

    #[test]
    fn tied_head_is_embedding_transpose() {
        let m = toy(true, BlockStyle::Parallel);
        assert!(m.params.is_tied());
        assert!(m.params.get("head.weight").is_none());
        assert_eq!(
            m.params.output_head(),
            m.params.input_embedding().transpose()
        );
    }

    #[test]
    fn from_named_reports_mismatches() {
        let m = toy(false, BlockStyle::Parallel);
        let mut named: Vec<_> = m
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        named.retain(|(n, _)| n != "final_norm.bias");
        named[0].1 = Matrix::zeros(3, 3);
        let err = Parameters::from_named(&m.config, named).unwrap_err();
        let Error::Incompatible(list) = err else {
            panic!("wrong error")
        };
        assert!(list.iter().any(|s| s.starts_with("embed")));
        assert!(list.iter().any(|s| s.starts_with("final_norm.bias")));
    }
}
