//! Straight-line float64 reference of the model equations, written against
//! named parameters only. Shared by the oracle, gradient and acceptance tests.
#![allow(dead_code)]

use ponderlm::autograd::{Graph, SeqLayout};
use ponderlm::mechanism::Mechanism;
use ponderlm::model::{BlockStyle, Extras, Model, ModelConfig};
use ponderlm::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix<f64>) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn param(m: &Model<f64>, name: &str) -> Rows {
    rows(
        m.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}")),
    )
}

fn vec_param(m: &Model<f64>, name: &str) -> Vec<f64> {
    param(m, name).remove(0)
}

/// Model whose every tensor (biases and norm parameters included) is random,
/// so no term of the forward can hide behind a zero or a one.
pub fn random_model(cfg: ModelConfig, extras: Extras, seed: u64) -> Model<f64> {
    perturbed_model(cfg, extras, seed, 0.3)
}

pub fn perturbed_model(cfg: ModelConfig, extras: Extras, seed: u64, std: f64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::<f64>::init(cfg, extras, &mut rng).unwrap();
    let noise = Normal::new(0.0, std).unwrap();
    for t in m.params.tensors_mut() {
        for x in t.data_mut() {
            *x += noise.sample(&mut rng);
        }
    }
    m
}

pub fn toy_config(tied: bool) -> ModelConfig {
    let mut cfg = ModelConfig::new(7, 4, 1, 1, 5);
    cfg.rotary_fraction = 0.5;
    cfg.tie_embeddings = tied;
    cfg
}

pub fn random_tokens(rng: &mut impl Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

fn linear(x: &Rows, w: &Rows, b: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            (0..b.len())
                .map(|o| {
                    b[o] + row
                        .iter()
                        .enumerate()
                        .map(|(i, xi)| xi * w[i][o])
                        .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Rows, gamma: &[f64], beta: &[f64], eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / s * gamma[i] + beta[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn rotate(x: &mut Rows, heads: usize, rot: usize) {
    let dh = x[0].len() / heads;
    let half = rot / 2;
    for (pos, row) in x.iter_mut().enumerate() {
        for h in 0..heads {
            for i in 0..half {
                let theta = pos as f64 / 10000f64.powf(2.0 * i as f64 / rot as f64);
                let (a, b) = (row[h * dh + i], row[h * dh + i + half]);
                row[h * dh + i] = a * theta.cos() - b * theta.sin();
                row[h * dh + i + half] = b * theta.cos() + a * theta.sin();
            }
        }
    }
}

fn attention(m: &Model<f64>, l: usize, x: &Rows) -> Rows {
    let cfg = &m.config;
    let p = |s: &str| format!("layers.{l}.attn.{s}");
    let lin = |s: &str| {
        linear(
            x,
            &param(m, &format!("{}.weight", p(s))),
            &vec_param(m, &format!("{}.bias", p(s))),
        )
    };
    let (mut q, mut k, v) = (lin("q"), lin("k"), lin("v"));
    rotate(&mut q, cfg.n_heads, cfg.rotary_dims());
    rotate(&mut k, cfg.n_heads, cfg.rotary_dims());
    let n = x.len();
    let dh = cfg.head_dim();
    let mut ctx = vec![vec![0.0; cfg.d_model]; n];
    for h in 0..cfg.n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..=i)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for (j, wj) in w.iter().enumerate() {
                for c in cols.clone() {
                    ctx[i][c] += wj * v[j][c];
                }
            }
        }
    }
    linear(
        &ctx,
        &param(m, &p("out.weight")),
        &vec_param(m, &p("out.bias")),
    )
}

fn mlp(m: &Model<f64>, l: usize, x: &Rows) -> Rows {
    let p = |s: &str| param(m, &format!("layers.{l}.mlp.{s}"));
    let mut h = linear(x, &p("fc.weight"), &p("fc.bias")[0]);
    h.iter_mut().flatten().for_each(|v| *v = gelu(*v));
    linear(&h, &p("proj.weight"), &p("proj.bias")[0])
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn norm(m: &Model<f64>, name: &str, x: &Rows) -> Rows {
    layer_norm(
        x,
        &vec_param(m, &format!("{name}.weight")),
        &vec_param(m, &format!("{name}.bias")),
        m.config.norm_epsilon,
    )
}

/// Layer stack plus final norm for one sequence.
pub fn stack(m: &Model<f64>, e: &Rows) -> Rows {
    let mut x = e.clone();
    for l in 0..m.config.n_layers {
        let h = norm(m, &format!("layers.{l}.ln1"), &x);
        x = match m.config.block_style {
            BlockStyle::Parallel => add(&x, &add(&attention(m, l, &h), &mlp(m, l, &h))),
            BlockStyle::Sequential => {
                let x1 = add(&x, &attention(m, l, &h));
                let h2 = norm(m, &format!("layers.{l}.ln2"), &x1);
                add(&x1, &mlp(m, l, &h2))
            }
        };
    }
    norm(m, "final_norm", &x)
}

pub fn head(m: &Model<f64>, h: &Rows) -> Rows {
    let embed = param(m, "embed");
    match m.params.get("head.weight") {
        Some(w) => linear(h, &rows(w), &vec![0.0; m.config.vocab_size]),
        None => h
            .iter()
            .map(|row| {
                embed
                    .iter()
                    .map(|e| e.iter().zip(row).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect(),
    }
}

pub fn logits(m: &Model<f64>, e: &Rows) -> Rows {
    head(m, &stack(m, e))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|v| v / s).collect()
}

pub fn gather(table: &Rows, tokens: &[usize]) -> Rows {
    tokens.iter().map(|&t| table[t].clone()).collect()
}

/// Sort the whole row (descending, ties to the lower index), keep `k`,
/// optionally renormalize, and sum the weighted rows in selection order.
pub fn sort_select_mix<F: ponderlm::tensor::Real>(
    p: &[F],
    table: &Matrix<F>,
    k: usize,
    renorm: bool,
) -> Vec<F> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    let sel = &order[..k];
    let total = sel.iter().fold(F::zero(), |acc, &i| acc + p[i]);
    let norm = if renorm { total } else { F::one() };
    let mut out = vec![F::zero(); table.cols()];
    for &i in sel {
        let w = p[i] / norm;
        for (o, &e) in out.iter_mut().zip(table.row(i)) {
            *o += w * e;
        }
    }
    out
}

/// Unrolled pondering chain `E^{t+1} = E^t + Σ_topK p·V`; returns final
/// logits and every embedding state.
pub fn ponder(m: &Model<f64>, tokens: &[usize], steps: usize, k: usize) -> (Rows, Vec<Rows>) {
    let v = m.params.get("embed").unwrap();
    let mut e = gather(&rows(v), tokens);
    let mut states = vec![e.clone()];
    for _ in 0..steps {
        let l = logits(m, &e);
        e = e
            .iter()
            .zip(&l)
            .map(|(row, lr)| {
                let t = sort_select_mix(&softmax(lr), v, k, true);
                row.iter().zip(&t).map(|(a, b)| a + b).collect()
            })
            .collect();
        states.push(e.clone());
    }
    (logits(m, &e), states)
}

pub fn max_rel_err(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

pub fn max_abs_err(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// A fixed batch for gradient checks.
pub struct GradCase {
    pub inputs: &'static [usize],
    pub targets: &'static [usize],
    pub layout: SeqLayout,
}

fn case_loss(m: &Model<f64>, mech: &Mechanism, case: &GradCase) -> f64 {
    let mut g = Graph::new();
    let lm = m.on(&mut g, false);
    let l = mech
        .loss(
            &mut g,
            &lm,
            case.inputs,
            case.targets,
            case.layout,
            mech.default_eval_steps(),
        )
        .unwrap();
    g.value(l).get(0, 0)
}

/// Reverse-mode gradients in parameter order; tensors the mechanism never
/// touches get zeros.
pub fn analytic_gradients(m: &Model<f64>, mech: &Mechanism, case: &GradCase) -> Vec<Matrix<f64>> {
    let mut g = Graph::new();
    let lm = m.on(&mut g, true);
    let l = mech
        .loss(
            &mut g,
            &lm,
            case.inputs,
            case.targets,
            case.layout,
            mech.default_eval_steps(),
        )
        .unwrap();
    let grads = g.backward(l);
    lm.vars()
        .iter()
        .zip(m.params.tensors())
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(t.rows(), t.cols()))
        })
        .collect()
}

/// Relative error of each parameter tensor against central differences,
/// `|a - n| / max(|a|, |n|)` in the L2 norm over the tensor.
pub fn gradient_errors(
    m: &Model<f64>,
    mech: &Mechanism,
    case: &GradCase,
    eps: f64,
) -> Vec<(String, f64)> {
    let grads = analytic_gradients(m, mech, case);
    let mut out = Vec::new();
    for (idx, name) in m.params.names().iter().enumerate() {
        let mut numeric = vec![0.0; grads[idx].len()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut plus = m.clone();
            plus.params.tensors_mut()[idx].data_mut()[i] += eps;
            let mut minus = m.clone();
            minus.params.tensors_mut()[idx].data_mut()[i] -= eps;
            *n = (case_loss(&plus, mech, case) - case_loss(&minus, mech, case)) / (2.0 * eps);
        }
        let a = grads[idx].data();
        let diff: f64 = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push((name.clone(), diff / na.max(nn).max(1e-12)));
    }
    out
}
