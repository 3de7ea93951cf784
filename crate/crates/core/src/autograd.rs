//! Tape-based reverse-mode differentiation over row-stacked matrices.
//!
//! Every forward pass (vanilla, pondering, baselines) is recorded on a
//! [`Graph`]; [`Graph::backward`] walks the tape in reverse. Ops are coarse
//! (matmul, layer norm, fused causal attention, top-K mixture, fused
//! cross-entropy) so the tape stays short even for many pondering steps.
//!
//! Batches are stored as `[batch * seq_len, width]` matrices; ops that need
//! sequence structure (rotary, attention) take a [`SeqLayout`].

use crate::error::{Error, Result};
use crate::tensor::{gemm, Matrix, Real, Trans};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How rows of a matrix map onto `(sequence, position)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq_len: usize,
}

impl SeqLayout {
    pub fn single(seq_len: usize) -> Self {
        Self { batch: 1, seq_len }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq_len
    }
}

enum Op<F> {
    Leaf,
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows {
        top: Var,
        bottom: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        tb: Trans,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu {
        x: Var,
    },
    Rope {
        x: Var,
        seq_len: usize,
        heads: usize,
        rot: usize,
        cos: Vec<F>,
        sin: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
        probs: Vec<F>,
    },
    Softmax {
        x: Var,
    },
    TopKMix {
        probs: Var,
        table: Var,
        k: usize,
        renorm: bool,
        idx: Vec<u32>,
        weights: Vec<F>,
        mass: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

struct Node<F> {
    value: Matrix<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recorded computation.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Matrix<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Matrix<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<F>> {
        self.grads[v.0].take()
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Matrix<F>>], v: Var, g: Matrix<F>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Strided GEMM into a sub-view of `c`. Offsets and strides are in elements.
#[allow(clippy::too_many_arguments)]
fn gemm_view<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: (&[F], usize, isize, isize),
    b: (&[F], usize, isize, isize),
    accumulate: bool,
    c: (&mut [F], usize, isize, isize),
) {
    fn span(m: usize, n: usize, off: usize, rs: isize, cs: isize) -> usize {
        off + (m.saturating_sub(1)) * rs as usize + (n.saturating_sub(1)) * cs as usize
    }
    assert!(span(m, k, a.1, a.2, a.3) < a.0.len().max(1) || m * k == 0);
    assert!(span(k, n, b.1, b.2, b.3) < b.0.len().max(1) || k * n == 0);
    assert!(span(m, n, c.1, c.2, c.3) < c.0.len().max(1) || m * n == 0);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the spans asserted above keep every access inside the slices.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.0.as_ptr().add(a.1),
            a.2,
            a.3,
            b.0.as_ptr().add(b.1),
            b.2,
            b.3,
            beta,
            c.0.as_mut_ptr().add(c.1),
            c.2,
            c.3,
        );
    }
}

fn softmax_row_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = F::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Top-`k` indices of `row`, highest value first, ties broken by lower index.
pub fn top_k_indices<F: Real>(row: &[F], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        row[*b]
            .partial_cmp(&row[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let k = k.min(row.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.truncate(k);
    idx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Rotary angle tables for `seq_len` positions over `rot` rotated dims.
pub fn rope_tables<F: Real>(seq_len: usize, rot: usize, base: f64) -> (Vec<F>, Vec<F>) {
    let half = rot / 2;
    let mut cos = Vec::with_capacity(seq_len * half);
    let mut sin = Vec::with_capacity(seq_len * half);
    for pos in 0..seq_len {
        for i in 0..half {
            let inv_freq = base.powf(-(2.0 * i as f64) / rot as f64);
            let theta = pos as f64 * inv_freq;
            cos.push(F::lit(theta.cos()));
            sin.push(F::lit(theta.sin()));
        }
    }
    (cos, sin)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<F> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input or parameter. Gradients are retained for leaves with `needs_grad`.
    pub fn leaf(&mut self, value: Matrix<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Row lookup: output row `j` is `table[ids[j]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n_rows, cols) = t.shape();
        let mut out = Matrix::zeros(ids.len(), cols);
        for (j, &id) in ids.iter().enumerate() {
            if id >= n_rows {
                return Err(Error::InvalidToken {
                    id,
                    vocab_size: n_rows,
                });
            }
            out.row_mut(j).copy_from_slice(t.row(id));
        }
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, top: Var, bottom: Var) -> Var {
        let a = self.value(top);
        let b = self.value(bottom);
        assert_eq!(a.cols(), b.cols(), "concat_rows width");
        let mut data = Vec::with_capacity(a.len() + b.len());
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        let out = Matrix::from_vec(a.rows() + b.rows(), a.cols(), data);
        self.push(out, Op::ConcatRows { top, bottom }, &[top, bottom])
    }

    /// `a · b`, or `a · bᵀ` when `tb == Trans::Yes`.
    pub fn matmul(&mut self, a: Var, b: Var, tb: Trans) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, k) = av.shape();
        let n = match tb {
            Trans::No => {
                assert_eq!(bv.rows(), k, "matmul inner dimension");
                bv.cols()
            }
            Trans::Yes => {
                assert_eq!(bv.cols(), k, "matmul inner dimension");
                bv.rows()
            }
        };
        let mut out = Matrix::zeros(m, n);
        gemm(
            m,
            k,
            n,
            av.data(),
            Trans::No,
            bv.data(),
            tb,
            out.data_mut(),
            false,
        );
        self.push(out, Op::MatMul { a, b, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    /// Adds a `[1×cols]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a single row");
        let mut out = self.value(x).clone();
        assert_eq!(out.cols(), bv.cols(), "bias width");
        let b = bv.data().to_vec();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        assert_eq!(g.len(), cols, "layer norm scale width");
        let mut out = Matrix::zeros(rows, cols);
        let mut xhat = vec![F::zero(); rows * cols];
        let mut rstd = vec![F::zero(); rows];
        let inv_n = F::one() / F::lit(cols as f64);
        let eps = F::lit(eps);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<F>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let xh = &mut xhat[r * cols..(r + 1) * cols];
            let o = out.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * rs;
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = F::lit(GELU_C);
        let a = F::lit(GELU_A);
        let half = F::lit(0.5);
        let data = xv
            .data()
            .iter()
            .map(|&v| half * v * (F::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let out = Matrix::from_vec(xv.rows(), xv.cols(), data);
        self.push(out, Op::Gelu { x }, &[x])
    }

    /// Rotary position embedding on the first `rot` dims of each head.
    /// Position of row `r` is `r % seq_len`.
    pub fn rope(&mut self, x: Var, seq_len: usize, heads: usize, rot: usize, base: f64) -> Var {
        let xv = self.value(x);
        let (rows, d) = xv.shape();
        assert_eq!(d % heads, 0, "width divisible by heads");
        let dh = d / heads;
        assert!(
            rot <= dh && rot % 2 == 0,
            "rotary dims must be even and within head"
        );
        let (cos, sin) = rope_tables::<F>(seq_len, rot, base);
        let half = rot / 2;
        let mut out = xv.clone();
        for r in 0..rows {
            let pos = r % seq_len;
            let cs = &cos[pos * half..(pos + 1) * half];
            let sn = &sin[pos * half..(pos + 1) * half];
            let row = out.row_mut(r);
            for h in 0..heads {
                let base_i = h * dh;
                for i in 0..half {
                    let x1 = row[base_i + i];
                    let x2 = row[base_i + i + half];
                    row[base_i + i] = x1 * cs[i] - x2 * sn[i];
                    row[base_i + i + half] = x2 * cs[i] + x1 * sn[i];
                }
            }
        }
        self.push(
            out,
            Op::Rope {
                x,
                seq_len,
                heads,
                rot,
                cos,
                sin,
            },
            &[x],
        )
    }

    /// Multi-head causal self-attention. `q`, `k`, `v` are `[rows × d]` with
    /// heads packed along columns.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: SeqLayout,
        heads: usize,
    ) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (rows, d) = qv.shape();
        assert_eq!(rows, layout.rows(), "attention layout rows");
        assert_eq!(kv.shape(), (rows, d));
        assert_eq!(vv.shape(), (rows, d));
        let dh = d / heads;
        let l = layout.seq_len;
        let scale = F::one() / F::lit(dh as f64).sqrt();
        let mut probs = vec![F::zero(); layout.batch * heads * l * l];
        let mut out = Matrix::zeros(rows, d);
        let ld = d as isize;
        for b in 0..layout.batch {
            for h in 0..heads {
                let off = b * l * d + h * dh;
                let p_off = (b * heads + h) * l * l;
                // scores = Q_h K_hᵀ
                gemm_view(
                    l,
                    dh,
                    l,
                    scale,
                    (qv.data(), off, ld, 1),
                    (kv.data(), off, 1, ld),
                    false,
                    (&mut probs, p_off, l as isize, 1),
                );
                let block = &mut probs[p_off..p_off + l * l];
                for i in 0..l {
                    let row = &mut block[i * l..(i + 1) * l];
                    softmax_row_in_place(&mut row[..=i]);
                    row[i + 1..].iter_mut().for_each(|x| *x = F::zero());
                }
                gemm_view(
                    l,
                    l,
                    dh,
                    F::one(),
                    (&probs, p_off, l as isize, 1),
                    (vv.data(), off, ld, 1),
                    false,
                    (out.data_mut(), off, ld, 1),
                );
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Row-wise softmax (temperature 1, max-subtracted).
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_row_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Per row: select the `k` most probable indices (ties to lower index),
    /// weight the matching `table` rows by their probabilities (divided by
    /// the selected mass when `renorm`) and sum. Selection is treated as a
    /// constant during backpropagation.
    pub fn top_k_mix(&mut self, probs: Var, table: Var, k: usize, renorm: bool) -> Result<Var> {
        let pv = self.value(probs);
        let tv = self.value(table);
        let (rows, vocab) = pv.shape();
        if k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if k > vocab {
            return Err(Error::Config(format!(
                "top_k {k} exceeds vocabulary {vocab}"
            )));
        }
        if tv.rows() < vocab {
            return Err(Error::Config(format!(
                "embedding table has {} rows, distribution has {vocab}",
                tv.rows()
            )));
        }
        let d = tv.cols();
        let mut out = Matrix::zeros(rows, d);
        let mut idx = Vec::with_capacity(rows * k);
        let mut weights = Vec::with_capacity(rows * k);
        let mut mass = Vec::with_capacity(rows);
        for r in 0..rows {
            let prow = pv.row(r);
            let sel = top_k_indices(prow, k);
            let total = sel.iter().map(|&i| prow[i]).fold(F::zero(), |a, b| a + b);
            if !(total > F::zero()) || !total.is_finite() {
                return Err(Error::Numeric(format!(
                    "selected top-{k} probability mass is {total} at row {r}"
                )));
            }
            let norm = if renorm { total } else { F::one() };
            mass.push(norm);
            let o = out.row_mut(r);
            for &i in &sel {
                let w = prow[i] / norm;
                idx.push(i as u32);
                weights.push(w);
                for (oo, &e) in o.iter_mut().zip(tv.row(i)) {
                    *oo += w * e;
                }
            }
        }
        Ok(self.push(
            out,
            Op::TopKMix {
                probs,
                table,
                k,
                renorm,
                idx,
                weights,
                mass,
            },
            &[probs, table],
        ))
    }

    /// Mean next-token cross-entropy (nats) over unmasked rows, from logits.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = lv.shape();
        if targets.len() != rows {
            return Err(Error::Validation(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(m) = mask {
            if m.len() != rows {
                return Err(Error::Validation(format!(
                    "mask length {} != {rows}",
                    m.len()
                )));
            }
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if mask.is_some_and(|m| !m[r]) {
                continue;
            }
            if t >= vocab {
                return Err(Error::InvalidToken {
                    id: t,
                    vocab_size: vocab,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max).as_f64();
            let sum: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
            total += max + sum.ln() - row[t].as_f64();
            count += 1;
        }
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let loss = Matrix::from_vec(1, 1, vec![F::lit(total / count as f64)]);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        self.backward_with(loss, Matrix::filled(1, 1, F::one()))
    }

    /// Reverse pass seeded with an arbitrary cotangent for `root`.
    pub fn backward_with(&self, root: Var, seed: Matrix<F>) -> Gradients<F> {
        assert_eq!(self.value(root).shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Matrix<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<F>, g: &Matrix<F>, grads: &mut [Option<Matrix<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Gather { table, ids } => {
                if self.wants(*table) {
                    let (n, d) = self.value(*table).shape();
                    let mut gt = Matrix::zeros(n, d);
                    for (j, &id) in ids.iter().enumerate() {
                        for (a, &b) in gt.row_mut(id).iter_mut().zip(g.row(j)) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *table, gt);
                }
            }
            Op::ConcatRows { top, bottom } => {
                let (rt, c) = self.value(*top).shape();
                let rb = self.value(*bottom).rows();
                if self.wants(*top) {
                    accumulate(
                        grads,
                        *top,
                        Matrix::from_vec(rt, c, g.data()[..rt * c].to_vec()),
                    );
                }
                if self.wants(*bottom) {
                    accumulate(
                        grads,
                        *bottom,
                        Matrix::from_vec(rb, c, g.data()[rt * c..].to_vec()),
                    );
                }
            }
            Op::MatMul { a, b, tb } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.shape();
                let n = g.cols();
                if self.wants(*a) {
                    let mut ga = Matrix::zeros(m, k);
                    // da = g · bᵀ (or g · b when b was used transposed)
                    let t = match tb {
                        Trans::No => Trans::Yes,
                        Trans::Yes => Trans::No,
                    };
                    gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        Trans::No,
                        bv.data(),
                        t,
                        ga.data_mut(),
                        false,
                    );
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = match tb {
                        Trans::No => {
                            let mut gb = Matrix::zeros(k, n);
                            gemm(
                                k,
                                m,
                                n,
                                av.data(),
                                Trans::Yes,
                                g.data(),
                                Trans::No,
                                gb.data_mut(),
                                false,
                            );
                            gb
                        }
                        Trans::Yes => {
                            let mut gb = Matrix::zeros(n, k);
                            gemm(
                                n,
                                m,
                                k,
                                g.data(),
                                Trans::Yes,
                                av.data(),
                                Trans::No,
                                gb.data_mut(),
                                false,
                            );
                            gb
                        }
                    };
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow { x, bias } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (a, &b) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = g.shape();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = Matrix::zeros(1, cols);
                    let mut gbeta = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gg.data_mut()[c] += gr[c] * xh[c];
                            gbeta.data_mut()[c] += gr[c];
                        }
                    }
                    if self.wants(*gamma) {
                        accumulate(grads, *gamma, gg);
                    }
                    if self.wants(*beta) {
                        accumulate(grads, *beta, gbeta);
                    }
                }
                if self.wants(*x) {
                    let inv_n = F::one() / F::lit(cols as f64);
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut dxhat = vec![F::zero(); cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gam[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xh[c];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        let o = gx.row_mut(r);
                        for c in 0..cols {
                            o[c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let c = F::lit(GELU_C);
                    let a = F::lit(GELU_A);
                    let half = F::lit(0.5);
                    let three_a = F::lit(3.0 * GELU_A);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| {
                            let t = (c * (v + a * v * v * v)).tanh();
                            let d = half * (F::one() + t)
                                + half * v * (F::one() - t * t) * c * (F::one() + three_a * v * v);
                            gv * d
                        })
                        .collect();
                    accumulate(grads, *x, Matrix::from_vec(xv.rows(), xv.cols(), data));
                }
            }
            Op::Rope {
                x,
                seq_len,
                heads,
                rot,
                cos,
                sin,
            } => {
                if self.wants(*x) {
                    let (rows, d) = g.shape();
                    let dh = d / heads;
                    let half = rot / 2;
                    let mut gx = g.clone();
                    for r in 0..rows {
                        let pos = r % seq_len;
                        let cs = &cos[pos * half..(pos + 1) * half];
                        let sn = &sin[pos * half..(pos + 1) * half];
                        let row = gx.row_mut(r);
                        for h in 0..*heads {
                            let b = h * dh;
                            for i in 0..half {
                                let g1 = row[b + i];
                                let g2 = row[b + i + half];
                                row[b + i] = g1 * cs[i] + g2 * sn[i];
                                row[b + i + half] = g2 * cs[i] - g1 * sn[i];
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                heads,
                probs,
            } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let (rows, d) = qv.shape();
                let dh = d / heads;
                let l = layout.seq_len;
                let ld = d as isize;
                let scale = F::one() / F::lit(dh as f64).sqrt();
                let mut gq = Matrix::zeros(rows, d);
                let mut gk = Matrix::zeros(rows, d);
                let mut gv = Matrix::zeros(rows, d);
                let mut dp = vec![F::zero(); l * l];
                for b in 0..layout.batch {
                    for h in 0..*heads {
                        let off = b * l * d + h * dh;
                        let p_off = (b * heads + h) * l * l;
                        let p = &probs[p_off..p_off + l * l];
                        // dV_h = Pᵀ · dO_h
                        gemm_view(
                            l,
                            l,
                            dh,
                            F::one(),
                            (p, 0, 1, l as isize),
                            (g.data(), off, ld, 1),
                            false,
                            (gv.data_mut(), off, ld, 1),
                        );
                        // dP = dO_h · V_hᵀ
                        gemm_view(
                            l,
                            dh,
                            l,
                            F::one(),
                            (g.data(), off, ld, 1),
                            (vv.data(), off, 1, ld),
                            false,
                            (&mut dp, 0, l as isize, 1),
                        );
                        // dS = P ⊙ (dP − rowsum(P ⊙ dP)), causal part only
                        for i in 0..l {
                            let pr = &p[i * l..(i + 1) * l];
                            let dr = &mut dp[i * l..(i + 1) * l];
                            let dot: F = pr[..=i].iter().zip(&dr[..=i]).map(|(&a, &b)| a * b).sum();
                            for j in 0..=i {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                            dr[i + 1..].iter_mut().for_each(|x| *x = F::zero());
                        }
                        // dQ_h = scale · dS · K_h
                        gemm_view(
                            l,
                            l,
                            dh,
                            scale,
                            (&dp, 0, l as isize, 1),
                            (kv.data(), off, ld, 1),
                            false,
                            (gq.data_mut(), off, ld, 1),
                        );
                        // dK_h = scale · dSᵀ · Q_h
                        gemm_view(
                            l,
                            l,
                            dh,
                            scale,
                            (&dp, 0, 1, l as isize),
                            (qv.data(), off, ld, 1),
                            false,
                            (gk.data_mut(), off, ld, 1),
                        );
                    }
                }
                if self.wants(*q) {
                    accumulate(grads, *q, gq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, gk);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, gv);
                }
            }
            Op::Softmax { x } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &gg) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yy * (gg - dot);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::TopKMix {
                probs,
                table,
                k,
                renorm,
                idx,
                weights,
                mass,
            } => {
                let tv = self.value(*table);
                let (rows, vocab) = self.value(*probs).shape();
                let want_p = self.wants(*probs);
                let want_t = self.wants(*table);
                let mut gp = if want_p {
                    Some(Matrix::zeros(rows, vocab))
                } else {
                    None
                };
                let mut gt = if want_t {
                    Some(Matrix::zeros(tv.rows(), tv.cols()))
                } else {
                    None
                };
                let mut dw = vec![F::zero(); *k];
                for r in 0..rows {
                    let gr = g.row(r);
                    let sel = &idx[r * k..(r + 1) * k];
                    let w = &weights[r * k..(r + 1) * k];
                    if let Some(gt) = gt.as_mut() {
                        for (&i, &wi) in sel.iter().zip(w) {
                            for (a, &b) in gt.row_mut(i as usize).iter_mut().zip(gr) {
                                *a += wi * b;
                            }
                        }
                    }
                    if let Some(gp) = gp.as_mut() {
                        for (slot, &i) in dw.iter_mut().zip(sel) {
                            *slot = tv
                                .row(i as usize)
                                .iter()
                                .zip(gr)
                                .map(|(&a, &b)| a * b)
                                .sum();
                        }
                        let prow = gp.row_mut(r);
                        if *renorm {
                            let wdot: F = w.iter().zip(&dw).map(|(&a, &b)| a * b).sum();
                            for (&i, &d) in sel.iter().zip(&dw) {
                                prow[i as usize] = (d - wdot) / mass[r];
                            }
                        } else {
                            for (&i, &d) in sel.iter().zip(&dw) {
                                prow[i as usize] = d;
                            }
                        }
                    }
                }
                if let Some(gp) = gp {
                    accumulate(grads, *probs, gp);
                }
                if let Some(gt) = gt {
                    accumulate(grads, *table, gt);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
            } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits);
                    let (rows, vocab) = lv.shape();
                    let scale = g.data()[0] / F::lit(*count as f64);
                    let mut gl = Matrix::zeros(rows, vocab);
                    for r in 0..rows {
                        if mask.as_ref().is_some_and(|m| !m[r]) {
                            continue;
                        }
                        let o = gl.row_mut(r);
                        o.copy_from_slice(lv.row(r));
                        softmax_row_in_place(o);
                        o[targets[r]] -= F::one();
                        o.iter_mut().for_each(|x| *x *= scale);
                    }
                    accumulate(grads, *logits, gl);
                }
            }
        }
    }
}
