use std::borrow::Cow;

use crate::gemm::gemm;
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;
const NORM_EPS: f32 = 1e-12;
const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMulNT { x: Var, w: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    /// `y` has `period` rows and is tiled down the rows of `x`.
    AddTiled { x: Var, y: Var },
    /// Row `r` of `x` receives row `r / group` of `y`.
    AddRepeated { x: Var, y: Var, group: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(f32, f32)> },
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Attention { q: Var, k: Var, v: Var, batch: usize, heads: usize, probs: Vec<f32> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Var, Var),
    MeanPool { x: Var, group: usize },
    L2Normalize { x: Var, norms: Vec<f32> },
    ScaleBy { x: Var, s: Var },
    SquaredError { pred: Var, target: Vec<f32>, batch: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    Sum(Var),
}

struct Node<'a> {
    value: Cow<'a, [f32]>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// A tape of matrix operations recorded during one forward pass.
///
/// Leaves may borrow parameter storage for the lifetime `'a`. Operations
/// panic on shape mismatches: shapes are fixed by the model definitions that
/// build the graph, so a mismatch is a programming error.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Cow<'a, [f32]>, rows: usize, cols: usize, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Borrowed parameter leaf; gradients are produced only when `trainable`.
    pub fn param(&mut self, t: &'a Tensor, trainable: bool) -> Var {
        self.push(Cow::Borrowed(t.data()), t.rows(), t.cols(), Op::Leaf, trainable)
    }

    /// Owned leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<f32>, rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "constant: data does not match shape");
        self.push(Cow::Owned(data), rows, cols, Op::Leaf, false)
    }

    /// Owned leaf that receives gradients (useful for input-gradient checks).
    pub fn variable(&mut self, data: Vec<f32>, rows: usize, cols: usize) -> Var {
        assert_eq!(data.len(), rows * cols, "variable: data does not match shape");
        self.push(Cow::Owned(data), rows, cols, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f32 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "scalar: node is not 1x1");
        n.value[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `x · wᵀ` for `x: (n, k)` and `w: (d, k)`.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Var {
        let (n, k) = self.shape(x);
        let (d, k2) = self.shape(w);
        assert_eq!(k, k2, "matmul_nt: inner dimensions differ");
        let mut out = vec![0.0; n * d];
        gemm(n, k, d, 1.0, self.value(x), k, 1, self.value(w), 1, k, 0.0, &mut out, d, 1);
        let rg = self.rg(x) || self.rg(w);
        self.push(Cow::Owned(out), n, d, Op::MatMulNT { x, w }, rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!((r, c), self.shape(b), "elementwise: shapes differ");
        let out: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), r, c, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let (r, c) = self.shape(x);
        let out: Vec<f32> = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(Cow::Owned(out), r, c, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
        })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, Op::Silu(x), |v| v / (1.0 + (-v).exp()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f32::exp)
    }

    /// Adds `y` (with `p` rows) to every block of `p` consecutive rows of `x`.
    /// With `p == 1` this is a bias add.
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Var {
        let (r, c) = self.shape(x);
        let (p, c2) = self.shape(y);
        assert_eq!(c, c2, "add_tiled: widths differ");
        assert!(p > 0 && r % p == 0, "add_tiled: rows not a multiple of period");
        let yv = self.value(y);
        let mut out = self.value(x).to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let src = &yv[(i % p) * c..(i % p + 1) * c];
            for (o, s) in row.iter_mut().zip(src) {
                *o += s;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        self.push(Cow::Owned(out), r, c, Op::AddTiled { x, y }, rg)
    }

    /// Adds row `i / group` of `y` to row `i` of `x`.
    pub fn add_repeated(&mut self, x: Var, y: Var, group: usize) -> Var {
        let (r, c) = self.shape(x);
        let (b, c2) = self.shape(y);
        assert_eq!(c, c2, "add_repeated: widths differ");
        assert_eq!(b * group, r, "add_repeated: group size mismatch");
        let yv = self.value(y);
        let mut out = self.value(x).to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            let j = i / group;
            for (o, s) in row.iter_mut().zip(&yv[j * c..(j + 1) * c]) {
                *o += s;
            }
        }
        let rg = self.rg(x) || self.rg(y);
        self.push(Cow::Owned(out), r, c, Op::AddRepeated { x, y, group }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), (1, c), "layer_norm: beta shape");
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = vec![0.0; r * c];
        let mut stats = Vec::with_capacity(r);
        for (row, orow) in xv.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                orow[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(Cow::Owned(out), r, c, Op::LayerNorm { x, gamma, beta, stats }, rg)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `(batch * tq, d)`, `k` and `v` are `(batch * tk, d)`; queries of
    /// item `b` attend only to keys of item `b`. Heads split `d` evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (rq, d) = self.shape(q);
        let (rk, dk) = self.shape(k);
        assert_eq!(self.shape(v), (rk, dk), "attention: k/v shapes differ");
        assert_eq!(d, dk, "attention: q/k widths differ");
        assert!(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
        assert!(batch > 0 && rq % batch == 0 && rk % batch == 0, "attention: batch mismatch");
        let (tq, tk, hd) = (rq / batch, rk / batch, d / heads);
        let scale = 1.0 / (hd as f32).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; rq * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
                let qo = b * tq * d + h * hd;
                let ko = b * tk * d + h * hd;
                gemm(tq, hd, tk, scale, &qv[qo..], d, 1, &kv[ko..], 1, d, 0.0, p, tk, 1);
                for row in p.chunks_mut(tk) {
                    softmax_in_place(row);
                }
                gemm(tq, tk, hd, 1.0, p, tk, 1, &vv[ko..], d, 1, 0.0, &mut out[qo..], d, 1);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Cow::Owned(out),
            rq,
            d,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows: index {i} out of range {r}");
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        self.push(
            Cow::Owned(out),
            idx.len(),
            c,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ra, c) = self.shape(a);
        let (rb, c2) = self.shape(b);
        assert_eq!(c, c2, "concat_rows: widths differ");
        let mut out = Vec::with_capacity((ra + rb) * c);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Cow::Owned(out), ra + rb, c, Op::ConcatRows(a, b), rg)
    }

    /// Mean over each block of `group` consecutive rows.
    pub fn mean_pool(&mut self, x: Var, group: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(group > 0 && r % group == 0, "mean_pool: rows not a multiple of group");
        let xv = self.value(x);
        let mut out = vec![0.0; r / group * c];
        let inv = 1.0 / group as f32;
        for (i, row) in xv.chunks(c).enumerate() {
            let o = &mut out[(i / group) * c..(i / group + 1) * c];
            for (a, b) in o.iter_mut().zip(row) {
                *a += b * inv;
            }
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), r / group, c, Op::MeanPool { x, group }, rg)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for (row, orow) in xv.chunks(c).zip(out.chunks_mut(c)) {
            let n = (row.iter().map(|v| v * v).sum::<f32>() + NORM_EPS).sqrt();
            for (o, v) in orow.iter_mut().zip(row) {
                *o = v / n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(Cow::Owned(out), r, c, Op::L2Normalize { x, norms }, rg)
    }

    /// Multiplies every element of `x` by the 1x1 node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let (r, c) = self.shape(x);
        let out: Vec<f32> = self.value(x).iter().map(|v| v * sv).collect();
        let rg = self.rg(x) || self.rg(s);
        self.push(Cow::Owned(out), r, c, Op::ScaleBy { x, s }, rg)
    }

    /// `Σ (pred − target)² / batch`: the batch mean of per-item squared norms.
    pub fn squared_error(&mut self, pred: Var, target: Vec<f32>, batch: usize) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len(), "squared_error: size mismatch");
        assert!(batch > 0, "squared_error: empty batch");
        let total: f64 = pv
            .iter()
            .zip(&target)
            .map(|(p, t)| {
                let e = (p - t) as f64;
                e * e
            })
            .sum();
        let rg = self.rg(pred);
        self.push(
            Cow::Owned(vec![(total / batch as f64) as f32]),
            1,
            1,
            Op::SquaredError { pred, target, batch },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `logits: (n, classes)` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, c) = self.shape(logits);
        assert_eq!(n, labels.len(), "cross_entropy: label count");
        assert!(n > 0, "cross_entropy: empty batch");
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0f64;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            assert!(y < c, "cross_entropy: label {y} out of range {c}");
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
            total += (lse - row[y]) as f64;
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        self.push(
            Cow::Owned(vec![(total / n as f64) as f32]),
            1,
            1,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![s as f32]), 1, 1, Op::Sum(x), rg)
    }

    /// Reverse pass from the 1x1 node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward: root must be a scalar");
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        if !self.rg(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> Option<&'g mut Vec<f32>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.node(v).value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node<'a>, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let cols = node.cols;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMulNT { x, w } => {
                let (n, k) = self.shape(x);
                let d = cols;
                if let Some(gx) = self.accum(grads, x) {
                    gemm(n, d, k, 1.0, g, d, 1, self.value(w), k, 1, 1.0, gx, k, 1);
                }
                if let Some(gw) = self.accum(grads, w) {
                    gemm(d, n, k, 1.0, g, 1, d, self.value(x), k, 1, 1.0, gw, k, 1);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.accum(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.accum(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.accum(grads, b) {
                    for (o, v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.accum(grads, a) {
                    for ((o, v), y) in ga.iter_mut().zip(g).zip(self.value(b)) {
                        *o += v * y;
                    }
                }
                if let Some(gb) = self.accum(grads, b) {
                    for ((o, v), x) in gb.iter_mut().zip(g).zip(self.value(a)) {
                        *o += v * x;
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(gx) = self.accum(grads, x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v * s;
                    }
                }
            }
            &Op::AddTiled { x, y } => {
                if let Some(gx) = self.accum(grads, x) {
                    add_into(gx, g);
                }
                let p = self.shape(y).0;
                if let Some(gy) = self.accum(grads, y) {
                    for (i, row) in g.chunks(cols).enumerate() {
                        add_into(&mut gy[(i % p) * cols..(i % p + 1) * cols], row);
                    }
                }
            }
            &Op::AddRepeated { x, y, group } => {
                if let Some(gx) = self.accum(grads, x) {
                    add_into(gx, g);
                }
                if let Some(gy) = self.accum(grads, y) {
                    for (i, row) in g.chunks(cols).enumerate() {
                        let j = i / group;
                        add_into(&mut gy[j * cols..(j + 1) * cols], row);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = self.value(*x);
                let gam = self.value(*gamma);
                if let Some(gb) = self.accum(grads, *beta) {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
                if let Some(gg) = self.accum(grads, *gamma) {
                    for ((row, xr), &(mean, rstd)) in g.chunks(cols).zip(xv.chunks(cols)).zip(stats) {
                        for j in 0..cols {
                            gg[j] += row[j] * (xr[j] - mean) * rstd;
                        }
                    }
                }
                if let Some(gx) = self.accum(grads, *x) {
                    let mut dxhat = vec![0.0; cols];
                    for (((row, xr), gxr), &(mean, rstd)) in g
                        .chunks(cols)
                        .zip(xv.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .zip(stats)
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..cols {
                            dxhat[j] = row[j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * (xr[j] - mean) * rstd;
                        }
                        m1 /= cols as f32;
                        m2 /= cols as f32;
                        for j in 0..cols {
                            let xhat = (xr[j] - mean) * rstd;
                            gxr[j] += rstd * (dxhat[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(gx) = self.accum(grads, x) {
                    for ((o, v), &xv) in gx.iter_mut().zip(g).zip(self.value(x)) {
                        let inner = GELU_C * (xv + 0.044715 * xv * xv * xv);
                        let th = inner.tanh();
                        let d = 0.5 * (1.0 + th)
                            + 0.5 * xv * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                        *o += v * d;
                    }
                }
            }
            &Op::Silu(x) => {
                if let Some(gx) = self.accum(grads, x) {
                    for ((o, v), &xv) in gx.iter_mut().zip(g).zip(self.value(x)) {
                        let s = 1.0 / (1.0 + (-xv).exp());
                        *o += v * s * (1.0 + xv * (1.0 - s));
                    }
                }
            }
            &Op::Exp(x) => {
                if let Some(gx) = self.accum(grads, x) {
                    for ((o, v), y) in gx.iter_mut().zip(g).zip(node.value.iter()) {
                        *o += v * y;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *batch, *heads, probs, g, grads),
            Op::GatherRows { x, idx } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for (row, &i) in g.chunks(cols).zip(idx) {
                        add_into(&mut gx[i * cols..(i + 1) * cols], row);
                    }
                }
            }
            &Op::ConcatRows(a, b) => {
                let na = self.node(a).value.len();
                if let Some(ga) = self.accum(grads, a) {
                    add_into(ga, &g[..na]);
                }
                if let Some(gb) = self.accum(grads, b) {
                    add_into(gb, &g[na..]);
                }
            }
            &Op::MeanPool { x, group } => {
                if let Some(gx) = self.accum(grads, x) {
                    let inv = 1.0 / group as f32;
                    for (i, row) in gx.chunks_mut(cols).enumerate() {
                        let src = &g[(i / group) * cols..(i / group + 1) * cols];
                        for (o, s) in row.iter_mut().zip(src) {
                            *o += s * inv;
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if let Some(gx) = self.accum(grads, *x) {
                    for (((gr, yr), gxr), &n) in g
                        .chunks(cols)
                        .zip(node.value.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                        .zip(norms)
                    {
                        let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gxr[j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            &Op::ScaleBy { x, s } => {
                let sv = self.scalar(s);
                if let Some(gx) = self.accum(grads, x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += v * sv;
                    }
                }
                if let Some(gs) = self.accum(grads, s) {
                    let dot: f64 = g
                        .iter()
                        .zip(self.value(x))
                        .map(|(a, b)| (a * b) as f64)
                        .sum();
                    gs[0] += dot as f32;
                }
            }
            Op::SquaredError { pred, target, batch } => {
                if let Some(gp) = self.accum(grads, *pred) {
                    let c = 2.0 * g[0] / *batch as f32;
                    for ((o, p), t) in gp.iter_mut().zip(self.value(*pred)).zip(target) {
                        *o += c * (p - t);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits).1;
                if let Some(gl) = self.accum(grads, *logits) {
                    let s = g[0] / labels.len() as f32;
                    for ((glr, pr), &y) in gl.chunks_mut(c).zip(probs.chunks(c)).zip(labels) {
                        for j in 0..c {
                            let t = if j == y { 1.0 } else { 0.0 };
                            glr[j] += s * (pr[j] - t);
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.accum(grads, x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (rq, d) = self.shape(q);
        let rk = self.shape(k).0;
        let (tq, tk, hd) = (rq / batch, rk / batch, d / heads);
        let scale = 1.0 / (hd as f32).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let need_q = self.rg(q);
        let need_k = self.rg(k);
        let need_v = self.rg(v);
        let mut gq = if need_q { grads[q.0].take().unwrap_or_else(|| vec![0.0; rq * d]) } else { Vec::new() };
        let mut gk = if need_k { grads[k.0].take().unwrap_or_else(|| vec![0.0; rk * d]) } else { Vec::new() };
        let mut gv = if need_v { grads[v.0].take().unwrap_or_else(|| vec![0.0; rk * d]) } else { Vec::new() };
        let mut dp = vec![0.0; tq * tk];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * tq * tk..(b * heads + h + 1) * tq * tk];
                let qo = b * tq * d + h * hd;
                let ko = b * tk * d + h * hd;
                if need_v {
                    gemm(tk, tq, hd, 1.0, p, 1, tk, &g[qo..], d, 1, 1.0, &mut gv[ko..], d, 1);
                }
                if need_q || need_k {
                    gemm(tq, hd, tk, 1.0, &g[qo..], d, 1, &vv[ko..], 1, d, 0.0, &mut dp, tk, 1);
                    for (dr, pr) in dp.chunks_mut(tk).zip(p.chunks(tk)) {
                        let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                        for (x, &pv) in dr.iter_mut().zip(pr) {
                            *x = pv * (*x - dot);
                        }
                    }
                    if need_q {
                        gemm(tq, tk, hd, scale, &dp, tk, 1, &kv[ko..], d, 1, 1.0, &mut gq[qo..], d, 1);
                    }
                    if need_k {
                        gemm(tk, tq, hd, scale, &dp, 1, tk, &qv[qo..], d, 1, 1.0, &mut gk[ko..], d, 1);
                    }
                }
            }
        }
        // q, k and v may alias the same node; merge rather than overwrite.
        for (var, buf, need) in [(q, gq, need_q), (k, gk, need_k), (v, gv, need_v)] {
            if !need {
                continue;
            }
            match &mut grads[var.0] {
                Some(existing) => add_into(existing, &buf),
                slot @ None => *slot = Some(buf),
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_in_place(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = 1.0 / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
