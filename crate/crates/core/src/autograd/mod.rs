//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation eagerly: values are available as soon as an
//! op is pushed, and [`Graph::backward`] walks the tape in reverse. Nodes only carry
//! gradients when some input was created with `requires_grad`, so frozen parameters
//! cost nothing during the backward pass.

pub mod kernels;

use std::sync::Arc;

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use kernels::{mm_nn, mm_nt, mm_tn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Which keys every query may attend to in a `[batch·heads, queries, keys]` score tensor.
#[derive(Clone, Debug)]
pub struct AttnMask {
    /// `[batch, keys]`, `true` for attendable positions.
    pub key_valid: Vec<bool>,
    pub batch: usize,
    pub keys: usize,
    pub heads: usize,
    /// When set, query `i` may only see keys `j <= i + offset`.
    pub causal_offset: Option<usize>,
}

impl AttnMask {
    fn allowed(&self, b: usize, q: usize, k: usize) -> bool {
        if !self.key_valid[b * self.keys + k] {
            return false;
        }
        match self.causal_offset {
            Some(off) => k <= q + off,
            None => true,
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Abs(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    MaskedSoftmax { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    WeightedPool { x: Var, weights: Vec<T>, batch: usize, seq: usize },
    NormalizeRows { x: Var, norms: Vec<T> },
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    PrefixHeads { x: Var, batch: usize, heads: usize },
    ConcatSeq { a: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let value = half * x * (one + t);
    let d_inner = c * (one + T::of(3.0) * a * x * x);
    let deriv = half * (one + t) + half * x * (one - t * t) * d_inner;
    (value, deriv)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn make(&self, shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
        Tensor::new(shape, data).expect("op produced consistent shape")
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let value = self.make(self.shape(a).to_vec(), data);
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let value = self.make(self.shape(a).to_vec(), data);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// Adds a `[D]` vector to every row of a `[.., D]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let d = *self.shape(x).last().expect("non-scalar");
        assert_eq!(self.shape(bias), &[d], "bias shape mismatch");
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let value = self.make(self.shape(x).to_vec(), data);
        self.push(value, Op::AddRow(x, bias), &[x, bias])
    }

    /// `a [m,k] · b [k,n]`, or `a · bᵀ` for `b [n,k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-D");
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (sa[0], sa[1]);
        let n = if trans_b { sb[0] } else { sb[1] };
        let kb = if trans_b { sb[1] } else { sb[0] };
        assert_eq!(k, kb, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        if trans_b {
            mm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        } else {
            mm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        }
        let value = self.make(vec![m, n], out);
        self.push(value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// Batched product of `[g,m,k]` with `[g,k,n]` (or `[g,n,k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm group mismatch");
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        assert_eq!(k, kb, "bmm inner dimension mismatch");
        let mut out = vec![T::zero(); g * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for gi in 0..g {
            let ao = &da[gi * m * k..(gi + 1) * m * k];
            let bo = &db[gi * k * n..(gi + 1) * k * n];
            let oo = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                mm_nt(ao, bo, oo, m, k, n);
            } else {
                mm_nn(ao, bo, oo, m, k, n);
            }
        }
        let value = self.make(vec![g, m, n], out);
        self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let value = self.make(self.shape(x).to_vec(), data);
        self.push(value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, |v| gelu(v).0, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, |v| v.abs(), Op::Abs(x))
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let d = *self.shape(x).last().expect("non-scalar");
        assert_eq!(self.shape(gamma), &[d]);
        assert_eq!(self.shape(beta), &[d]);
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = self.data(x).len() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = self.make(self.shape(x).to_vec(), out);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// Softmax over the last axis of `[batch·heads, queries, keys]` with disallowed keys
    /// receiving zero probability.
    pub fn masked_softmax(&mut self, x: Var, mask: &Arc<AttnMask>) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        let (g, q, k) = (s[0], s[1], s[2]);
        assert_eq!(g, mask.batch * mask.heads, "attention mask batch mismatch");
        assert_eq!(k, mask.keys, "attention mask key count mismatch");
        let src = self.data(x);
        let mut out = vec![T::zero(); g * q * k];
        for gi in 0..g {
            let b = gi / mask.heads;
            for qi in 0..q {
                let base = (gi * q + qi) * k;
                let row = &src[base..base + k];
                let mut max = T::neg_infinity();
                for (kj, &v) in row.iter().enumerate() {
                    if mask.allowed(b, qi, kj) && v > max {
                        max = v;
                    }
                }
                if max == T::neg_infinity() {
                    continue;
                }
                let mut total = T::zero();
                for kj in 0..k {
                    if mask.allowed(b, qi, kj) {
                        let e = (row[kj] - max).exp();
                        out[base + kj] = e;
                        total += e;
                    }
                }
                for v in &mut out[base..base + k] {
                    *v /= total;
                }
            }
        }
        let value = self.make(s, out);
        self.push(value, Op::MaskedSoftmax { x }, &[x])
    }

    /// Row lookup `table[ids[i]]` producing `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let s = self.shape(table);
        assert_eq!(s.len(), 2);
        let (v, d) = (s[0], s[1]);
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = self.make(vec![ids.len(), d], out);
        self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let d = *self.shape(x).last().expect("non-scalar");
        let rows = self.data(x).len() / d;
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < rows, "row {i} out of range {rows}");
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = self.make(vec![idx.len(), d], out);
        self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Inverted dropout. Returns `x` unchanged when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.data(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = self.make(self.shape(x).to_vec(), data);
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// `out[b,:] = Σ_s weights[b,s] · x[b·seq + s, :]` for `x [batch·seq, D]`.
    pub fn weighted_pool(&mut self, x: Var, weights: Vec<T>, batch: usize, seq: usize) -> Var {
        let d = *self.shape(x).last().expect("non-scalar");
        assert_eq!(self.data(x).len(), batch * seq * d);
        assert_eq!(weights.len(), batch * seq);
        let src = self.data(x);
        let mut out = vec![T::zero(); batch * d];
        for b in 0..batch {
            let o = &mut out[b * d..(b + 1) * d];
            for s in 0..seq {
                let w = weights[b * seq + s];
                if w == T::zero() {
                    continue;
                }
                let r = &src[(b * seq + s) * d..(b * seq + s + 1) * d];
                for (oo, &v) in o.iter_mut().zip(r) {
                    *oo += w * v;
                }
            }
        }
        let value = self.make(vec![batch, d], out);
        self.push(value, Op::WeightedPool { x, weights, batch, seq }, &[x])
    }

    /// Scales every row to unit L2 norm. Callers must rule out zero rows first.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().expect("non-scalar");
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.data(x).len());
        for row in self.data(x).chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = self.make(self.shape(x).to_vec(), out);
        self.push(value, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Sums the last dimension: `[N, D] -> [N]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("non-scalar");
        let out: Vec<T> = self.data(x).chunks(d).map(|r| r.iter().copied().sum()).collect();
        let n = out.len();
        let value = self.make(vec![n], out);
        self.push(value, Op::SumRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.data(x).len() as f64);
        let total: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(total / n), Op::Mean(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits [N, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let s = self.shape(logits);
        assert_eq!(s.len(), 2);
        let (n, c) = (s[0], s[1]);
        assert_eq!(targets.len(), n, "one target per row");
        let mut probs = Vec::with_capacity(n * c);
        let mut total = T::zero();
        for (row, &t) in self.data(logits).chunks(c).zip(targets) {
            assert!(t < c, "target {t} out of range {c}");
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::of(n as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// `[batch·seq, heads·dh] -> [batch·heads, seq, dh]`
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let d = *self.shape(x).last().expect("non-scalar");
        assert_eq!(self.data(x).len(), batch * seq * d);
        assert_eq!(d % heads, 0, "hidden size not divisible by heads");
        let dh = d / heads;
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + s) * d + h * dh;
                    let to = ((b * heads + h) * seq + s) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = self.make(vec![batch * heads, seq, dh], out);
        self.push(value, Op::SplitHeads { x, batch, seq, heads }, &[x])
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s, vec![batch * heads, seq, s[2]]);
        let dh = s[2];
        let d = dh * heads;
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for s in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + s) * d + h * dh;
                    let from = ((b * heads + h) * seq + s) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = self.make(vec![batch * seq, d], out);
        self.push(value, Op::MergeHeads { x, batch, seq, heads }, &[x])
    }

    /// Splits a shared `[P, D]` prefix into heads and repeats it for every batch row:
    /// `[batch·heads, P, dh]`.
    pub fn prefix_heads(&mut self, x: Var, batch: usize, heads: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let (p, d) = (s[0], s[1]);
        let dh = d / heads;
        let src = self.data(x);
        let mut out = vec![T::zero(); batch * p * d];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..p {
                    let from = i * d + h * dh;
                    let to = ((b * heads + h) * p + i) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let value = self.make(vec![batch * heads, p, dh], out);
        self.push(value, Op::PrefixHeads { x, batch, heads }, &[x])
    }

    /// Concatenates `[g, p, d]` and `[g, s, d]` along the middle axis.
    pub fn concat_seq(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[2], sb[2]);
        let (g, p, s, d) = (sa[0], sa[1], sb[1], sa[2]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(g * (p + s) * d);
        for gi in 0..g {
            out.extend_from_slice(&da[gi * p * d..(gi + 1) * p * d]);
            out.extend_from_slice(&db[gi * s * d..(gi + 1) * s * d]);
        }
        let value = self.make(vec![g, p + s, d], out);
        self.push(value, Op::ConcatSeq { a, b }, &[a, b])
    }

    /// Gradients of the single-element node `output` (seeded with 1).
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.nodes[output.0].value.numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, &gg), &bb) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gg * bb;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &gg), &aa) in gb.iter_mut().zip(g).zip(va) {
                        *x += gg * aa;
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s));
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b));
                let d = nodes[bias.0].value.numel();
                acc(*bias, &mut |gb| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    // dA = G·Bᵀ (or G·B when B was used transposed)
                    acc(*a, &mut |ga| {
                        if *trans_b {
                            mm_nn(g, vb, ga, m, n, k);
                        } else {
                            mm_nt(g, vb, ga, m, n, k);
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |gb| {
                        if *trans_b {
                            // dB[n,k] = Gᵀ·A
                            mm_tn(g, va, gb, n, m, k);
                        } else {
                            // dB[k,n] = Aᵀ·G
                            mm_tn(va, g, gb, k, m, n);
                        }
                    });
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, &mut |ga| {
                        for gi in 0..groups {
                            let gg = &g[gi * m * n..(gi + 1) * m * n];
                            let bo = &vb[gi * k * n..(gi + 1) * k * n];
                            let go = &mut ga[gi * m * k..(gi + 1) * m * k];
                            if *trans_b {
                                mm_nn(gg, bo, go, m, n, k);
                            } else {
                                mm_nt(gg, bo, go, m, n, k);
                            }
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |gb| {
                        for gi in 0..groups {
                            let gg = &g[gi * m * n..(gi + 1) * m * n];
                            let ao = &va[gi * m * k..(gi + 1) * m * k];
                            let go = &mut gb[gi * k * n..(gi + 1) * k * n];
                            if *trans_b {
                                mm_tn(gg, ao, go, n, m, k);
                            } else {
                                mm_tn(ao, gg, go, k, m, n);
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                acc(*x, &mut |gx| {
                    for ((a, &gg), &o) in gx.iter_mut().zip(g).zip(out) {
                        if o > T::zero() {
                            *a += gg;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, &gg), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        *a += gg * gelu(xv).1;
                    }
                });
            }
            Op::Tanh(x) => {
                acc(*x, &mut |gx| {
                    for ((a, &gg), &o) in gx.iter_mut().zip(g).zip(out) {
                        *a += gg * (T::one() - o * o);
                    }
                });
            }
            Op::Abs(x) => {
                let vx = val(*x);
                acc(*x, &mut |gx| {
                    for ((a, &gg), &xv) in gx.iter_mut().zip(g).zip(vx) {
                        if xv > T::zero() {
                            *a += gg;
                        } else if xv < T::zero() {
                            *a -= gg;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.numel();
                let gm = val(*gamma);
                let dt = T::of(d as f64);
                acc(*x, &mut |gx| {
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * gm[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hrow[j];
                        }
                        mean_dh /= dt;
                        mean_dh_h /= dt;
                        let o = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dh = grow[j] * gm[j];
                            o[j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for grow in g.chunks(d) {
                        gb.iter_mut().zip(grow).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::MaskedSoftmax { x } => {
                let k = *nodes[x.0].value.shape().last().expect("3-D");
                acc(*x, &mut |gx| {
                    for ((grow, prow), orow) in g.chunks(k).zip(out.chunks(k)).zip(gx.chunks_mut(k)) {
                        let dot: T = grow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                        for j in 0..k {
                            orow[j] += prow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[id * d..(id + 1) * d].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = *nodes[x.0].value.shape().last().expect("non-scalar");
                acc(*x, &mut |gx| {
                    for (r, &src_row) in idx.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gx[src_row * d..(src_row + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                acc(*x, &mut |gx| {
                    for ((a, &gg), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += gg * m;
                    }
                });
            }
            Op::WeightedPool { x, weights, batch, seq } => {
                let d = *nodes[x.0].value.shape().last().expect("non-scalar");
                acc(*x, &mut |gx| {
                    for b in 0..*batch {
                        let gr = &g[b * d..(b + 1) * d];
                        for s in 0..*seq {
                            let w = weights[b * seq + s];
                            if w == T::zero() {
                                continue;
                            }
                            let o = &mut gx[(b * seq + s) * d..(b * seq + s + 1) * d];
                            o.iter_mut().zip(gr).for_each(|(a, &gg)| *a += w * gg);
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let d = *nodes[x.0].value.shape().last().expect("non-scalar");
                acc(*x, &mut |gx| {
                    for (r, ((grow, yrow), orow)) in
                        g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            orow[j] += (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Op::SumRows(x) => {
                let d = *nodes[x.0].value.shape().last().expect("non-scalar");
                acc(*x, &mut |gx| {
                    for (row, &gg) in gx.chunks_mut(d).zip(g) {
                        row.iter_mut().for_each(|a| *a += gg);
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0]));
            }
            Op::Mean(x) => {
                let n = T::of(nodes[x.0].value.numel() as f64);
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = nodes[logits.0].value.shape()[1];
                let n = T::of(targets.len() as f64);
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * c + j] += g[0] * (probs[r * c + j] - onehot) / n;
                        }
                    }
                });
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                let d = *nodes[x.0].value.shape().last().expect("non-scalar");
                let dh = d / heads;
                acc(*x, &mut |gx| {
                    for b in 0..*batch {
                        for s in 0..*seq {
                            for h in 0..*heads {
                                let to = (b * seq + s) * d + h * dh;
                                let from = ((b * heads + h) * seq + s) * dh;
                                for j in 0..dh {
                                    gx[to + j] += g[from + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                let dh = nodes[x.0].value.shape()[2];
                let d = dh * heads;
                acc(*x, &mut |gx| {
                    for b in 0..*batch {
                        for s in 0..*seq {
                            for h in 0..*heads {
                                let from = (b * seq + s) * d + h * dh;
                                let to = ((b * heads + h) * seq + s) * dh;
                                for j in 0..dh {
                                    gx[to + j] += g[from + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::PrefixHeads { x, batch, heads } => {
                let s = nodes[x.0].value.shape();
                let (p, d) = (s[0], s[1]);
                let dh = d / heads;
                acc(*x, &mut |gx| {
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for i in 0..p {
                                let to = i * d + h * dh;
                                let from = ((b * heads + h) * p + i) * dh;
                                for j in 0..dh {
                                    gx[to + j] += g[from + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatSeq { a, b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (groups, p, s, d) = (sa[0], sa[1], sb[1], sa[2]);
                acc(*a, &mut |ga| {
                    for gi in 0..groups {
                        let src = &g[gi * (p + s) * d..gi * (p + s) * d + p * d];
                        ga[gi * p * d..(gi + 1) * p * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &y)| *x += y);
                    }
                });
                acc(*b, &mut |gb| {
                    for gi in 0..groups {
                        let start = gi * (p + s) * d + p * d;
                        let src = &g[start..start + s * d];
                        gb[gi * s * d..(gi + 1) * s * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &y)| *x += y);
                    }
                });
            }
        }
    }
}
