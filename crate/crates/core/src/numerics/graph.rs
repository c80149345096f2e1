//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Node
//! indices are assigned in recording order, so the tape is already a
//! topological order and `backward` simply walks it in reverse.

use std::collections::HashMap;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a trainable tensor across graphs (one graph per step).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    AddRowBias(Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Sum(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    SelectRows {
        mask: Vec<bool>,
        on: Var,
        off: Var,
    },
    LstmCell {
        gates: Var,
        c_prev: Var,
    },
    TimeSlice {
        x: Var,
        t: usize,
    },
    StackTime(Vec<Var>),
    PrependRow {
        x: Var,
        row: Var,
    },
    AttentionHead {
        keys: Var,
        query: Var,
        score: Var,
        values: Var,
        mask: Vec<bool>,
        weights: Vec<f64>,
        hidden: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Attention weights (`[B, N]`, row-major) recorded by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::AttentionHead { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a trainable tensor. Registering the same id twice returns the
    /// existing node.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("elementwise", self.shape(a), self.shape(b)));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = match op {
            Binary::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            Binary::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            Binary::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
        };
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Adds a bias row (`[n]` or `[1, n]`) to every row of `a`. This is the
    /// only broadcast the tape supports.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let n = *sa.last().unwrap_or(&0);
        if self.value(bias).len() != n || self.shape(bias).iter().rev().skip(1).any(|&d| d != 1) {
            return Err(Error::shape("add_row_bias", sa, self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        if n > 0 {
            for row in data.chunks_mut(n) {
                for (v, bv) in row.iter_mut().zip(b) {
                    *v += bv;
                }
            }
        }
        let shape = sa.to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRowBias(a, bias)))
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Result<Var> {
        let src = self.value(x).data();
        let data: Vec<f64> = match op {
            Unary::Tanh => src.iter().map(|v| v.tanh()).collect(),
            Unary::Sigmoid => src.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Exp => src.iter().map(|v| v.exp()).collect(),
            Unary::Log => src.iter().map(|v| v.ln()).collect(),
        };
        if matches!(op, Unary::Exp | Unary::Log) && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: if op == Unary::Exp { "exp" } else { "log" },
            });
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Unary(op, x)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut t = self.value(x).clone();
        t.scale_in_place(c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "log_softmax" });
        }
        let shape = t.shape().to_vec();
        let n = *shape.last().unwrap_or(&0);
        let mut out = t.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let lse = log_sum_exp(row);
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x)))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = t
            .dims2()
            .ok_or_else(|| Error::shape("embedding", t.shape(), &[ids.len()]))?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange { id, limit: rows });
            }
            out.extend_from_slice(t.row(id));
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p)[0],
            None => return Err(Error::shape("concat_cols", &[], &[])),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.shape(p) {
                [r, c] if *r == rows => widths.push(*c),
                s => return Err(Error::shape("concat_cols", &[rows], s)),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = match self.shape(x) {
            [r, c] if start <= end && end <= *c => (*r, *c),
            s => return Err(Error::shape("slice_cols", s, &[start, end])),
        };
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        Ok(self.push(Tensor::new(vec![rows, w], out)?, Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Row `r` of the result is row `r` of `on` where `mask[r]`, else of `off`.
    pub fn select_rows(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        let s = self.shape(on);
        if s != self.shape(off) || s.len() != 2 || s[0] != mask.len() {
            return Err(Error::shape("select_rows", s, self.shape(off)));
        }
        let cols = s[1];
        let (a, b) = (self.value(on).data(), self.value(off).data());
        let mut out = Vec::with_capacity(a.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { a } else { b };
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let shape = s.to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SelectRows {
                mask: mask.to_vec(),
                on,
                off,
            },
        ))
    }

    /// Fused LSTM cell. `gates` is `[B, 4h]` pre-activations ordered
    /// (input, forget, candidate, output); the result is `[B, 2h]` holding the
    /// new hidden state in the first `h` columns and the new cell state after.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (b, h) = match (self.shape(gates), self.shape(c_prev)) {
            ([b, g4], [b2, h]) if b == b2 && *g4 == 4 * h => (*b, *h),
            (s1, s2) => return Err(Error::shape("lstm_cell", s1, s2)),
        };
        let gv = self.value(gates).data();
        let cv = self.value(c_prev).data();
        let mut out = vec![0.0; b * 2 * h];
        for r in 0..b {
            let g = &gv[r * 4 * h..(r + 1) * 4 * h];
            for j in 0..h {
                let i = sigmoid(g[j]);
                let f = sigmoid(g[h + j]);
                let cand = g[2 * h + j].tanh();
                let o = sigmoid(g[3 * h + j]);
                let c = f * cv[r * h + j] + i * cand;
                out[r * 2 * h + j] = o * c.tanh();
                out[r * 2 * h + h + j] = c;
            }
        }
        Ok(self.push(Tensor::new(vec![b, 2 * h], out)?, Op::LstmCell { gates, c_prev }))
    }

    /// `[B, T, d]` -> `[B, d]` at time `t`.
    pub fn time_slice(&mut self, x: Var, t: usize) -> Result<Var> {
        let (b, tn, d) = match self.shape(x) {
            [b, tn, d] if t < *tn => (*b, *tn, *d),
            s => return Err(Error::shape("time_slice", s, &[t])),
        };
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * d);
        for r in 0..b {
            let base = (r * tn + t) * d;
            out.extend_from_slice(&src[base..base + d]);
        }
        Ok(self.push(Tensor::new(vec![b, d], out)?, Op::TimeSlice { x, t }))
    }

    /// Stacks `T` tensors of shape `[B, d]` into `[B, T, d]`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps
            .first()
            .ok_or_else(|| Error::shape("stack_time", &[], &[]))?;
        let s = self.shape(first).to_vec();
        let (b, d) = match s.as_slice() {
            [b, d] => (*b, *d),
            _ => return Err(Error::shape("stack_time", &s, &[])),
        };
        for &v in steps {
            if self.shape(v) != s.as_slice() {
                return Err(Error::shape("stack_time", &s, self.shape(v)));
            }
        }
        let tn = steps.len();
        let mut out = vec![0.0; b * tn * d];
        for (t, &v) in steps.iter().enumerate() {
            let src = self.value(v).data();
            for r in 0..b {
                out[(r * tn + t) * d..(r * tn + t + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        Ok(self.push(Tensor::new(vec![b, tn, d], out)?, Op::StackTime(steps.to_vec())))
    }

    /// Prepends the same `d`-wide row at time 0 of every sequence in `[B, T, d]`.
    pub fn prepend_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (b, tn, d) = match self.shape(x) {
            [b, tn, d] => (*b, *tn, *d),
            s => return Err(Error::shape("prepend_row", s, self.shape(row))),
        };
        if self.value(row).len() != d {
            return Err(Error::shape("prepend_row", self.shape(x), self.shape(row)));
        }
        let src = self.value(x).data();
        let rv = self.value(row).data();
        let mut out = Vec::with_capacity(b * (tn + 1) * d);
        for r in 0..b {
            out.extend_from_slice(rv);
            out.extend_from_slice(&src[r * tn * d..(r + 1) * tn * d]);
        }
        Ok(self.push(Tensor::new(vec![b, tn + 1, d], out)?, Op::PrependRow { x, row }))
    }

    /// One additive attention head over a batch of memories.
    ///
    /// `keys` is `[B, N, a]` (already projected memory plus bias), `query` is
    /// `[B, a]` (projected decoder state), `score` is the `a`-wide scoring
    /// vector and `values` is `[B, N, d]`. `mask[b * N + n]` marks valid
    /// positions. Returns the `[B, d]` context; weights are kept on the node.
    pub fn attention_head(
        &mut self,
        keys: Var,
        query: Var,
        score: Var,
        values: Var,
        mask: &[bool],
    ) -> Result<Var> {
        let (b, n, a) = match self.shape(keys) {
            [b, n, a] => (*b, *n, *a),
            s => return Err(Error::shape("attention", s, self.shape(query))),
        };
        let d = match self.shape(values) {
            [b2, n2, d] if *b2 == b && *n2 == n => *d,
            s => return Err(Error::shape("attention", self.shape(keys), s)),
        };
        if self.shape(query) != [b, a] || self.value(score).len() != a || mask.len() != b * n {
            return Err(Error::shape("attention", self.shape(query), self.shape(score)));
        }
        let kv = self.value(keys).data();
        let qv = self.value(query).data();
        let sv = self.value(score).data();
        let vv = self.value(values).data();
        let mut hidden = vec![0.0; b * n * a];
        let mut weights = vec![0.0; b * n];
        let mut ctx = vec![0.0; b * d];
        for r in 0..b {
            let q = &qv[r * a..(r + 1) * a];
            let mut max = f64::NEG_INFINITY;
            for p in 0..n {
                if !mask[r * n + p] {
                    continue;
                }
                let base = (r * n + p) * a;
                let mut e = 0.0;
                for j in 0..a {
                    let z = (kv[base + j] + q[j]).tanh();
                    hidden[base + j] = z;
                    e += sv[j] * z;
                }
                weights[r * n + p] = e;
                max = max.max(e);
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::AllMasked { sample: r });
            }
            if !max.is_finite() {
                return Err(Error::NonFinite { op: "attention" });
            }
            let mut total = 0.0;
            for p in 0..n {
                let w = &mut weights[r * n + p];
                if mask[r * n + p] {
                    *w = (*w - max).exp();
                    total += *w;
                } else {
                    *w = 0.0;
                }
            }
            for p in 0..n {
                let w = weights[r * n + p] / total;
                weights[r * n + p] = w;
                if w != 0.0 {
                    let src = &vv[(r * n + p) * d..(r * n + p + 1) * d];
                    for (c, v) in ctx[r * d..(r + 1) * d].iter_mut().zip(src) {
                        *c += w * v;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![b, d], ctx)?,
            Op::AttentionHead {
                keys,
                query,
                score,
                values,
                mask: mask.to_vec(),
                weights,
                hidden,
            },
        ))
    }

    /// Per-row negative log-likelihood of `targets` under `softmax(logits)`.
    /// Rows with `mask[r] == false` contribute 0. Result is `[B]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (b, v) = match self.shape(logits) {
            [b, v] if *b == targets.len() && *b == mask.len() => (*b, *v),
            s => return Err(Error::shape("cross_entropy", s, &[targets.len()])),
        };
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * v];
        let mut nll = vec![0.0; b];
        for r in 0..b {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t >= v {
                return Err(Error::IndexOutOfRange { id: t, limit: v });
            }
            let row = &lv[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            if !lse.is_finite() {
                return Err(Error::NonFiniteLoss { sample: r });
            }
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            nll[r] = lse - row[t];
        }
        Ok(self.push(
            Tensor::vector(nll),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else { continue };
            self.propagate(i, g.data(), lo);
        }
        let params = self
            .params
            .iter()
            .map(|(&id, &v)| (id, v))
            .collect::<HashMap<_, _>>();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], lo: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                gemm(m, n, k, g, false, self.value(*b).data(), true, self.slot(lo, *a), 1.0);
                gemm(k, m, n, self.value(*a).data(), true, g, false, self.slot(lo, *b), 1.0);
            }
            Op::Binary(op, a, b) => match op {
                Binary::Add => {
                    axpy(self.slot(lo, *a), g, 1.0);
                    axpy(self.slot(lo, *b), g, 1.0);
                }
                Binary::Sub => {
                    axpy(self.slot(lo, *a), g, 1.0);
                    axpy(self.slot(lo, *b), g, -1.0);
                }
                Binary::Mul => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let da = self.slot(lo, *a);
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                    let db = self.slot(lo, *b);
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                }
            },
            Op::AddRowBias(a, bias) => {
                axpy(self.slot(lo, *a), g, 1.0);
                let n = self.value(*bias).len();
                let db = self.slot(lo, *bias);
                if n > 0 {
                    for row in g.chunks(n) {
                        for (d, gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Unary(op, x) => {
                let xv = self.value(*x).data();
                let dx = self.slot(lo, *x);
                for j in 0..dx.len() {
                    let y = out[j];
                    dx[j] += g[j]
                        * match op {
                            Unary::Tanh => 1.0 - y * y,
                            Unary::Sigmoid => y * (1.0 - y),
                            Unary::Exp => y,
                            Unary::Log => 1.0 / xv[j],
                        };
                }
            }
            Op::Scale(x, c) => axpy(self.slot(lo, *x), g, *c),
            Op::Sum(x) => {
                let g0 = g[0];
                for d in self.slot(lo, *x) {
                    *d += g0;
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let dx = self.slot(lo, *x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..*len {
                            dx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap_or(&0);
                let dx = self.slot(lo, *x);
                if n > 0 {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..n {
                            drow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).dims2().unwrap().1;
                let dt = self.slot(lo, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    let dp = self.slot(lo, p);
                    for r in 0..rows {
                        for j in 0..w {
                            dp[r * w + j] += g[r * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, w) = node.value.dims2().unwrap();
                let cols = self.value(*x).dims2().unwrap().1;
                let dx = self.slot(lo, *x);
                for r in 0..rows {
                    for j in 0..w {
                        dx[r * cols + start + j] += g[r * w + j];
                    }
                }
            }
            Op::Reshape(x) => axpy(self.slot(lo, *x), g, 1.0),
            Op::SelectRows { mask, on, off } => {
                let cols = node.value.dims2().unwrap().1;
                for (r, &m) in mask.iter().enumerate() {
                    let target = if m { *on } else { *off };
                    let d = self.slot(lo, target);
                    for j in 0..cols {
                        d[r * cols + j] += g[r * cols + j];
                    }
                }
            }
            Op::LstmCell { gates, c_prev } => {
                let (b, h) = self.value(*c_prev).dims2().unwrap();
                let gv = self.value(*gates).data();
                let cv = self.value(*c_prev).data();
                let mut dgates = vec![0.0; b * 4 * h];
                let mut dc_prev = vec![0.0; b * h];
                for r in 0..b {
                    let gr = &gv[r * 4 * h..(r + 1) * 4 * h];
                    for j in 0..h {
                        let i = sigmoid(gr[j]);
                        let f = sigmoid(gr[h + j]);
                        let cand = gr[2 * h + j].tanh();
                        let o = sigmoid(gr[3 * h + j]);
                        let c = out[r * 2 * h + h + j];
                        let tc = c.tanh();
                        let dh = g[r * 2 * h + j];
                        let dc = g[r * 2 * h + h + j] + dh * o * (1.0 - tc * tc);
                        let base = r * 4 * h;
                        dgates[base + j] = dc * cand * i * (1.0 - i);
                        dgates[base + h + j] = dc * cv[r * h + j] * f * (1.0 - f);
                        dgates[base + 2 * h + j] = dc * i * (1.0 - cand * cand);
                        dgates[base + 3 * h + j] = dh * tc * o * (1.0 - o);
                        dc_prev[r * h + j] = dc * f;
                    }
                }
                axpy(self.slot(lo, *gates), &dgates, 1.0);
                axpy(self.slot(lo, *c_prev), &dc_prev, 1.0);
            }
            Op::TimeSlice { x, t } => {
                let (b, tn, d) = dims3(self.shape(*x));
                let dx = self.slot(lo, *x);
                for r in 0..b {
                    let base = (r * tn + t) * d;
                    for j in 0..d {
                        dx[base + j] += g[r * d + j];
                    }
                }
            }
            Op::StackTime(steps) => {
                let (b, tn, d) = dims3(node.value.shape());
                for (t, &v) in steps.iter().enumerate() {
                    let dv = self.slot(lo, v);
                    for r in 0..b {
                        let base = (r * tn + t) * d;
                        for j in 0..d {
                            dv[r * d + j] += g[base + j];
                        }
                    }
                }
            }
            Op::PrependRow { x, row } => {
                let (b, tn1, d) = dims3(node.value.shape());
                let tn = tn1 - 1;
                {
                    let dr = self.slot(lo, *row);
                    for r in 0..b {
                        for j in 0..d {
                            dr[j] += g[r * tn1 * d + j];
                        }
                    }
                }
                let dx = self.slot(lo, *x);
                for r in 0..b {
                    let src = &g[r * tn1 * d + d..(r + 1) * tn1 * d];
                    for (dv, gv) in dx[r * tn * d..(r + 1) * tn * d].iter_mut().zip(src) {
                        *dv += gv;
                    }
                }
            }
            Op::AttentionHead {
                keys,
                query,
                score,
                values,
                mask,
                weights,
                hidden,
            } => {
                let (b, n, a) = dims3(self.shape(*keys));
                let d = self.shape(*values)[2];
                let vv = self.value(*values).data();
                let sv = self.value(*score).data();
                let mut dvalues = vec![0.0; b * n * d];
                let mut dkeys = vec![0.0; b * n * a];
                let mut dquery = vec![0.0; b * a];
                let mut dscore = vec![0.0; a];
                for r in 0..b {
                    let gc = &g[r * d..(r + 1) * d];
                    let mut dw = vec![0.0; n];
                    let mut dot = 0.0;
                    for p in 0..n {
                        let w = weights[r * n + p];
                        if !mask[r * n + p] {
                            continue;
                        }
                        let src = &vv[(r * n + p) * d..(r * n + p + 1) * d];
                        let mut s = 0.0;
                        for j in 0..d {
                            dvalues[(r * n + p) * d + j] = w * gc[j];
                            s += gc[j] * src[j];
                        }
                        dw[p] = s;
                        dot += w * s;
                    }
                    for p in 0..n {
                        if !mask[r * n + p] {
                            continue;
                        }
                        let de = weights[r * n + p] * (dw[p] - dot);
                        let base = (r * n + p) * a;
                        for j in 0..a {
                            let z = hidden[base + j];
                            dscore[j] += de * z;
                            let dpre = de * sv[j] * (1.0 - z * z);
                            dkeys[base + j] = dpre;
                            dquery[r * a + j] += dpre;
                        }
                    }
                }
                axpy(self.slot(lo, *values), &dvalues, 1.0);
                axpy(self.slot(lo, *keys), &dkeys, 1.0);
                axpy(self.slot(lo, *query), &dquery, 1.0);
                axpy(self.slot(lo, *score), &dscore, 1.0);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let v = self.value(*logits).dims2().unwrap().1;
                let dl = self.slot(lo, *logits);
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m || g[r] == 0.0 {
                        continue;
                    }
                    for j in 0..v {
                        dl[r * v + j] += g[r] * probs[r * v + j];
                    }
                    dl[r * v + t] -= g[r];
                }
            }
        }
    }

    fn slot<'a>(&self, lo: &'a mut [Option<Tensor>], v: Var) -> &'a mut [f64] {
        lo[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            .data_mut()
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to any recorded node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter, zero-filled when the parameter was not
    /// registered or not reached from the loss.
    pub fn param(&self, id: ParamId, shape: &[usize]) -> Tensor {
        self.params
            .get(&id)
            .and_then(|&v| self.wrt(v))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn dims3(s: &[usize]) -> (usize, usize, usize) {
    (s[0], s[1], s[2])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
