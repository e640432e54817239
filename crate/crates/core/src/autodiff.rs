//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive records its inputs and output on the [`Tape`]. Gradients
//! are obtained by walking the tape backwards once; values that fan out
//! accumulate gradient contributions by addition.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Visibility rule for one packed sequence inside an attention call.
#[derive(Clone, Debug)]
pub enum SeqMask {
    Causal,
    Explicit(Arc<AttentionMask>),
}

impl SeqMask {
    #[inline]
    fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            SeqMask::Causal => j <= i,
            SeqMask::Explicit(m) => m.allows(i, j),
        }
    }
}

/// A contiguous block of rows that attend among themselves.
#[derive(Clone, Debug)]
pub struct SeqBlock {
    pub start: usize,
    pub len: usize,
    pub mask: SeqMask,
}

/// Layout of several independent sequences packed row-wise into one matrix.
#[derive(Clone, Debug)]
pub struct AttentionPlan {
    pub n_heads: usize,
    pub blocks: Vec<SeqBlock>,
}

impl AttentionPlan {
    fn total_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.start + b.len).max().unwrap_or(0)
    }

    fn prob_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for b in &self.blocks {
            offsets.push(acc);
            acc += self.n_heads * b.len * b.len;
        }
        offsets.push(acc);
        offsets
    }
}

enum Op<T> {
    Leaf,
    Param(String),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    GatherRows { src: Var, idx: Arc<[usize]> },
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize, len: usize },
    MeanRows { src: Var, group: usize },
    Sum(Var),
    L2NormalizeRows(Var),
    Cosine(Var, Var),
    Attention { q: Var, k: Var, v: Var, plan: Arc<AttentionPlan> },
    Pick { src: Var, idx: Arc<[usize]> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::MeanRows { .. } => "mean_rows",
            Op::Sum(_) => "sum",
            Op::L2NormalizeRows(_) => "l2_normalize",
            Op::Cosine(..) => "cosine",
            Op::Attention { .. } => "attention",
            Op::Pick { .. } => "pick",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::Cosine(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::L2NormalizeRows(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { src, .. }
            | Op::SliceRows { src, .. }
            | Op::MeanRows { src, .. }
            | Op::Pick { src, .. } => vec![*src],
            Op::ConcatRows(vs) => vs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Per-op forward cache (attention probabilities).
    aux: Vec<T>,
}

/// Ordered record of primitive applications. Single writer.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<(&'static str, T)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the backward rule of every `op` node by `factor`.
    ///
    /// Only meant for negative controls in gradient checking.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, T::of(factor)));
    }

    /// The `i`-th recorded value, in recording order.
    pub fn var(&self, i: usize) -> Option<Var> {
        (i < self.nodes.len()).then_some(Var(i))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, aux: Vec<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf | Op::Param(_) => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op<T>) -> Var {
        let (value, aux) = compute(&op, |v| &self.nodes[v.0].value);
        self.push(value, op, aux)
    }

    /// Differentiable input (gradients are reported for it).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, Vec::new())
    }

    /// Input that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let v = self.push(value, Op::Leaf, Vec::new());
        self.nodes[v.0].requires_grad = false;
        v
    }

    /// Named trainable parameter.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(name.into()), Vec::new())
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        Ok(self.record(Op::MatMul { a, b, trans_b: false }))
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        Ok(self.record(Op::MatMul { a, b, trans_b: true }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        Ok(self.record(Op::Add(a, b)))
    }

    /// Adds a `[cols]` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        if self.nodes[row.0].value.numel() != self.dims2(x).1 {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        Ok(self.record(Op::AddRow(x, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        Ok(self.record(Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.record(Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.record(Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.record(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].value.data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::Contract("log of non-positive value".into()));
        }
        Ok(self.record(Op::Log(a)))
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.record(Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.record(Op::LogSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.dims2(x).1;
        if self.nodes[gain.0].value.numel() != d || self.nodes[bias.0].value.numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= T::zero() {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        Ok(self.record(Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Row lookup; also serves as embedding lookup when `src` is a table.
    pub fn gather_rows(&mut self, src: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx = idx.into();
        let rows = self.dims2(src).0;
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", self.shape(src), &[bad]));
        }
        Ok(self.record(Op::GatherRows { src, idx }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let cols = self.dims2(first).1;
        for &p in parts {
            if self.dims2(p).1 != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
        }
        if parts.len() == 1 && self.shape(first).len() == 2 {
            return Ok(first);
        }
        Ok(self.record(Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let rows = self.dims2(src).0;
        if len == 0 || start + len > rows {
            return Err(Error::shape("slice_rows", self.shape(src), &[start, len]));
        }
        Ok(self.record(Op::SliceRows { src, start, len }))
    }

    /// Mean over consecutive groups of `group` rows: `[g*group, c] -> [g, c]`.
    pub fn mean_rows(&mut self, src: Var, group: usize) -> Result<Var> {
        let rows = self.dims2(src).0;
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("mean_rows", self.shape(src), &[group]));
        }
        Ok(self.record(Op::MeanRows { src, group }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        for r in 0..t.rows() {
            if t.row(r).iter().all(|&x| x == T::zero()) {
                return Err(Error::DegenerateVector("l2_normalize"));
            }
        }
        Ok(self.record(Op::L2NormalizeRows(a)))
    }

    /// Cosine similarity of two flat tensors with equal element count.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.numel() != tb.numel() {
            return Err(Error::shape("cosine", ta.shape(), tb.shape()));
        }
        if ta.sq_norm() == T::zero() || tb.sq_norm() == T::zero() {
            return Err(Error::DegenerateVector("cosine"));
        }
        Ok(self.record(Op::Cosine(a, b)))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, plan: Arc<AttentionPlan>) -> Result<Var> {
        let (rows, d) = self.dims2(q);
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(Error::shape("attention", self.shape(q), self.shape(k)));
        }
        if plan.n_heads == 0 || d % plan.n_heads != 0 {
            return Err(Error::shape("attention heads", &[d], &[plan.n_heads]));
        }
        if plan.total_rows() > rows {
            return Err(Error::shape("attention rows", &[rows], &[plan.total_rows()]));
        }
        for b in &plan.blocks {
            if let SeqMask::Explicit(m) = &b.mask {
                if m.len() != b.len {
                    return Err(Error::shape("attention mask", &[b.len], &[m.len()]));
                }
            }
        }
        Ok(self.record(Op::Attention { q, k, v, plan }))
    }

    /// `out[i] = src[i, idx[i]]`.
    pub fn pick(&mut self, src: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx = idx.into();
        let (rows, cols) = self.dims2(src);
        if idx.len() != rows || idx.iter().any(|&j| j >= cols) {
            return Err(Error::shape("pick", self.shape(src), &[idx.len()]));
        }
        Ok(self.record(Op::Pick { src, idx }))
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Vec<Tensor<T>> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Param(_) => node.value.clone(),
                ref op => compute(op, |v| &values[v.0]).0,
            };
            values.push(v);
        }
        values
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contributions = self.vjp(node, &g);
            if let Some((name, factor)) = self.fault {
                if node.op.name() == name {
                    for (_, c) in contributions.iter_mut() {
                        c.data_mut().iter_mut().for_each(|x| *x *= factor);
                    }
                }
            }
            for (input, c) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(c.data())
                        .for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(c),
                }
            }
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                params.insert(name.clone(), g);
            }
        }
        Ok(Grads {
            nodes: grads,
            params: GradientSet(params),
        })
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            &Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (val(a), val(b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = out.cols();
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                let (gd, ad, bd) = (g.data(), ta.data(), tb.data());
                let (k_i, n_i) = (k as isize, n as isize);
                if trans_b {
                    // C = A B^T, B: [n, k]
                    T::gemm(m, n, k, T::one(), gd, n_i, 1, bd, k_i, 1, T::zero(), ga.data_mut(), k_i, 1);
                    T::gemm(n, m, k, T::one(), gd, 1, n_i, ad, k_i, 1, T::zero(), gb.data_mut(), k_i, 1);
                } else {
                    T::gemm(m, n, k, T::one(), gd, n_i, 1, bd, 1, n_i, T::zero(), ga.data_mut(), k_i, 1);
                    T::gemm(k, m, n, T::one(), ad, 1, k_i, gd, n_i, 1, T::zero(), gb.data_mut(), n_i, 1);
                }
                vec![(a, ga), (b, gb)]
            }
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::AddRow(x, row) => {
                let c = g.cols();
                let mut gr = vec![T::zero(); c];
                for r in 0..g.rows() {
                    for (acc, &v) in gr.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                let gr = Tensor::new(val(row).shape().to_vec(), gr).expect("row shape");
                vec![(x, g.clone()), (row, gr)]
            }
            &Op::Mul(a, b) => {
                let ga = zip_map(g, val(b), |x, y| x * y);
                let gb = zip_map(g, val(a), |x, y| x * y);
                vec![(a, ga), (b, gb)]
            }
            &Op::Scale(a, c) => vec![(a, g.map(|x| x * c))],
            &Op::Gelu(a) => {
                let (c, k) = (T::of(GELU_C), T::of(GELU_A));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let x = val(a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(&node.aux)
                    .map(|((&gv, &x), &t)| {
                        let du = c * (T::one() + three * k * x * x);
                        gv * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
                    })
                    .collect();
                vec![(a, Tensor::new(x.shape().to_vec(), data).expect("same shape"))]
            }
            &Op::Exp(a) => vec![(a, zip_map(g, out, |x, y| x * y))],
            &Op::Log(a) => vec![(a, zip_map(g, val(a), |x, y| x / y))],
            &Op::Softmax(a) => {
                let c = out.cols();
                let mut ga = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let s: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                    let dst = &mut ga.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] = y[j] * (gy[j] - s);
                    }
                }
                vec![(a, ga)]
            }
            &Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut ga = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let s: T = gy.iter().copied().sum();
                    let dst = &mut ga.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] = gy[j] - y[j].exp() * s;
                    }
                }
                vec![(a, ga)]
            }
            &Op::LayerNorm { x, gain, bias, eps } => {
                let (tx, tg) = (val(x), val(gain));
                let d = tx.cols();
                let dn = T::of(d as f64);
                let mut gx = Tensor::zeros(tx.shape());
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..tx.rows() {
                    let row = tx.row(r);
                    let (mean, rstd) = moments(row, eps);
                    let gy = g.row(r);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        gg[j] += gy[j] * xhat[j];
                        gb[j] += gy[j];
                        dxhat[j] = gy[j] * tg.data()[j];
                    }
                    let m1: T = dxhat.iter().copied().sum::<T>() / dn;
                    let m2: T = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    let dst = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        dst[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                let gg = Tensor::new(tg.shape().to_vec(), gg).expect("gain shape");
                let gb = Tensor::new(val(bias).shape().to_vec(), gb).expect("bias shape");
                vec![(x, gx), (gain, gg), (bias, gb)]
            }
            Op::GatherRows { src, idx } => {
                let ts = val(*src);
                let c = ts.cols();
                let mut gs = Tensor::zeros(ts.shape());
                let gd = gs.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, &v) in gd[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                vec![(*src, gs)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let tp = val(p);
                        let n = tp.numel();
                        let gp = Tensor::new(tp.shape().to_vec(), g.data()[offset..offset + n].to_vec())
                            .expect("concat part");
                        offset += n;
                        (p, gp)
                    })
                    .collect()
            }
            &Op::SliceRows { src, start, len } => {
                let ts = val(src);
                let c = ts.cols();
                let mut gs = Tensor::zeros(ts.shape());
                gs.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                vec![(src, gs)]
            }
            &Op::MeanRows { src, group } => {
                let ts = val(src);
                let c = ts.cols();
                let inv = T::one() / T::of(group as f64);
                let mut gs = Tensor::zeros(ts.shape());
                for r in 0..ts.rows() {
                    let gr = g.row(r / group);
                    for (dst, &v) in gs.data_mut()[r * c..(r + 1) * c].iter_mut().zip(gr) {
                        *dst = v * inv;
                    }
                }
                vec![(src, gs)]
            }
            &Op::Sum(a) => vec![(a, Tensor::full(val(a).shape(), g.item()))],
            &Op::L2NormalizeRows(a) => {
                let ta = val(a);
                let c = ta.cols();
                let mut ga = Tensor::zeros(ta.shape());
                for r in 0..ta.rows() {
                    let norm = ta.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                    let (y, gy) = (out.row(r), g.row(r));
                    let s: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                    let dst = &mut ga.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] = (gy[j] - y[j] * s) / norm;
                    }
                }
                vec![(a, ga)]
            }
            &Op::Cosine(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let na2 = ta.sq_norm();
                let nb2 = tb.sq_norm();
                let inv = T::one() / (na2 * nb2).sqrt();
                let cval = out.item();
                let gv = g.item();
                let ga = zip_map(tb, ta, |bj, aj| gv * (bj * inv - cval * aj / na2));
                let gb = zip_map(ta, tb, |aj, bj| gv * (aj * inv - cval * bj / nb2));
                vec![(a, ga), (b, gb)]
            }
            Op::Attention { q, k, v, plan } => {
                let (gq, gk, gv) = attention_backward(val(*q), val(*k), val(*v), plan, &node.aux, g);
                vec![(*q, gq), (*k, gk), (*v, gv)]
            }
            Op::Pick { src, idx } => {
                let ts = val(*src);
                let c = ts.cols();
                let mut gs = Tensor::zeros(ts.shape());
                for (r, &j) in idx.iter().enumerate() {
                    gs.data_mut()[r * c + j] += g.data()[r];
                }
                vec![(*src, gs)]
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `tanh` through one `exp`; saturates cleanly at both ends.
fn tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d = *d / sum;
    }
}

/// Forward evaluation of one primitive. Inputs are assumed validated.
fn compute<'a, T: Scalar>(op: &Op<T>, val: impl Fn(Var) -> &'a Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let plain = |t: Tensor<T>| (t, Vec::new());
    match op {
        Op::Leaf | Op::Param(_) => unreachable!("leaves are not recomputed"),
        &Op::MatMul { a, b, trans_b } => {
            let (ta, tb) = (val(a), val(b));
            let (m, k) = (ta.rows(), ta.cols());
            let n = if trans_b { tb.rows() } else { tb.cols() };
            let mut out = Tensor::zeros(&[m, n]);
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            T::gemm(m, k, n, T::one(), ta.data(), k as isize, 1, tb.data(), rsb, csb, T::zero(), out.data_mut(), n as isize, 1);
            plain(out)
        }
        &Op::Add(a, b) => plain(zip_map(val(a), val(b), |x, y| x + y)),
        &Op::AddRow(x, row) => {
            let (tx, tr) = (val(x), val(row));
            let c = tx.cols();
            let mut out = tx.clone();
            for row in out.data_mut().chunks_exact_mut(c) {
                row.iter_mut().zip(tr.data()).for_each(|(v, &b)| *v += b);
            }
            plain(out)
        }
        &Op::Mul(a, b) => plain(zip_map(val(a), val(b), |x, y| x * y)),
        &Op::Scale(a, c) => plain(val(a).map(|x| x * c)),
        &Op::Gelu(a) => {
            let (c, k, half) = (T::of(GELU_C), T::of(GELU_A), T::of(0.5));
            let x = val(a);
            // tanh values are kept for the backward pass
            let t: Vec<T> = x.data().iter().map(|&x| tanh(c * (x + k * x * x * x))).collect();
            let data = x.data().iter().zip(&t).map(|(&x, &t)| half * x * (T::one() + t)).collect();
            (Tensor::new(x.shape().to_vec(), data).expect("same shape"), t)
        }
        &Op::Exp(a) => plain(val(a).map(T::exp)),
        &Op::Log(a) => plain(val(a).map(T::ln)),
        &Op::Softmax(a) => {
            let ta = val(a);
            let c = ta.cols();
            let mut out = Tensor::zeros(ta.shape());
            for r in 0..ta.rows() {
                softmax_row(ta.row(r), &mut out.data_mut()[r * c..(r + 1) * c]);
            }
            plain(out)
        }
        &Op::LogSoftmax(a) => {
            let ta = val(a);
            let c = ta.cols();
            let mut out = Tensor::zeros(ta.shape());
            for r in 0..ta.rows() {
                let row = ta.row(r);
                let (top, max) = row
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |b, (j, v)| if v > b.1 { (j, v) } else { b });
                // the max term contributes exactly 1; ln_1p keeps tiny losses exact
                let rest: T = row.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, &v)| (v - max).exp()).sum();
                let l1p = rest.ln_1p();
                for (d, &s) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(row) {
                    *d = (s - max) - l1p;
                }
            }
            plain(out)
        }
        &Op::LayerNorm { x, gain, bias, eps } => {
            let (tx, tg, tb) = (val(x), val(gain), val(bias));
            let d = tx.cols();
            let mut out = Tensor::zeros(tx.shape());
            for r in 0..tx.rows() {
                let row = tx.row(r);
                let (mean, rstd) = moments(row, eps);
                let dst = &mut out.data_mut()[r * d..(r + 1) * d];
                for j in 0..d {
                    dst[j] = (row[j] - mean) * rstd * tg.data()[j] + tb.data()[j];
                }
            }
            plain(out)
        }
        Op::GatherRows { src, idx } => {
            let ts = val(*src);
            let c = ts.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                data.extend_from_slice(ts.row(i));
            }
            plain(Tensor::new(vec![idx.len(), c], data).expect("gather shape"))
        }
        Op::ConcatRows(parts) => {
            let c = val(parts[0]).cols();
            let mut data = Vec::new();
            for &p in parts {
                data.extend_from_slice(val(p).data());
            }
            let rows = data.len() / c;
            plain(Tensor::new(vec![rows, c], data).expect("concat shape"))
        }
        &Op::SliceRows { src, start, len } => {
            let ts = val(src);
            let c = ts.cols();
            let data = ts.data()[start * c..(start + len) * c].to_vec();
            plain(Tensor::new(vec![len, c], data).expect("slice shape"))
        }
        &Op::MeanRows { src, group } => {
            let ts = val(src);
            let c = ts.cols();
            let groups = ts.rows() / group;
            let inv = T::one() / T::of(group as f64);
            let mut out = Tensor::zeros(&[groups, c]);
            for r in 0..ts.rows() {
                let dst = &mut out.data_mut()[(r / group) * c..(r / group + 1) * c];
                for (d, &v) in dst.iter_mut().zip(ts.row(r)) {
                    *d += v;
                }
            }
            out.data_mut().iter_mut().for_each(|v| *v *= inv);
            plain(out)
        }
        &Op::Sum(a) => plain(Tensor::scalar(val(a).data().iter().copied().sum())),
        &Op::L2NormalizeRows(a) => {
            let ta = val(a);
            let c = ta.cols();
            let mut out = ta.clone();
            for r in 0..ta.rows() {
                let norm = ta.row(r).iter().map(|&v| v * v).sum::<T>().sqrt();
                out.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v = *v / norm);
            }
            plain(out)
        }
        &Op::Cosine(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let d: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).sum();
            plain(Tensor::scalar(d / (ta.sq_norm() * tb.sq_norm()).sqrt()))
        }
        Op::Attention { q, k, v, plan } => attention_forward(val(*q), val(*k), val(*v), plan),
        Op::Pick { src, idx } => {
            let ts = val(*src);
            plain(Tensor::vector(idx.iter().enumerate().map(|(r, &j)| ts.row(r)[j]).collect()))
        }
    }
}

fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plan: &AttentionPlan,
) -> (Tensor<T>, Vec<T>) {
    let d = q.cols();
    let dh = d / plan.n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let offsets = plan.prob_offsets();
    let mut probs = vec![T::zero(); offsets[offsets.len() - 1]];
    let mut out = Tensor::zeros(q.shape());
    let di = d as isize;
    let mut scores = Vec::new();
    for (bi, block) in plan.blocks.iter().enumerate() {
        let len = block.len;
        let li = len as isize;
        scores.resize(len * len, T::zero());
        for h in 0..plan.n_heads {
            let off = block.start * d + h * dh;
            T::gemm(len, dh, len, scale, &q.data()[off..], di, 1, &k.data()[off..], 1, di, T::zero(), &mut scores, li, 1);
            let p = &mut probs[offsets[bi] + h * len * len..offsets[bi] + (h + 1) * len * len];
            for i in 0..len {
                let row = &mut scores[i * len..(i + 1) * len];
                let mut max = T::neg_infinity();
                for (j, s) in row.iter().enumerate() {
                    if block.mask.allows(i, j) && *s > max {
                        max = *s;
                    }
                }
                let mut sum = T::zero();
                let prow = &mut p[i * len..(i + 1) * len];
                for j in 0..len {
                    if block.mask.allows(i, j) {
                        let e = (row[j] - max).exp();
                        prow[j] = e;
                        sum += e;
                    }
                }
                prow.iter_mut().for_each(|x| *x = *x / sum);
            }
            T::gemm(len, len, dh, T::one(), p, li, 1, &v.data()[off..], di, 1, T::zero(), &mut out.data_mut()[off..], di, 1);
        }
    }
    (out, probs)
}

fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plan: &AttentionPlan,
    probs: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.cols();
    let dh = d / plan.n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let offsets = plan.prob_offsets();
    let (mut gq, mut gk, mut gv) = (Tensor::zeros(q.shape()), Tensor::zeros(k.shape()), Tensor::zeros(v.shape()));
    let di = d as isize;
    let mut dp = Vec::new();
    for (bi, block) in plan.blocks.iter().enumerate() {
        let len = block.len;
        let li = len as isize;
        dp.resize(len * len, T::zero());
        for h in 0..plan.n_heads {
            let off = block.start * d + h * dh;
            let p = &probs[offsets[bi] + h * len * len..offsets[bi] + (h + 1) * len * len];
            // dV += P^T dO
            T::gemm(len, len, dh, T::one(), p, 1, li, &g.data()[off..], di, 1, T::one(), &mut gv.data_mut()[off..], di, 1);
            // dP = dO V^T
            T::gemm(len, dh, len, T::one(), &g.data()[off..], di, 1, &v.data()[off..], 1, di, T::zero(), &mut dp, li, 1);
            for i in 0..len {
                let prow = &p[i * len..(i + 1) * len];
                let drow = &mut dp[i * len..(i + 1) * len];
                let s: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..len {
                    drow[j] = prow[j] * (drow[j] - s) * scale;
                }
            }
            T::gemm(len, len, dh, T::one(), &dp, li, 1, &k.data()[off..], di, 1, T::one(), &mut gq.data_mut()[off..], di, 1);
            T::gemm(len, len, dh, T::one(), &dp, 1, li, &q.data()[off..], di, 1, T::one(), &mut gk.data_mut()[off..], di, 1);
        }
    }
    (gq, gk, gv)
}

/// Gradients for every node reached by a backward sweep.
pub struct Grads<T: Scalar> {
    nodes: Vec<Option<Tensor<T>>>,
    params: GradientSet<T>,
}

impl<T: Scalar> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &GradientSet<T> {
        &self.params
    }

    pub fn into_params(self) -> GradientSet<T> {
        self.params
    }
}

/// Parameter name to gradient, one entry per parameter registered on the tape.
#[derive(Clone, Debug, Default)]
pub struct GradientSet<T: Scalar = f32>(pub BTreeMap<String, Tensor<T>>);

impl<T: Scalar> GradientSet<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.0.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let x = v.to_f64_lossy();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

