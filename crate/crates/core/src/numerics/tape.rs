//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! A [`Tape`] records every forward operation as a node holding its saved
//! output. Nodes are appended in execution order, so the record is already
//! topologically sorted: the backward pass walks it once in reverse,
//! accumulating gradients into any node whose subtree contains a trainable
//! leaf. Gradients are returned to the caller; the tape itself is never
//! mutated by `backward`, so one graph supports several backward calls.
//!
//! Everything is float64, row-major, and deliberately unbatched beyond 2-D
//! matrices: sequences are `[rows, cols]` matrices and model code loops over
//! sentences.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::numel;

/// Additive attention-mask value. Finite on purpose: `exp(MASK_NEG - max)`
/// underflows to exactly 0.0 while NaN checks stay meaningful.
pub const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Row source for an embedding-style lookup: either a hard vocabulary index
/// or a full distribution over the vocabulary (soft lookup).
#[derive(Debug, Clone)]
pub enum RowSel {
    Hard(usize),
    Soft(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    AddConst { a: NodeId },
    Scale { a: NodeId, c: f64 },
    MulMask { a: NodeId, mask: Vec<f64> },
    Relu { a: NodeId },
    Tanh { a: NodeId },
    SoftmaxRows { a: NodeId },
    LayerNormRows { a: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, reduction: Reduction },
    EmbedRows { table: NodeId, rows: Vec<RowSel> },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    SliceRows { a: NodeId, start: usize, len: usize },
    Conv3 { x: NodeId, w: NodeId, b: NodeId, causal: bool },
    SumAll { a: NodeId },
    SumSquares { a: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::AddConst { .. } => "add_const",
            Op::Scale { .. } => "scale",
            Op::MulMask { .. } => "mul_mask",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::EmbedRows { .. } => "embed_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Conv3 { .. } => "conv3",
            Op::SumAll { .. } => "sum_all",
            Op::SumSquares { .. } => "sum_squares",
        }
    }
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Per-node gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, NodeId)>,
}

pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = logsumexp(xs);
    xs.iter().map(|x| x - lse).collect()
}

fn softmax_row(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Scalar value of a 0-d node.
    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert!(self.nodes[id.0].shape.is_empty());
        self.nodes[id.0].data[0]
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let s = self.shape(id);
        assert_eq!(s.len(), 2, "expected 2-d node, got shape {s:?}");
        (s[0], s[1])
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(numel(&shape), data.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, shape, data, requires_grad });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, shape, data, requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(vec![], vec![v], false)
    }

    /// Bind a stored parameter as a leaf. Repeated binds of the same
    /// parameter reuse one node so tied weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId, trainable: bool) -> NodeId {
        if let Some((_, node)) = self.params.iter().find(|(p, _)| *p == pid) {
            return *node;
        }
        let t = store.get(pid);
        let node = self.leaf(t.shape.clone(), t.data.clone(), trainable);
        self.params.push((pid, node));
        node
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul { a, b }, vec![m, n], data, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.rows_cols(a);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Op::Transpose { a }, vec![c, r], out, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::Add { a, b }, shape, data, rg)
    }

    /// `[r,c] + [c]` row-broadcast bias add.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.rows_cols(a);
        assert_eq!(self.shape(bias), &[c], "bias shape mismatch");
        let bv = self.data(bias).to_vec();
        let mut data = self.data(a).to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bv[j];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(Op::AddBias { a, bias }, vec![r, c], data, rg)
    }

    /// Add a constant buffer (positional encodings, attention masks).
    pub fn add_const(&mut self, a: NodeId, c: &[f64]) -> NodeId {
        assert_eq!(self.data(a).len(), c.len(), "add_const length mismatch");
        let data: Vec<f64> = self.data(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::AddConst { a }, shape, data, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Scale { a, c }, shape, data, rg)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_mask(&mut self, a: NodeId, mask: Vec<f64>) -> NodeId {
        assert_eq!(self.data(a).len(), mask.len(), "mask length mismatch");
        let data: Vec<f64> = self.data(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::MulMask { a, mask }, shape, data, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Relu { a }, shape, data, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Tanh { a }, shape, data, rg)
    }

    /// Row-wise softmax of a `[r,c]` matrix.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.rows_cols(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(softmax_row(&self.data(a)[i * c..(i + 1) * c]));
        }
        let rg = self.rg(a);
        self.push(Op::SoftmaxRows { a }, vec![r, c], data, rg)
    }

    /// Row-wise layer normalization with learned gain/offset.
    pub fn layer_norm_rows(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = 1e-5;
        let (r, c) = self.rows_cols(a);
        assert_eq!(self.shape(gamma), &[c]);
        assert_eq!(self.shape(beta), &[c]);
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &self.data(a)[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        self.push(Op::LayerNormRows { a, gamma, beta, eps }, vec![r, c], data, rg)
    }

    /// Mean (or sum) over rows of `-log softmax(logits)[target]`.
    /// This is the negative log-likelihood objective used by every model.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        reduction: Reduction,
    ) -> Result<NodeId> {
        let (r, c) = self.rows_cols(logits);
        if targets.len() != r {
            return Err(Error::shape(format!("{} targets for {} rows", targets.len(), r)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("target index {bad} out of range for vocab {c}")));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &self.data(logits)[i * c..(i + 1) * c];
            total += logsumexp(row) - row[t];
        }
        let v = match reduction {
            Reduction::Mean => total / r as f64,
            Reduction::Sum => total,
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), reduction },
            vec![],
            vec![v],
            rg,
        ))
    }

    /// Gather (or mix) rows of an embedding table: `rows[t]` selects either
    /// one table row or the expectation of rows under a distribution.
    pub fn embed_rows(&mut self, table: NodeId, rows: Vec<RowSel>) -> NodeId {
        let (v, d) = self.rows_cols(table);
        let mut data = Vec::with_capacity(rows.len() * d);
        for sel in &rows {
            match sel {
                RowSel::Hard(j) => {
                    assert!(*j < v, "row index {j} out of range {v}");
                    data.extend_from_slice(&self.data(table)[j * d..(j + 1) * d]);
                }
                RowSel::Soft(p) => {
                    assert_eq!(p.len(), v, "distribution length {} != vocab {v}", p.len());
                    let mut acc = vec![0.0; d];
                    for (j, &pj) in p.iter().enumerate() {
                        if pj != 0.0 {
                            let trow = &self.data(table)[j * d..(j + 1) * d];
                            for (a, t) in acc.iter_mut().zip(trow) {
                                *a += pj * t;
                            }
                        }
                    }
                    data.extend_from_slice(&acc);
                }
            }
        }
        let n = rows.len();
        let rg = self.rg(table);
        self.push(Op::EmbedRows { table, rows }, vec![n, d], data, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.rows_cols(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.rows_cols(p);
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..r {
                let src = &self.data(p)[i * w..(i + 1) * w];
                data[i * total + off..i * total + off + w].copy_from_slice(src);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Op::ConcatCols { parts: parts.to_vec() }, vec![r, total], data, rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.rows_cols(a);
        assert!(start + len <= c, "slice_cols out of range");
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data(a)[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        self.push(Op::SliceCols { a, start, len }, vec![r, len], data, rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.rows_cols(a);
        assert!(start + len <= r, "slice_rows out of range");
        let data = self.data(a)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push(Op::SliceRows { a, start, len }, vec![len, c], data, rg)
    }

    /// Depthwise width-3 convolution over rows of `[T,d]`. Causal mode reads
    /// rows `t-2..=t`, centered mode `t-1..=t+1`; out-of-range rows are zero.
    pub fn conv3(&mut self, x: NodeId, w: NodeId, b: NodeId, causal: bool) -> NodeId {
        let (t_len, d) = self.rows_cols(x);
        assert_eq!(self.shape(w), &[3, d], "conv3 weight must be [3,d]");
        assert_eq!(self.shape(b), &[d], "conv3 bias must be [d]");
        let off: isize = if causal { -2 } else { -1 };
        let mut data = vec![0.0; t_len * d];
        for t in 0..t_len as isize {
            for k in 0..3isize {
                let s = t + off + k;
                if s < 0 || s >= t_len as isize {
                    continue;
                }
                for j in 0..d {
                    data[t as usize * d + j] +=
                        self.data(w)[k as usize * d + j] * self.data(x)[s as usize * d + j];
                }
            }
            for j in 0..d {
                data[t as usize * d + j] += self.data(b)[j];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Op::Conv3 { x, w, b, causal }, vec![t_len, d], data, rg)
    }

    /// Sum of all entries, reduced to a 0-d scalar.
    pub fn sum_to_scalar(&mut self, a: NodeId) -> NodeId {
        let v: f64 = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll { a }, vec![], vec![v], rg)
    }

    /// Sum of squared entries, reduced to a 0-d scalar.
    pub fn sum_of_squares(&mut self, a: NodeId) -> NodeId {
        let v: f64 = self.data(a).iter().map(|x| x * x).sum();
        let rg = self.rg(a);
        self.push(Op::SumSquares { a }, vec![], vec![v], rg)
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.cross_entropy(logits, targets, Reduction::Mean)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar output. Returns per-node gradients; use
    /// [`Tape::param_grads`] to view them keyed by parameter.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if !out_node.shape.is_empty() {
            return Err(Error::NonScalarOutput(out_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if out_node.requires_grad {
            grads[output.0] = Some(vec![1.0]);
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.data.iter().any(|v| v.is_nan()) || g.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite { node: i, op: node.op.name().to_string() });
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, delta: &[f64]) {
        if !self.rg(id) {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.rows_cols(*a);
                let n = self.rows_cols(*b).1;
                if self.rg(*a) {
                    // dA = G @ B^T
                    let bd = self.data(*b);
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bd[p * n + j];
                        }
                    }
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB = A^T @ G
                    let ad = self.data(*a);
                    let mut at = vec![0.0; k * m];
                    for r in 0..m {
                        for p in 0..k {
                            at[p * m + r] = ad[r * k + p];
                        }
                    }
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = self.rows_cols(*a);
                let mut da = vec![0.0; r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        da[i2 * c + j] = g[j * r + i2];
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::AddBias { a, bias } => {
                self.accumulate(grads, *a, g);
                if self.rg(*bias) {
                    let (r, c) = self.rows_cols(*a);
                    let mut db = vec![0.0; c];
                    for i2 in 0..r {
                        for j in 0..c {
                            db[j] += g[i2 * c + j];
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
            }
            Op::AddConst { a } => self.accumulate(grads, *a, g),
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::MulMask { a, mask } => {
                let da: Vec<f64> = g.iter().zip(mask).map(|(x, m)| x * m).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Tanh { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&node.data)
                    .map(|(gv, &y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows { a } => {
                let (r, c) = self.rows_cols(*a);
                let y = &node.data;
                let mut da = vec![0.0; r * c];
                for i2 in 0..r {
                    let yr = &y[i2 * c..(i2 + 1) * c];
                    let gr = &g[i2 * c..(i2 + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a2, b2)| a2 * b2).sum();
                    for j in 0..c {
                        da[i2 * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNormRows { a, gamma, beta, eps } => {
                let (r, c) = self.rows_cols(*a);
                let x = self.data(*a);
                let gam = self.data(*gamma);
                let mut da = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i2 in 0..r {
                    let row = &x[i2 * c..(i2 + 1) * c];
                    let gr = &g[i2 * c..(i2 + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(gv, gm)| gv * gm).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a2, b2)| a2 * b2).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da[i2 * c + j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::CrossEntropy { logits, targets, reduction } => {
                let (r, c) = self.rows_cols(*logits);
                let w = match reduction {
                    Reduction::Mean => g[0] / r as f64,
                    Reduction::Sum => g[0],
                };
                let mut da = vec![0.0; r * c];
                for (i2, &t) in targets.iter().enumerate() {
                    let row = &self.data(*logits)[i2 * c..(i2 + 1) * c];
                    let sm = softmax_row(row);
                    for j in 0..c {
                        da[i2 * c + j] = w * (sm[j] - if j == t { 1.0 } else { 0.0 });
                    }
                }
                self.accumulate(grads, *logits, &da);
            }
            Op::EmbedRows { table, rows } => {
                if self.rg(*table) {
                    let (v, d) = self.rows_cols(*table);
                    let mut dt = vec![0.0; v * d];
                    for (t, sel) in rows.iter().enumerate() {
                        let gr = &g[t * d..(t + 1) * d];
                        match sel {
                            RowSel::Hard(j) => {
                                for (dst, gv) in dt[j * d..(j + 1) * d].iter_mut().zip(gr) {
                                    *dst += gv;
                                }
                            }
                            RowSel::Soft(p) => {
                                for (j, &pj) in p.iter().enumerate() {
                                    if pj != 0.0 {
                                        for (dst, gv) in
                                            dt[j * d..(j + 1) * d].iter_mut().zip(gr)
                                        {
                                            *dst += pj * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *table, &dt);
                }
            }
            Op::ConcatCols { parts } => {
                let r = self.rows_cols(parts[0]).0;
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.rows_cols(p).1;
                    if self.rg(p) {
                        let mut dp = vec![0.0; r * w];
                        for i2 in 0..r {
                            dp[i2 * w..(i2 + 1) * w]
                                .copy_from_slice(&g[i2 * total + off..i2 * total + off + w]);
                        }
                        self.accumulate(grads, p, &dp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (r, c) = self.rows_cols(*a);
                let mut da = vec![0.0; r * c];
                for i2 in 0..r {
                    da[i2 * c + start..i2 * c + start + len]
                        .copy_from_slice(&g[i2 * len..(i2 + 1) * len]);
                }
                self.accumulate(grads, *a, &da);
            }
            Op::SliceRows { a, start, len } => {
                let (r, c) = self.rows_cols(*a);
                let mut da = vec![0.0; r * c];
                da[start * c..(start + len) * c].copy_from_slice(g);
                self.accumulate(grads, *a, &da);
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.data(*a).len()];
                self.accumulate(grads, *a, &da);
            }
            Op::SumSquares { a } => {
                let da: Vec<f64> = self.data(*a).iter().map(|x| 2.0 * x * g[0]).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Conv3 { x, w, b, causal } => {
                let (t_len, d) = self.rows_cols(*x);
                let off: isize = if *causal { -2 } else { -1 };
                if self.rg(*x) {
                    let mut dx = vec![0.0; t_len * d];
                    for t in 0..t_len as isize {
                        for k in 0..3isize {
                            let s = t + off + k;
                            if s < 0 || s >= t_len as isize {
                                continue;
                            }
                            for j in 0..d {
                                dx[s as usize * d + j] +=
                                    self.data(*w)[k as usize * d + j] * g[t as usize * d + j];
                            }
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; 3 * d];
                    for t in 0..t_len as isize {
                        for k in 0..3isize {
                            let s = t + off + k;
                            if s < 0 || s >= t_len as isize {
                                continue;
                            }
                            for j in 0..d {
                                dw[k as usize * d + j] +=
                                    self.data(*x)[s as usize * d + j] * g[t as usize * d + j];
                            }
                        }
                    }
                    self.accumulate(grads, *w, &dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; d];
                    for t in 0..t_len {
                        for j in 0..d {
                            db[j] += g[t * d + j];
                        }
                    }
                    self.accumulate(grads, *b, &db);
                }
            }
        }
        Ok(())
    }

    /// Gradients keyed by parameter id. Every parameter bound on this tape
    /// with `trainable = true` gets an entry; parameters that did not
    /// participate in the output receive zeros.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<ParamId, Vec<f64>> {
        let mut out = BTreeMap::new();
        for &(pid, node) in &self.params {
            if !self.rg(node) {
                continue;
            }
            let g = match grads.get(node) {
                Some(g) => g.to_vec(),
                None => vec![0.0; self.data(node).len()],
            };
            out.insert(pid, g);
        }
        out
    }
}
