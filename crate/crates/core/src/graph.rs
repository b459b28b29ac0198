//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a static expression DAG: nodes reference earlier nodes by
//! index, parameters live in the graph keyed by name, and data (token ids,
//! masks, targets) is supplied per call through [`Bindings`]. Evaluation
//! state lives in an [`Evaluation`], so read-only forward passes over
//! disjoint batches can run concurrently on a shared graph.
//!
//! Determinism: every reduction (dot products, row sums, gradient
//! accumulation) runs in fixed left-to-right order, so identical inputs
//! produce bit-identical outputs and gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor, COSINE_EPS};

pub type NodeId = usize;
pub type Bindings = BTreeMap<String, Tensor>;

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive attention-mask value for disallowed positions. Large enough that
/// `exp` underflows to exactly 0.0 after max subtraction, small enough to
/// stay finite through sums.
pub const MASKED_SCORE: f64 = -1e9;

#[derive(Debug, Clone)]
enum Op {
    /// Placeholder bound per forward call.
    Input(String),
    /// Named parameter stored in the graph.
    Param(String),
    Const(Tensor),
    /// Elementwise add with numpy-style broadcasting.
    Add(NodeId, NodeId),
    /// Elementwise multiply with numpy-style broadcasting.
    Mul(NodeId, NodeId),
    /// Multiply by a compile-time scalar.
    Scale(NodeId, f64),
    /// `[.., m, k] @ [k, n]`, or batched `[B.., m, k] @ [B.., k, n]`.
    MatMul(NodeId, NodeId),
    /// Swap the last two dimensions.
    TransposeLast(NodeId),
    /// `[B, S, D] -> [B, H, S, D/H]`.
    SplitHeads(NodeId, usize),
    /// `[B, H, S, Dh] -> [B, S, H*Dh]`.
    MergeHeads(NodeId),
    /// Row softmax over the last dimension with max subtraction.
    Softmax(NodeId),
    /// Layer normalization over the last dimension, epsilon 1e-5.
    LayerNorm { x: NodeId, gain: NodeId, offset: NodeId },
    /// GELU, tanh approximation.
    Gelu(NodeId),
    /// `table: [V, D]`, `ids: [..]` of integral values -> `[.., D]`.
    Embedding { table: NodeId, ids: NodeId },
    /// `x: [B, S, D]`, `pos: [B]` -> `[B, D]`, row `b` is `x[b, pos[b], :]`.
    GatherRows { x: NodeId, pos: NodeId },
    /// Concatenate 2-D tensors along columns.
    ConcatCols(Vec<NodeId>),
    /// `a: [N, D]`, `b: [C, D]` -> `[N, C]` cosine similarities with
    /// zero-norm guard.
    Cosine(NodeId, NodeId),
    /// Mean negative log-likelihood. `logits: [.., C]`, `targets: [..]`
    /// (integral; negative values are ignored rows).
    CrossEntropy { logits: NodeId, targets: NodeId },
    /// Full reduction to a scalar.
    Sum(NodeId),
    /// Full mean to a scalar.
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::TransposeLast(_) => "transpose_last",
            Op::SplitHeads(..) => "split_heads",
            Op::MergeHeads(_) => "merge_heads",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::Cosine(..) => "cosine",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
        }
    }
}

/// Static autodiff graph: operations, named parameters, trainability mask.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    params: BTreeMap<String, Tensor>,
    param_nodes: BTreeMap<String, NodeId>,
    input_nodes: BTreeMap<String, NodeId>,
    trainable: BTreeMap<String, bool>,
    outputs: BTreeMap<String, NodeId>,
}

/// Cached forward values for one evaluation of a graph.
#[derive(Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }
}

/// Parameter gradients from one backward pass. Frozen parameters map to
/// zero tensors.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }
}

/// Result of [`Graph::grad_check`]: per-parameter maximum relative error
/// between analytic gradients and central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub failed: Vec<String>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failed.is_empty()
    }
}

// ── Graph construction ──────────────────────────────────────────────────

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        self.nodes.len() - 1
    }

    /// Data placeholder. Repeated calls with one name share the node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.input_nodes.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.input_nodes.insert(name.to_string(), id);
        id
    }

    /// Register a named parameter with its initial value. Trainable by
    /// default.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name:?} registered twice")));
        }
        self.params.insert(name.to_string(), value);
        self.trainable.insert(name.to_string(), true);
        let id = self.push(Op::Param(name.to_string()));
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose_last(&mut self, a: NodeId) -> NodeId {
        self.push(Op::TransposeLast(a))
    }

    pub fn split_heads(&mut self, a: NodeId, n_heads: usize) -> NodeId {
        self.push(Op::SplitHeads(a, n_heads))
    }

    pub fn merge_heads(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MergeHeads(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, offset: NodeId) -> NodeId {
        self.push(Op::LayerNorm { x, gain, offset })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu(a))
    }

    pub fn embedding(&mut self, table: NodeId, ids: NodeId) -> NodeId {
        self.push(Op::Embedding { table, ids })
    }

    pub fn gather_rows(&mut self, x: NodeId, pos: NodeId) -> NodeId {
        self.push(Op::GatherRows { x, pos })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatCols(parts))
    }

    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Cosine(a, b))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> NodeId {
        self.push(Op::CrossEntropy { logits, targets })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Name a node so callers can look its value up after a forward pass.
    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no output named {name:?}")))
    }

    pub fn set_trainable(&mut self, name: &str, value: bool) -> Result<()> {
        if !self.params.contains_key(name) {
            return Err(Error::Lookup(format!("no parameter named {name:?}")));
        }
        self.trainable.insert(name.to_string(), value);
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.get(name).copied().unwrap_or(false)
    }

    pub fn param_tensor(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Lookup(format!("no parameter named {name:?}")))
    }

    pub fn param_tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter named {name:?}")))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Total element count over parameters selected by `filter`.
    pub fn count_params(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|(n, _)| filter(n)).map(|(_, t)| t.numel()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| self.is_trainable(n))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

// ── Broadcasting helpers ────────────────────────────────────────────────

/// Output shape of a numpy-style broadcast, or an error naming `node`.
fn broadcast_shape(node: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::dim(node, format!("cannot broadcast {:?} with {:?}", a, b)));
        };
    }
    Ok(out)
}

/// Row-major strides of `shape` embedded in `out_shape`, with stride 0 on
/// broadcast dimensions.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut native = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        native[i] = acc;
        acc *= shape[i];
    }
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        if i < offset {
            out[i] = 0;
        } else if shape[i - offset] == 1 && out_shape[i] != 1 {
            out[i] = 0;
        } else {
            out[i] = native[i - offset];
        }
    }
    out
}

/// Iterate the output index space of a broadcast once, calling
/// `f(out_flat, a_flat, b_flat)` in row-major order.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for flat in 0..numel {
        f(flat, ia, ib);
        // Odometer increment from the last axis.
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            ia -= sa[axis] * out_shape[axis];
            ib -= sb[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // ikj order: row-major friendly, and per (i, j) the k-sum still runs
    // left to right, keeping results bit-deterministic.
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn read_index(v: f64, limit: usize, node: &str) -> Result<usize> {
    if !v.is_finite() || v.fract() != 0.0 || v < 0.0 {
        return Err(Error::Input(format!("{node}: index {v} is not a non-negative integer")));
    }
    let i = v as usize;
    if i >= limit {
        return Err(Error::Input(format!("{node}: index {i} out of range (limit {limit})")));
    }
    Ok(i)
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Row-l2 norms of a `[rows, d]` view, each floored at the cosine guard.
fn guarded_row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.leading()).map(|r| t.row_norm(r).max(COSINE_EPS)).collect()
}

// ── Forward ─────────────────────────────────────────────────────────────

impl Graph {
    /// Evaluate every node. Missing bindings, shape mismatches, invalid
    /// indices, and non-finite outputs are errors naming the node.
    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, op) in self.nodes.iter().enumerate() {
            let label = format!("{}#{}", op.name(), id);
            let value = self.eval_op(op, &values, bindings, &label)?;
            value.check_finite(&label)?;
            values.push(value);
        }
        Ok(Evaluation { values })
    }

    fn eval_op(
        &self,
        op: &Op,
        values: &[Tensor],
        bindings: &Bindings,
        label: &str,
    ) -> Result<Tensor> {
        match op {
            Op::Input(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Input(format!("missing binding for input {name:?}"))),
            Op::Param(name) => Ok(self.params[name].clone()),
            Op::Const(t) => Ok(t.clone()),
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (ta, tb) = (&values[*a], &values[*b]);
                let out_shape = broadcast_shape(label, ta.shape(), tb.shape())?;
                let sa = broadcast_strides(ta.shape(), &out_shape);
                let sb = broadcast_strides(tb.shape(), &out_shape);
                let mut out = Tensor::zeros(out_shape.clone());
                let (da, db, dout) = (ta.data(), tb.data(), out.data_mut());
                let is_add = matches!(op, Op::Add(..));
                for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                    dout[o] = if is_add { da[ia] + db[ib] } else { da[ia] * db[ib] };
                });
                Ok(out)
            }
            Op::Scale(a, f) => Ok(values[*a].map(|v| v * f)),
            Op::MatMul(a, b) => self.eval_matmul(&values[*a], &values[*b], label),
            Op::TransposeLast(a) => {
                let t = &values[*a];
                if t.rank() < 2 {
                    return Err(Error::dim(label, "transpose needs rank >= 2"));
                }
                Ok(transpose_last(t))
            }
            Op::SplitHeads(a, h) => {
                let t = &values[*a];
                if t.rank() != 3 {
                    return Err(Error::dim(label, format!("expected [B,S,D], got {:?}", t.shape())));
                }
                let (b, s, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                if *h == 0 || d % h != 0 {
                    return Err(Error::dim(label, format!("d_model {d} not divisible by {h} heads")));
                }
                let dh = d / h;
                let mut out = Tensor::zeros(vec![b, *h, s, dh]);
                let (src, dst) = (t.data(), out.data_mut());
                for bi in 0..b {
                    for hi in 0..*h {
                        for si in 0..s {
                            let src_off = (bi * s + si) * d + hi * dh;
                            let dst_off = ((bi * *h + hi) * s + si) * dh;
                            dst[dst_off..dst_off + dh].copy_from_slice(&src[src_off..src_off + dh]);
                        }
                    }
                }
                Ok(out)
            }
            Op::MergeHeads(a) => {
                let t = &values[*a];
                if t.rank() != 4 {
                    return Err(Error::dim(label, format!("expected [B,H,S,Dh], got {:?}", t.shape())));
                }
                let (b, h, s, dh) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
                let mut out = Tensor::zeros(vec![b, s, h * dh]);
                let (src, dst) = (t.data(), out.data_mut());
                for bi in 0..b {
                    for hi in 0..h {
                        for si in 0..s {
                            let src_off = ((bi * h + hi) * s + si) * dh;
                            let dst_off = (bi * s + si) * (h * dh) + hi * dh;
                            dst[dst_off..dst_off + dh].copy_from_slice(&src[src_off..src_off + dh]);
                        }
                    }
                }
                Ok(out)
            }
            Op::Softmax(a) => {
                let t = &values[*a];
                let mut out = t.clone();
                let d = t.last_dim();
                if d == 0 {
                    return Err(Error::dim(label, "softmax over empty last dimension"));
                }
                for r in 0..t.leading() {
                    let row = out.row_mut(r);
                    let mut mx = row[0];
                    for &v in row.iter() {
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - mx).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                Ok(out)
            }
            Op::LayerNorm { x, gain, offset } => {
                let (t, g, b) = (&values[*x], &values[*gain], &values[*offset]);
                let d = t.last_dim();
                if g.shape() != [d] || b.shape() != [d] {
                    return Err(Error::dim(
                        label,
                        format!("gain/offset must be [{d}], got {:?}/{:?}", g.shape(), b.shape()),
                    ));
                }
                let mut out = t.clone();
                for r in 0..t.leading() {
                    let row = out.row_mut(r);
                    let mut mean = 0.0;
                    for &v in row.iter() {
                        mean += v;
                    }
                    mean /= d as f64;
                    let mut var = 0.0;
                    for &v in row.iter() {
                        var += (v - mean) * (v - mean);
                    }
                    var /= d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (*v - mean) * inv * g.data()[j] + b.data()[j];
                    }
                }
                Ok(out)
            }
            Op::Gelu(a) => Ok(values[*a].map(gelu_scalar)),
            Op::Embedding { table, ids } => {
                let (tab, idt) = (&values[*table], &values[*ids]);
                if tab.rank() != 2 {
                    return Err(Error::dim(label, "embedding table must be 2-D"));
                }
                let (v, d) = (tab.shape()[0], tab.shape()[1]);
                let mut shape = idt.shape().to_vec();
                shape.push(d);
                let mut out = Tensor::zeros(shape);
                for (i, &idv) in idt.data().iter().enumerate() {
                    let row = read_index(idv, v, label)?;
                    out.data_mut()[i * d..(i + 1) * d].copy_from_slice(tab.row(row));
                }
                Ok(out)
            }
            Op::GatherRows { x, pos } => {
                let (t, p) = (&values[*x], &values[*pos]);
                if t.rank() != 3 {
                    return Err(Error::dim(label, format!("expected [B,S,D], got {:?}", t.shape())));
                }
                let (b, s, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                if p.shape() != [b] {
                    return Err(Error::dim(label, format!("positions must be [{b}], got {:?}", p.shape())));
                }
                let mut out = Tensor::zeros(vec![b, d]);
                for bi in 0..b {
                    let si = read_index(p.data()[bi], s, label)?;
                    let off = (bi * s + si) * d;
                    out.data_mut()[bi * d..(bi + 1) * d].copy_from_slice(&t.data()[off..off + d]);
                }
                Ok(out)
            }
            Op::ConcatCols(parts) => {
                if parts.is_empty() {
                    return Err(Error::dim(label, "concat of zero tensors"));
                }
                let n = values[parts[0]].shape().first().copied().unwrap_or(0);
                let mut total = 0usize;
                for &p in parts {
                    let t = &values[p];
                    if t.rank() != 2 || t.shape()[0] != n {
                        return Err(Error::dim(label, "concat_cols expects 2-D tensors with equal rows"));
                    }
                    total += t.shape()[1];
                }
                let mut out = Tensor::zeros(vec![n, total]);
                for r in 0..n {
                    let mut col = 0usize;
                    for &p in parts {
                        let t = &values[p];
                        let c = t.shape()[1];
                        out.data_mut()[r * total + col..r * total + col + c]
                            .copy_from_slice(t.row(r));
                        col += c;
                    }
                }
                Ok(out)
            }
            Op::Cosine(a, b) => {
                let (f, w) = (&values[*a], &values[*b]);
                if f.rank() != 2 || w.rank() != 2 || f.shape()[1] != w.shape()[1] {
                    return Err(Error::dim(
                        label,
                        format!("cosine expects [N,D] and [C,D], got {:?} and {:?}", f.shape(), w.shape()),
                    ));
                }
                let (n, c) = (f.shape()[0], w.shape()[0]);
                let nf = guarded_row_norms(f);
                let nw = guarded_row_norms(w);
                let mut out = Tensor::zeros(vec![n, c]);
                for i in 0..n {
                    for j in 0..c {
                        let v = dot(f.row(i), w.row(j)) / (nf[i] * nw[j]);
                        out.data_mut()[i * c + j] = v;
                    }
                }
                Ok(out)
            }
            Op::CrossEntropy { logits, targets } => {
                let (lg, tg) = (&values[*logits], &values[*targets]);
                let c = lg.last_dim();
                let rows = lg.leading();
                if tg.numel() != rows {
                    return Err(Error::dim(
                        label,
                        format!("targets numel {} does not match {} logit rows", tg.numel(), rows),
                    ));
                }
                let mut total = 0.0;
                let mut valid = 0usize;
                for r in 0..rows {
                    let tv = tg.data()[r];
                    if tv < 0.0 {
                        continue;
                    }
                    let t = read_index(tv, c, label)?;
                    let row = lg.row(r);
                    let mut mx = row[0];
                    for &v in row.iter() {
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = 0.0;
                    for &v in row.iter() {
                        sum += (v - mx).exp();
                    }
                    total += mx + sum.ln() - row[t];
                    valid += 1;
                }
                if valid == 0 {
                    return Err(Error::Contract(format!("{label}: every target is ignored")));
                }
                Ok(Tensor::scalar(total / valid as f64))
            }
            Op::Sum(a) => {
                let mut s = 0.0;
                for &v in values[*a].data() {
                    s += v;
                }
                Ok(Tensor::scalar(s))
            }
            Op::Mean(a) => {
                let t = &values[*a];
                if t.numel() == 0 {
                    return Err(Error::dim(label, "mean of empty tensor"));
                }
                let mut s = 0.0;
                for &v in t.data() {
                    s += v;
                }
                Ok(Tensor::scalar(s / t.numel() as f64))
            }
        }
    }

    fn eval_matmul(&self, a: &Tensor, b: &Tensor, label: &str) -> Result<Tensor> {
        if a.rank() < 2 || b.rank() < 2 {
            return Err(Error::dim(label, "matmul needs rank >= 2 operands"));
        }
        let k = a.shape()[a.rank() - 1];
        if b.rank() == 2 {
            if b.shape()[0] != k {
                return Err(Error::dim(
                    label,
                    format!("inner dims differ: {:?} @ {:?}", a.shape(), b.shape()),
                ));
            }
            let n = b.shape()[1];
            let rows = a.numel() / k;
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = n;
            let mut out = Tensor::zeros(shape);
            matmul_2d(a.data(), b.data(), rows, k, n, out.data_mut());
            Ok(out)
        } else if a.rank() == b.rank() {
            let batch_a = &a.shape()[..a.rank() - 2];
            let batch_b = &b.shape()[..b.rank() - 2];
            if batch_a != batch_b || b.shape()[b.rank() - 2] != k {
                return Err(Error::dim(
                    label,
                    format!("incompatible batched matmul: {:?} @ {:?}", a.shape(), b.shape()),
                ));
            }
            let m = a.shape()[a.rank() - 2];
            let n = b.shape()[b.rank() - 1];
            let batch: usize = batch_a.iter().product();
            let mut shape = a.shape().to_vec();
            let r = shape.len();
            shape[r - 1] = n;
            let mut out = Tensor::zeros(shape);
            for bi in 0..batch {
                matmul_2d(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                );
            }
            Ok(out)
        } else {
            Err(Error::dim(
                label,
                format!("unsupported matmul ranks: {:?} @ {:?}", a.shape(), b.shape()),
            ))
        }
    }
}

fn transpose_last(t: &Tensor) -> Tensor {
    let r = t.rank();
    let (m, n) = (t.shape()[r - 2], t.shape()[r - 1]);
    let batch: usize = t.shape()[..r - 2].iter().product();
    let mut shape = t.shape().to_vec();
    shape.swap(r - 2, r - 1);
    let mut out = Tensor::zeros(shape);
    for bi in 0..batch {
        let src = &t.data()[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out.data_mut()[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

// ── Backward ────────────────────────────────────────────────────────────

impl Graph {
    /// Reverse-mode gradients of the scalar node `loss` with respect to
    /// every parameter. Frozen parameters are reported as zero tensors.
    pub fn backward(&self, eval: &Evaluation, loss: NodeId) -> Result<Gradients> {
        if loss >= self.nodes.len() {
            return Err(Error::Lookup(format!("loss node {loss} does not exist")));
        }
        if eval.values[loss].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, node {loss} has shape {:?}",
                eval.values[loss].shape()
            )));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adjoints[loss] = Some(Tensor::filled(eval.values[loss].shape().to_vec(), 1.0));

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = adjoints[id].take() else { continue };
            let label = format!("{}#{}", self.nodes[id].name(), id);
            self.backprop_op(id, &g, eval, &mut adjoints, &label)?;
            adjoints[id] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for (name, &node) in &self.param_nodes {
            let shape = self.params[name].shape().to_vec();
            let grad = if self.is_trainable(name) {
                match &adjoints[node] {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(shape),
                }
            } else {
                Tensor::zeros(shape)
            };
            by_name.insert(name.clone(), grad);
        }
        Ok(Gradients { by_name })
    }

    fn backprop_op(
        &self,
        id: NodeId,
        g: &Tensor,
        eval: &Evaluation,
        adjoints: &mut [Option<Tensor>],
        label: &str,
    ) -> Result<()> {
        let acc = |adjoints: &mut [Option<Tensor>], node: NodeId, delta: Tensor| {
            match &mut adjoints[node] {
                Some(t) => {
                    let d = t.data_mut();
                    for (i, v) in delta.data().iter().enumerate() {
                        d[i] += v;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[id] {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
            Op::Add(a, b) => {
                let (ta, tb) = (&eval.values[*a], &eval.values[*b]);
                let out_shape = g.shape().to_vec();
                let sa = broadcast_strides(ta.shape(), &out_shape);
                let sb = broadcast_strides(tb.shape(), &out_shape);
                let mut ga = Tensor::zeros(ta.shape().to_vec());
                let mut gb = Tensor::zeros(tb.shape().to_vec());
                {
                    let (da, db) = (ga.data_mut(), gb.data_mut());
                    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                        da[ia] += g.data()[o];
                        db[ib] += g.data()[o];
                    });
                }
                acc(adjoints, *a, ga);
                acc(adjoints, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&eval.values[*a], &eval.values[*b]);
                let out_shape = g.shape().to_vec();
                let sa = broadcast_strides(ta.shape(), &out_shape);
                let sb = broadcast_strides(tb.shape(), &out_shape);
                let mut ga = Tensor::zeros(ta.shape().to_vec());
                let mut gb = Tensor::zeros(tb.shape().to_vec());
                {
                    let (da, db) = (ga.data_mut(), gb.data_mut());
                    let (va, vb) = (ta.data(), tb.data());
                    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
                        da[ia] += g.data()[o] * vb[ib];
                        db[ib] += g.data()[o] * va[ia];
                    });
                }
                acc(adjoints, *a, ga);
                acc(adjoints, *b, gb);
            }
            Op::Scale(a, f) => acc(adjoints, *a, g.map(|v| v * f)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&eval.values[*a], &eval.values[*b]);
                let k = ta.shape()[ta.rank() - 1];
                if tb.rank() == 2 {
                    let n = tb.shape()[1];
                    let rows = ta.numel() / k;
                    // ga = g @ b^T
                    let mut ga = Tensor::zeros(ta.shape().to_vec());
                    for i in 0..rows {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g.data()[i * n + j] * tb.data()[p * n + j];
                            }
                            ga.data_mut()[i * k + p] = s;
                        }
                    }
                    // gb = a^T @ g, accumulated over rows in ascending order
                    let mut gb = Tensor::zeros(tb.shape().to_vec());
                    for i in 0..rows {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb.data_mut()[p * n + j] += av * g.data()[i * n + j];
                            }
                        }
                    }
                    acc(adjoints, *a, ga);
                    acc(adjoints, *b, gb);
                } else {
                    let m = ta.shape()[ta.rank() - 2];
                    let n = tb.shape()[tb.rank() - 1];
                    let batch: usize = ta.shape()[..ta.rank() - 2].iter().product();
                    let mut ga = Tensor::zeros(ta.shape().to_vec());
                    let mut gb = Tensor::zeros(tb.shape().to_vec());
                    for bi in 0..batch {
                        let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let as_ = &ta.data()[bi * m * k..(bi + 1) * m * k];
                        let bs = &tb.data()[bi * k * n..(bi + 1) * k * n];
                        let gad = &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += gs[i * n + j] * bs[p * n + j];
                                }
                                gad[i * k + p] = s;
                            }
                        }
                        let gbd = &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = as_[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gbd[p * n + j] += av * gs[i * n + j];
                                }
                            }
                        }
                    }
                    acc(adjoints, *a, ga);
                    acc(adjoints, *b, gb);
                }
            }
            Op::TransposeLast(a) => acc(adjoints, *a, transpose_last(g)),
            Op::SplitHeads(a, h) => {
                let t = &eval.values[*a];
                let (b, s, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let dh = d / h;
                let mut ga = Tensor::zeros(vec![b, s, d]);
                for bi in 0..b {
                    for hi in 0..*h {
                        for si in 0..s {
                            let src_off = ((bi * *h + hi) * s + si) * dh;
                            let dst_off = (bi * s + si) * d + hi * dh;
                            ga.data_mut()[dst_off..dst_off + dh]
                                .copy_from_slice(&g.data()[src_off..src_off + dh]);
                        }
                    }
                }
                acc(adjoints, *a, ga);
            }
            Op::MergeHeads(a) => {
                let t = &eval.values[*a];
                let (b, h, s, dh) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
                let mut ga = Tensor::zeros(vec![b, h, s, dh]);
                for bi in 0..b {
                    for hi in 0..h {
                        for si in 0..s {
                            let src_off = (bi * s + si) * (h * dh) + hi * dh;
                            let dst_off = ((bi * h + hi) * s + si) * dh;
                            ga.data_mut()[dst_off..dst_off + dh]
                                .copy_from_slice(&g.data()[src_off..src_off + dh]);
                        }
                    }
                }
                acc(adjoints, *a, ga);
            }
            Op::Softmax(a) => {
                let p = &eval.values[id];
                let d = p.last_dim();
                let mut ga = Tensor::zeros(p.shape().to_vec());
                for r in 0..p.leading() {
                    let prow = p.row(r);
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let mut s = 0.0;
                    for j in 0..d {
                        s += grow[j] * prow[j];
                    }
                    let out = &mut ga.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = prow[j] * (grow[j] - s);
                    }
                }
                acc(adjoints, *a, ga);
            }
            Op::LayerNorm { x, gain, offset } => {
                let t = &eval.values[*x];
                let gn = &eval.values[*gain];
                let d = t.last_dim();
                let rows = t.leading();
                let mut gx = Tensor::zeros(t.shape().to_vec());
                let mut gg = Tensor::zeros(vec![d]);
                let mut gb = Tensor::zeros(vec![d]);
                for r in 0..rows {
                    let xrow = t.row(r);
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let mut mean = 0.0;
                    for &v in xrow {
                        mean += v;
                    }
                    mean /= d as f64;
                    let mut var = 0.0;
                    for &v in xrow {
                        var += (v - mean) * (v - mean);
                    }
                    var /= d as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // xhat, gh = g * gain, and the two row means the input
                    // gradient needs.
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    let mut xhat = vec![0.0; d];
                    let mut gh = vec![0.0; d];
                    for j in 0..d {
                        xhat[j] = (xrow[j] - mean) * inv;
                        gh[j] = grow[j] * gn.data()[j];
                        m1 += gh[j];
                        m2 += gh[j] * xhat[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    let gxrow = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for j in 0..d {
                        gxrow[j] = (gh[j] - m1 - xhat[j] * m2) * inv;
                        gg.data_mut()[j] += grow[j] * xhat[j];
                        gb.data_mut()[j] += grow[j];
                    }
                }
                acc(adjoints, *x, gx);
                acc(adjoints, *gain, gg);
                acc(adjoints, *offset, gb);
            }
            Op::Gelu(a) => {
                let t = &eval.values[*a];
                let mut ga = Tensor::zeros(t.shape().to_vec());
                for (i, &v) in t.data().iter().enumerate() {
                    ga.data_mut()[i] = g.data()[i] * gelu_deriv(v);
                }
                acc(adjoints, *a, ga);
            }
            Op::Embedding { table, ids } => {
                let tab = &eval.values[*table];
                let idt = &eval.values[*ids];
                let d = tab.shape()[1];
                let mut gt = Tensor::zeros(tab.shape().to_vec());
                for (i, &idv) in idt.data().iter().enumerate() {
                    let row = idv as usize; // validated during forward
                    let dst = &mut gt.data_mut()[row * d..(row + 1) * d];
                    let src = &g.data()[i * d..(i + 1) * d];
                    for j in 0..d {
                        dst[j] += src[j];
                    }
                }
                acc(adjoints, *table, gt);
            }
            Op::GatherRows { x, pos } => {
                let t = &eval.values[*x];
                let p = &eval.values[*pos];
                let (b, s, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut gx = Tensor::zeros(vec![b, s, d]);
                for bi in 0..b {
                    let si = p.data()[bi] as usize;
                    let dst = &mut gx.data_mut()[(bi * s + si) * d..(bi * s + si) * d + d];
                    let src = &g.data()[bi * d..(bi + 1) * d];
                    for j in 0..d {
                        dst[j] += src[j];
                    }
                }
                acc(adjoints, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let n = g.shape()[0];
                let total = g.shape()[1];
                let mut col = 0usize;
                for &part in parts {
                    let c = eval.values[part].shape()[1];
                    let mut gp = Tensor::zeros(vec![n, c]);
                    for r in 0..n {
                        gp.data_mut()[r * c..(r + 1) * c]
                            .copy_from_slice(&g.data()[r * total + col..r * total + col + c]);
                    }
                    acc(adjoints, part, gp);
                    col += c;
                }
            }
            Op::Cosine(a, b) => {
                let (f, w) = (&eval.values[*a], &eval.values[*b]);
                let (n, c) = (f.shape()[0], w.shape()[0]);
                let d = f.shape()[1];
                let nf = guarded_row_norms(f);
                let nw = guarded_row_norms(w);
                let raw_nf: Vec<f64> = (0..n).map(|i| f.row_norm(i)).collect();
                let raw_nw: Vec<f64> = (0..c).map(|j| w.row_norm(j)).collect();
                let cosv = &eval.values[id];
                let mut gf = Tensor::zeros(vec![n, d]);
                let mut gw = Tensor::zeros(vec![c, d]);
                for i in 0..n {
                    for j in 0..c {
                        let gij = g.data()[i * c + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let denom = nf[i] * nw[j];
                        let cv = cosv.data()[i * c + j];
                        let frow = f.row(i);
                        let wrow = w.row(j);
                        let gfrow = &mut gf.data_mut()[i * d..(i + 1) * d];
                        for t in 0..d {
                            let mut dv = wrow[t] / denom;
                            if raw_nf[i] > COSINE_EPS {
                                dv -= cv * frow[t] / (nf[i] * nf[i]);
                            }
                            gfrow[t] += gij * dv;
                        }
                        let gwrow = &mut gw.data_mut()[j * d..(j + 1) * d];
                        for t in 0..d {
                            let mut dv = frow[t] / denom;
                            if raw_nw[j] > COSINE_EPS {
                                dv -= cv * wrow[t] / (nw[j] * nw[j]);
                            }
                            gwrow[t] += gij * dv;
                        }
                    }
                }
                acc(adjoints, *a, gf);
                acc(adjoints, *b, gw);
            }
            Op::CrossEntropy { logits, targets } => {
                let lg = &eval.values[*logits];
                let tg = &eval.values[*targets];
                let c = lg.last_dim();
                let rows = lg.leading();
                let mut valid = 0usize;
                for r in 0..rows {
                    if tg.data()[r] >= 0.0 {
                        valid += 1;
                    }
                }
                let scale = g.data()[0] / valid as f64;
                let mut gl = Tensor::zeros(lg.shape().to_vec());
                for r in 0..rows {
                    let tv = tg.data()[r];
                    if tv < 0.0 {
                        continue;
                    }
                    let t = tv as usize;
                    let row = lg.row(r);
                    let mut mx = row[0];
                    for &v in row.iter() {
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut sum = 0.0;
                    for &v in row.iter() {
                        sum += (v - mx).exp();
                    }
                    let grow = &mut gl.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        let p = (row[j] - mx).exp() / sum;
                        grow[j] = scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                acc(adjoints, *logits, gl);
            }
            Op::Sum(a) => {
                let t = &eval.values[*a];
                acc(adjoints, *a, Tensor::filled(t.shape().to_vec(), g.data()[0]));
            }
            Op::Mean(a) => {
                let t = &eval.values[*a];
                let v = g.data()[0] / t.numel() as f64;
                acc(adjoints, *a, Tensor::filled(t.shape().to_vec(), v));
            }
        }
        let _ = label;
        Ok(())
    }

    /// Compare analytic gradients of the scalar node `loss` against central
    /// finite differences with the given `step`, for every trainable
    /// parameter element. Relative error uses `|a - n| / max(|a|, |n|, 1)`.
    pub fn grad_check(
        &self,
        bindings: &Bindings,
        loss: NodeId,
        step: f64,
        tolerance: f64,
    ) -> Result<GradCheckReport> {
        if step <= 0.0 || tolerance <= 0.0 {
            return Err(Error::Config("grad_check step and tolerance must be positive".into()));
        }
        let eval = self.forward(bindings)?;
        let grads = self.backward(&eval, loss)?;

        let mut work = self.clone();
        let mut per_param = BTreeMap::new();
        let mut failed = Vec::new();
        let mut max_rel = 0.0f64;
        let names: Vec<String> =
            self.params.keys().filter(|n| self.is_trainable(n)).cloned().collect();
        for name in names {
            let analytic = grads.get(&name).unwrap().clone();
            let numel = analytic.numel();
            let mut worst = 0.0f64;
            for idx in 0..numel {
                let orig = work.params[&name].data()[idx];
                work.params.get_mut(&name).unwrap().data_mut()[idx] = orig + step;
                let lp = work.forward(bindings)?.value(loss).item()?;
                work.params.get_mut(&name).unwrap().data_mut()[idx] = orig - step;
                let lm = work.forward(bindings)?.value(loss).item()?;
                work.params.get_mut(&name).unwrap().data_mut()[idx] = orig;
                let numeric = (lp - lm) / (2.0 * step);
                if !numeric.is_finite() {
                    return Err(Error::numeric(
                        &name,
                        format!("finite-difference estimate is not finite at element {idx}"),
                    ));
                }
                let a = analytic.data()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                if rel > worst {
                    worst = rel;
                }
            }
            if worst > tolerance {
                failed.push(name.clone());
            }
            if worst > max_rel {
                max_rel = worst;
            }
            per_param.insert(name, worst);
        }
        Ok(GradCheckReport { per_param, failed, max_rel_error: max_rel, tolerance })
    }
}
