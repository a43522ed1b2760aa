//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that (transitively) depends on a trainable leaf. Parameters are
//! bound from a [`ParamStore`] through [`Graph::param`]; each `(store, id)`
//! pair becomes exactly one leaf, so gradients of shared weights accumulate.
//!
//! Only the operations the models in this crate need are provided. Fused
//! kernels (layer norm, softmax, multi-head attention) keep the tape short.

use std::collections::HashMap;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{dot, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    SumCols(Var),
    SumRows(Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Tensor> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Which store a parameter leaf comes from and whether it is differentiated.
#[derive(Clone, Copy, Debug)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bind<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn constant(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<(u64, usize, bool), Var>,
    trainable_params: Vec<(u64, ParamId, Var)>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::from_parts(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn slice_cols(t: &Tensor, start: usize, len: usize) -> Tensor {
    let mut out = Vec::with_capacity(t.rows() * len);
    for r in 0..t.rows() {
        out.extend_from_slice(&t.row(r)[start..start + len]);
    }
    Tensor::from_parts(t.rows(), len, out)
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

    /// Drop every node created after `mark` (a previous [`Graph::len`]).
    /// Vars at or beyond `mark` become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.param_leaves.retain(|_, v| v.0 < mark);
        self.trainable_params.retain(|(_, _, v)| v.0 < mark);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_row(&mut self, values: &[f64]) -> Var {
        self.constant(Tensor::row_vector(values))
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf for parameter `id` of `bind.store`. Frozen parameters and
    /// constant bindings never require gradients.
    pub fn param(&mut self, bind: Bind<'_>, id: ParamId) -> Var {
        let key = (bind.store.uid(), id.0, bind.trainable);
        if let Some(&v) = self.param_leaves.get(&key) {
            return v;
        }
        let entry = bind.store.entry(id);
        let rg = bind.trainable && !entry.frozen;
        let v = self.push(entry.value.clone(), Op::Leaf, rg);
        self.param_leaves.insert(key, v);
        if rg {
            self.trainable_params.push((bind.store.uid(), id, v));
        }
        v
    }

    /// Severs the gradient path: a constant copy of `v`'s value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Div(a, b), rg)
    }

    /// `a[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (at, rt) = (self.value(a), self.value(row));
        assert_eq!(rt.rows(), 1);
        assert_eq!(at.cols(), rt.cols(), "add_row width mismatch");
        let mut out = at.clone();
        let n = at.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += rt.data()[i % n];
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// `a[m×n] ⊙ row[1×n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (at, rt) = (self.value(a), self.value(row));
        assert_eq!(rt.rows(), 1);
        assert_eq!(at.cols(), rt.cols(), "mul_row width mismatch");
        let mut out = at.clone();
        let n = at.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= rt.data()[i % n];
        }
        let rg = self.rg(&[a, row]);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// `a ⊙ s` for a `1 × 1` node `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let value = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        self.push(value, Op::MulScalarVar(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Sum of all entries, as a `1 × 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let value = Tensor::from_parts(t.rows(), 1, data);
        let rg = self.rg(&[a]);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Column sums: `m × n → 1 × n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut data = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (d, v) in data.iter_mut().zip(t.row(r)) {
                *d += v;
            }
        }
        let value = Tensor::from_parts(1, t.cols(), data);
        let rg = self.rg(&[a]);
        self.push(value, Op::SumRows(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulBt(a, b), rg)
    }

    /// `x · w + b` with `b` a `1 × n` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_parts(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let t = self.value(*p);
                assert_eq!(t.rows(), rows, "concat_cols height mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::from_parts(rows, cols, data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.rows(), "slice_rows out of range");
        let data = t.data()[start * t.cols()..(start + len) * t.cols()].to_vec();
        let value = Tensor::from_parts(len, t.cols(), data);
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceRows(a, start), rg)
    }

    /// Rows of `a` at `indices` (repeats allowed), in order.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let t = self.value(a);
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < t.rows(), "gather_rows index {i} out of range");
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(indices.len(), cols, data);
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, indices.to_vec()), rg)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols(), "slice_cols out of range");
        let value = slice_cols(t, start, len);
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.len(), rows * cols, "reshape size mismatch");
        let value = Tensor::from_parts(rows, cols, t.data().to_vec());
        let rg = self.rg(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let n = value.cols();
        for row in value.data_mut().chunks_mut(n) {
            softmax_row(row);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Per-row normalization to zero mean and unit variance, without affine
    /// parameters: `(x − mean) / sqrt(var + eps)`.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNormRows { x: a, inv_std }, rg)
    }

    /// Elementwise clamp; the gradient passes only where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let value = zip_map(self.value(a), self.value(b), f64::min);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Minimum(a, b), rg)
    }

    /// Multi-head scaled dot-product attention without masking.
    /// `q: nq × d`, `k, v: nk × d`; heads split the feature dimension.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        self.attention_impl(q, k, v, heads, false)
    }

    /// Causal multi-head attention where the queries are the last `nq` of the
    /// `nk` key positions: query `i` sees keys `0..=nk − nq + i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        self.attention_impl(q, k, v, heads, true)
    }

    fn attention_impl(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = qt.cols();
        assert_eq!(kt.cols(), d);
        assert_eq!(vt.cols(), d);
        assert_eq!(kt.rows(), vt.rows());
        assert!(d % heads == 0, "feature width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk) = (qt.rows(), kt.rows());
        assert!(!causal || nk >= nq, "causal attention needs at least as many keys as queries");
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = vec![0.0; nq * nk];
            for i in 0..nq {
                let qi = &qt.row(i)[off..off + dh];
                let visible = if causal { nk - nq + i + 1 } else { nk };
                let prow = &mut p[i * nk..i * nk + visible];
                for (j, s) in prow.iter_mut().enumerate() {
                    *s = dot(qi, &kt.row(j)[off..off + dh]) * scale;
                }
                softmax_row(prow);
                let orow = &mut out[i * d + off..i * d + off + dh];
                for (j, &w) in prow.iter().enumerate() {
                    for (o, x) in orow.iter_mut().zip(&vt.row(j)[off..off + dh]) {
                        *o += w * x;
                    }
                }
            }
            probs.push(Tensor::from_parts(nq, nk, p));
        }
        let rg = self.rg(&[q, k, v]);
        self.push(Tensor::from_parts(nq, d, out), Op::Attention { q, k, v, heads, probs }, rg)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Gradients { grads }
    }

    /// Gradients with respect to the trainable leaves bound from `store`.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> ParamGrads {
        let mut out = vec![None; store.len()];
        for &(uid, id, v) in &self.trainable_params {
            if uid == store.uid() {
                out[id.0] = grads.get(v).cloned();
            }
        }
        ParamGrads::from_vec(out)
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(g, val(*b), |x, y| x * y));
                acc(*b, zip_map(g, val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, zip_map(g, bv, |x, y| x / y));
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .zip(bv.data())
                    .map(|((gx, x), y)| -gx * x / (y * y))
                    .collect();
                acc(*b, Tensor::from_parts(g.rows(), g.cols(), gb));
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                let mut gr = vec![0.0; g.cols()];
                for row in g.data().chunks(g.cols()) {
                    for (d, v) in gr.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*r, Tensor::from_parts(1, g.cols(), gr));
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(*a), val(*r));
                let n = g.cols();
                let ga: Vec<f64> = g.data().iter().enumerate().map(|(i, x)| x * rv.data()[i % n]).collect();
                acc(*a, Tensor::from_parts(g.rows(), n, ga));
                let mut gr = vec![0.0; n];
                for (i, (x, y)) in g.data().iter().zip(av.data()).enumerate() {
                    gr[i % n] += x * y;
                }
                acc(*r, Tensor::from_parts(1, n, gr));
            }
            Op::MulScalarVar(a, s) => {
                let sv = val(*s).item();
                acc(*a, g.map(|x| x * sv));
                acc(*s, Tensor::scalar(dot(g.data(), val(*a).data())));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, zip_map(g, &node.value, |x, y| x * y)),
            Op::Log(a) => acc(*a, zip_map(g, val(*a), |x, y| x / y)),
            Op::Softplus(a) => acc(*a, zip_map(g, val(*a), |x, y| x * sigmoid(y))),
            Op::Sigmoid(a) => acc(*a, zip_map(g, &node.value, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, zip_map(g, &node.value, |x, y| x * (1.0 - y * y))),
            Op::Gelu(a) => acc(*a, zip_map(g, val(*a), |x, y| x * gelu_grad(y))),
            Op::Square(a) => acc(*a, zip_map(g, val(*a), |x, y| 2.0 * x * y)),
            Op::Sqrt(a) => acc(*a, zip_map(g, &node.value, |x, y| x / (2.0 * y))),
            Op::Sum(a) => {
                let t = val(*a);
                acc(*a, Tensor::filled(t.rows(), t.cols(), g.item()));
            }
            Op::SumCols(a) => {
                let t = val(*a);
                let mut out = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    let gv = g.data()[r];
                    for c in 0..t.cols() {
                        out.set(r, c, gv);
                    }
                }
                acc(*a, out);
            }
            Op::SumRows(a) => {
                let t = val(*a);
                let mut data = Vec::with_capacity(t.len());
                for _ in 0..t.rows() {
                    data.extend_from_slice(g.data());
                }
                acc(*a, Tensor::from_parts(t.rows(), t.cols(), data));
            }
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_bt(val(*b)));
                acc(*b, val(*a).matmul_at(g));
            }
            Op::MatMulBt(a, b) => {
                acc(*a, g.matmul(val(*b)));
                acc(*b, g.matmul_at(val(*a)));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let cols = g.cols();
                for p in parts {
                    let rows = val(*p).rows();
                    let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    acc(*p, Tensor::from_parts(rows, cols, data));
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = val(*p).cols();
                    acc(*p, slice_cols(g, offset, cols));
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let t = val(*a);
                let mut out = Tensor::zeros(t.rows(), t.cols());
                let cols = t.cols();
                out.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                acc(*a, out);
            }
            Op::GatherRows(a, indices) => {
                let t = val(*a);
                let cols = t.cols();
                let mut out = Tensor::zeros(t.rows(), cols);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, x) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(*a, out);
            }
            Op::SliceCols(a, start) => {
                let t = val(*a);
                let mut out = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    for c in 0..g.cols() {
                        out.set(r, start + c, g.get(r, c));
                    }
                }
                acc(*a, out);
            }
            Op::Reshape(a) => {
                let t = val(*a);
                acc(*a, Tensor::from_parts(t.rows(), t.cols(), g.data().to_vec()));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let n = y.cols();
                let mut out = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks(n).zip(y.data().chunks(n)) {
                    let s = dot(gr, yr);
                    out.extend(gr.iter().zip(yr).map(|(gx, yx)| yx * (gx - s)));
                }
                acc(*a, Tensor::from_parts(y.rows(), n, out));
            }
            Op::LayerNormRows { x, inv_std } => {
                let y = &node.value;
                let n = y.cols();
                let nf = n as f64;
                let mut out = Vec::with_capacity(y.len());
                for ((gr, yr), inv) in g.data().chunks(n).zip(y.data().chunks(n)).zip(inv_std) {
                    let sg: f64 = gr.iter().sum();
                    let sgy = dot(gr, yr);
                    out.extend(gr.iter().zip(yr).map(|(gx, yx)| inv / nf * (nf * gx - sg - yx * sgy)));
                }
                acc(*x, Tensor::from_parts(y.rows(), n, out));
            }
            Op::Clamp(a, lo, hi) => {
                acc(*a, zip_map(g, val(*a), |gx, x| if x >= *lo && x <= *hi { gx } else { 0.0 }));
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga: Vec<f64> =
                    g.data().iter().zip(av.data()).zip(bv.data()).map(|((gx, x), y)| if x <= y { *gx } else { 0.0 }).collect();
                let gb: Vec<f64> =
                    g.data().iter().zip(av.data()).zip(bv.data()).map(|((gx, x), y)| if x <= y { 0.0 } else { *gx }).collect();
                acc(*a, Tensor::from_parts(g.rows(), g.cols(), ga));
                acc(*b, Tensor::from_parts(g.rows(), g.cols(), gb));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qt, kt, vt) = (val(*q), val(*k), val(*v));
                let d = qt.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (nq, nk) = (qt.rows(), kt.rows());
                let mut gq = Tensor::zeros(nq, d);
                let mut gk = Tensor::zeros(nk, d);
                let mut gv = Tensor::zeros(nk, d);
                for (h, p) in probs.iter().enumerate() {
                    let off = h * dh;
                    for i in 0..nq {
                        let go = &g.row(i)[off..off + dh];
                        let prow = p.row(i);
                        // dP_ij = go · v_j ; dS = P ⊙ (dP − Σ dP⊙P)
                        let dp: Vec<f64> = (0..nk).map(|j| dot(go, &vt.row(j)[off..off + dh])).collect();
                        let s = dot(&dp, prow);
                        for j in 0..nk {
                            let w = prow[j];
                            let gvr = &mut gv.data_mut()[j * d + off..j * d + off + dh];
                            for (o, x) in gvr.iter_mut().zip(go) {
                                *o += w * x;
                            }
                            let ds = w * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kt.row(j)[off..off + dh];
                            let gqr = &mut gq.data_mut()[i * d + off..i * d + off + dh];
                            for (o, x) in gqr.iter_mut().zip(krow) {
                                *o += ds * x;
                            }
                            let qrow = &qt.row(i)[off..off + dh];
                            let gkr = &mut gk.data_mut()[j * d + off..j * d + off + dh];
                            for (o, x) in gkr.iter_mut().zip(qrow) {
                                *o += ds * x;
                            }
                        }
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of `f` at the leaf values, compared with
    /// the tape's gradient, for every scalar of every input.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()));
            for j in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, t2)| {
                            let mut t2 = t2.clone();
                            if k == i {
                                t2.data_mut()[j] += delta;
                            }
                            g2.input(t2)
                        })
                        .collect();
                    let o = f(&mut g2, &vs);
                    g2.scalar(o)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} coord {j}: analytic {a} vs fd {fd}");
            }
        }
    }

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn elementwise_ops() {
        check(vec![t(2, 3, 1), t(2, 3, 2)], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.sub(a, v[1]);
            let c = g.add(b, v[0]);
            let d = g.tanh(c);
            let e = g.gelu(d);
            let s = g.sigmoid(e);
            let sp = g.softplus(s);
            let sq = g.square(sp);
            let ex = g.exp(sq);
            let lg = g.log(ex);
            let q = g.div(lg, sp);
            let r = g.sqrt(sp);
            let m = g.mul(q, r);
            g.sum(m)
        });
    }

    #[test]
    fn broadcast_and_reductions() {
        check(vec![t(3, 4, 3), t(1, 4, 4), t(1, 1, 5)], |g, v| {
            let a = g.add_row(v[0], v[1]);
            let b = g.mul_row(a, v[1]);
            let c = g.mul_scalar_var(b, v[2]);
            let d = g.sum_cols(c);
            let e = g.sum_rows(c);
            let d2 = g.square(d);
            let e2 = g.square(e);
            let s1 = g.sum(d2);
            let s2 = g.mean(e2);
            let s = g.add(s1, s2);
            g.add_scalar(s, 3.0)
        });
    }

    #[test]
    fn matmul_concat_slice() {
        check(vec![t(2, 3, 6), t(3, 4, 7), t(5, 3, 8)], |g, v| {
            let a = g.matmul(v[0], v[1]);
            let b = g.matmul_bt(v[0], v[2]);
            let c = g.concat_cols(&[a, b]);
            let d = g.slice_cols(c, 2, 5);
            let e = g.concat_rows(&[d, d]);
            let f = g.slice_rows(e, 1, 2);
            let r = g.reshape(f, 1, 10);
            let s = g.square(r);
            g.sum(s)
        });
    }

    #[test]
    fn gather_rows_gradients() {
        check(vec![t(4, 3, 41), t(5, 3, 42)], |g, v| {
            let r = g.gather_rows(v[0], &[2, 0, 2, 3, 1]);
            let w = g.mul(r, v[1]);
            g.sum(w)
        });
    }

    #[test]
    fn causal_attention_gradients() {
        check(vec![t(3, 8, 21), t(5, 8, 22), t(5, 8, 23), t(3, 8, 24)], |g, v| {
            let att = g.causal_attention(v[0], v[1], v[2], 2);
            let w = g.mul(att, v[3]);
            g.sum(w)
        });
    }

    #[test]
    fn causal_attention_matches_truncated_keys() {
        let (q, k, v) = (t(3, 8, 31), t(5, 8, 32), t(5, 8, 33));
        let mut g = Graph::new();
        let (vq, vk, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let full = g.causal_attention(vq, vk, vv, 2);
        for i in 0..3 {
            let mut h = Graph::new();
            let qi = h.constant(Tensor::row_vector(q.row(i)));
            let n = 5 - 3 + i + 1;
            let ki = h.constant(Tensor::new(n, 8, k.data()[..n * 8].to_vec()).unwrap());
            let vi = h.constant(Tensor::new(n, 8, v.data()[..n * 8].to_vec()).unwrap());
            let one = h.attention(qi, ki, vi, 2);
            assert_eq!(h.value(one).data(), g.value(full).row(i));
        }
    }

    #[test]
    fn softmax_layernorm_attention() {
        check(vec![t(3, 8, 9), t(5, 8, 10), t(5, 8, 11), t(3, 8, 12)], |g, v| {
            let q = g.layer_norm_rows(v[0], 1e-5);
            let att = g.attention(q, v[1], v[2], 2);
            let sm = g.softmax_rows(att);
            let w = g.mul(sm, v[3]);
            g.sum(w)
        });
    }

    #[test]
    fn clamp_and_minimum() {
        let a = Tensor::new(1, 4, vec![-2.0, -0.5, 0.5, 2.0]).unwrap();
        let b = Tensor::new(1, 4, vec![0.0, 0.0, 1.0, 0.8]).unwrap();
        let mut g = Graph::new();
        let va = g.input(a);
        let vb = g.input(b);
        let c = g.clamp(va, -1.0, 1.0);
        let m = g.minimum(c, vb);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert_eq!(grads.get(va).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(grads.get(vb).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn shared_param_leaf_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(3.0), false);
        let frozen = store.add("f", Tensor::scalar(2.0), true);
        let mut g = Graph::new();
        let w1 = g.param(Bind::trainable(&store), id);
        let w2 = g.param(Bind::trainable(&store), id);
        assert_eq!(w1, w2);
        let f = g.param(Bind::trainable(&store), frozen);
        let p = g.mul(w1, w2);
        let q = g.mul(p, f);
        let grads = g.backward(q);
        let pg = g.param_grads(&grads, &store);
        assert_eq!(pg.get(id).unwrap().item(), 12.0);
        assert!(pg.get(frozen).is_none());
    }
}
