//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every op in creation order, so node indices already
//! form a topological order and the backward sweep is a single reverse pass.
//! Leaves are either trainable parameters or constants; [`Graph::detach`]
//! turns any intermediate into a constant leaf, which is how stop-gradient
//! branches are expressed.

use super::tensor::{gemm, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf { trainable: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    LogFloor(Var, f64),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    MatMul { a: Var, b: Var, trans_b: bool, batched: bool },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    GatherLast { x: Var, idx: Vec<usize> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::LogFloor(x, _)
            | Op::Gelu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x) => vec![*x],
            Op::LayerNorm { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Permute { x, .. }
            | Op::SelectRows { x, .. }
            | Op::GatherLast { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Build it forward with the op methods, then call
/// [`Graph::backward`] once on a scalar loss.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    degenerate_norms: usize,
}

const LAYER_NORM_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

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

    /// Number of zero vectors seen by [`Graph::l2_normalize`]; those rows are
    /// passed through as zeros instead of producing NaN.
    pub fn degenerate_normalizations(&self) -> usize {
        self.degenerate_norms
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf { trainable: true }, true)
    }

    /// Constant leaf; no gradient is ever propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf { trainable: false }, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `x[..., d] + bias[d]`, broadcasting the bias over leading axes.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = row_broadcast(self.value(x), self.value(bias), |a, b| a + b)?;
        self.push(out, Op::AddRow(x, bias), "add_row")
    }

    /// `x[..., d] * gain[d]`, broadcasting the gain over leading axes.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let out = row_broadcast(self.value(x), self.value(gain), |a, b| a * b)?;
        self.push(out, Op::MulRow(x, gain), "mul_row")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.push(out, Op::Log(x), "log")
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::LogFloor(x, floor), "log_floor")
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x), "gelu")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let d = input.last_dim();
        let mut data = input.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(input.shape().to_vec(), data)?;
        self.push(out, Op::LogSoftmax(x), "log_softmax")
    }

    /// Layer normalization over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let d = input.last_dim();
        let mut data = input.data().to_vec();
        let mut inv_std = Vec::with_capacity(input.rows());
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let out = Tensor::new(input.shape().to_vec(), data)?;
        self.push(out, Op::LayerNorm { x, inv_std }, "layer_norm")
    }

    /// Unit-norm rows over the last axis. Zero rows are returned as zeros and
    /// counted in [`Graph::degenerate_normalizations`].
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let d = input.last_dim();
        let mut data = input.data().to_vec();
        let mut norms = Vec::with_capacity(input.rows());
        let mut degenerate = 0;
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                degenerate += 1;
            }
            norms.push(norm);
        }
        let out = Tensor::new(input.shape().to_vec(), data)?;
        self.degenerate_norms += degenerate;
        self.push(out, Op::L2Normalize { x, norms }, "l2_normalize")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(x), "mean")
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat {:?} with {:?}", base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// `a[m, k] @ b[k, n]`, or `a @ b^T` with `b[n, k]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err!("matmul expects rank-2 inputs, got {sa:?} and {sb:?}"));
        }
        self.matmul_impl(a, b, trans_b, false)
    }

    /// Batched `a[g, m, k] @ b[g, k, n]` (or `b[g, n, k]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err!("batch_matmul expects [g, ., .] inputs, got {sa:?} and {sb:?}"));
        }
        self.matmul_impl(a, b, trans_b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool, batched: bool) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let dims = MatDims::of(ta.shape(), tb.shape(), trans_b, batched)?;
        let mut out = vec![0.0; dims.groups * dims.m * dims.n];
        for g in 0..dims.groups {
            let a_blk = &ta.data()[g * dims.m * dims.k..(g + 1) * dims.m * dims.k];
            let b_blk = &tb.data()[g * dims.k * dims.n..(g + 1) * dims.k * dims.n];
            let b_strides = if trans_b {
                (1, dims.k as isize)
            } else {
                (dims.n as isize, 1)
            };
            gemm(
                dims.m,
                dims.k,
                dims.n,
                a_blk,
                (dims.k as isize, 1),
                b_blk,
                b_strides,
                0.0,
                &mut out[g * dims.m * dims.n..(g + 1) * dims.m * dims.n],
            );
        }
        let shape = if batched {
            vec![dims.groups, dims.m, dims.n]
        } else {
            vec![dims.m, dims.n]
        };
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b,
                batched,
            },
            "matmul",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = permute_tensor(self.value(x), perm)?;
        self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            "permute",
        )
    }

    /// Index-select along axis 0. Indices may repeat, which broadcasts rows;
    /// the backward pass sums over repeats.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        let inner = t.len() / n;
        if rows.is_empty() {
            return Err(shape_err!("select_rows with no indices"));
        }
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return Err(shape_err!("row {r} out of range for {:?}", t.shape()));
            }
            data.extend_from_slice(&t.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            "select_rows",
        )
    }

    /// `x[r, idx[r]]` for a rank-2 `x`; returns shape `[r]`.
    pub fn gather_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] != idx.len() {
            return Err(shape_err!("gather_last {:?} with {} indices", t.shape(), idx.len()));
        }
        let c = t.shape()[1];
        if idx.iter().any(|&i| i >= c) {
            return Err(shape_err!("gather index out of range"));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| t.data()[r * c + i]).collect();
        let out = Tensor::new(vec![idx.len()], data)?;
        self.push(
            out,
            Op::GatherLast {
                x,
                idx: idx.to_vec(),
            },
            "gather_last",
        )
    }

    /// Reverse sweep from a scalar `loss`. Every trainable leaf receives a
    /// gradient (zero if it does not influence the loss).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            if let Op::Leaf { .. } = node.op {
                grads[id] = Some(grad);
                continue;
            }
            self.propagate(id, &grad, &mut grads)?;
        }
        let mut trainable = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { trainable: true } = node.op {
                trainable[i] = true;
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape()));
                }
            } else {
                grads[i] = None;
            }
        }
        for g in grads.iter().flatten() {
            g.ensure_finite("backward")?;
        }
        Ok(Gradients { grads, trainable })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = grad.zip_map(self.value(*b), |g, y| g * y)?;
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = grad.zip_map(self.value(*a), |g, x| g * x)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, grad.clone());
                if self.requires_grad(*bias) {
                    let d = grad.last_dim();
                    let mut gb = vec![0.0; d];
                    for row in grad.data().chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, gb)?);
                }
            }
            Op::MulRow(x, gain) => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = gv.len();
                if self.requires_grad(*x) {
                    let gx = row_broadcast(grad, gv, |a, b| a * b)?;
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*gain) {
                    let mut gg = vec![0.0; d];
                    for (grow, xrow) in grad.data().chunks(d).zip(xv.data().chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(gv.shape().to_vec(), gg)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, grad.map(|g| g * s));
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, grad.zip_map(out, |g, y| g * y)?);
            }
            Op::Log(x) => {
                self.accumulate(grads, *x, grad.zip_map(self.value(*x), |g, v| g / v)?);
            }
            Op::LogFloor(x, floor) => {
                let floor = *floor;
                let gx = grad.zip_map(self.value(*x), |g, v| if v > floor { g / v } else { 0.0 })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = grad.zip_map(self.value(*x), |g, v| {
                    let inner = GELU_C * (v + 0.044715 * v * v * v);
                    let th = inner.tanh();
                    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner)
                })?;
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let mut gx = vec![0.0; out.len()];
                for ((gx_row, g_row), y_row) in gx
                    .chunks_mut(d)
                    .zip(grad.data().chunks(d))
                    .zip(out.data().chunks(d))
                {
                    let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                    for j in 0..d {
                        gx_row[j] = y_row[j] * (g_row[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::LogSoftmax(x) => {
                let d = out.last_dim();
                let mut gx = vec![0.0; out.len()];
                for ((gx_row, g_row), y_row) in gx
                    .chunks_mut(d)
                    .zip(grad.data().chunks(d))
                    .zip(out.data().chunks(d))
                {
                    let total: f64 = g_row.iter().sum();
                    for j in 0..d {
                        gx_row[j] = g_row[j] - y_row[j].exp() * total;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::LayerNorm { x, inv_std } => {
                let d = out.last_dim();
                let mut gx = vec![0.0; out.len()];
                for (r, ((gx_row, g_row), y_row)) in gx
                    .chunks_mut(d)
                    .zip(grad.data().chunks(d))
                    .zip(out.data().chunks(d))
                    .enumerate()
                {
                    let mean_g = g_row.iter().sum::<f64>() / d as f64;
                    let mean_gy = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx_row[j] = inv_std[r] * (g_row[j] - mean_g - y_row[j] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::L2Normalize { x, norms } => {
                let d = out.last_dim();
                let mut gx = vec![0.0; out.len()];
                for (r, ((gx_row, g_row), y_row)) in gx
                    .chunks_mut(d)
                    .zip(grad.data().chunks(d))
                    .zip(out.data().chunks(d))
                    .enumerate()
                {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    let dot: f64 = g_row.iter().zip(y_row).map(|(g, y)| g * y).sum();
                    for j in 0..d {
                        gx_row[j] = (g_row[j] - y_row[j] * dot) / norms[r];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::Sum(x) => {
                let g = grad.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = grad.data()[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), g));
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let ps = self.value(*p).shape().to_vec();
                    let width = ps[*axis];
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&grad.data()[start..start + width * inner]);
                        }
                        self.accumulate(grads, *p, Tensor::new(ps, gp)?);
                    }
                    offset += width;
                }
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                batched,
            } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let dims = MatDims::of(ta.shape(), tb.shape(), *trans_b, *batched)?;
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let (ki, ni) = (k as isize, n as isize);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; ta.len()];
                    for g in 0..dims.groups {
                        let gc = &grad.data()[g * m * n..(g + 1) * m * n];
                        let bb = &tb.data()[g * k * n..(g + 1) * k * n];
                        // dA = dC @ B^T  (B stored [k, n]) or dC @ B (B stored [n, k])
                        let b_strides = if *trans_b { (ki, 1) } else { (1, ni) };
                        gemm(m, n, k, gc, (ni, 1), bb, b_strides, 0.0, &mut ga[g * m * k..(g + 1) * m * k]);
                    }
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; tb.len()];
                    for g in 0..dims.groups {
                        let gc = &grad.data()[g * m * n..(g + 1) * m * n];
                        let aa = &ta.data()[g * m * k..(g + 1) * m * k];
                        let blk = &mut gb[g * k * n..(g + 1) * k * n];
                        if *trans_b {
                            // dB[n, k] = dC^T @ A
                            gemm(n, m, k, gc, (1, ni), aa, (ki, 1), 0.0, blk);
                        } else {
                            // dB[k, n] = A^T @ dC
                            gemm(k, m, n, aa, (1, ki), gc, (ni, 1), 0.0, blk);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, grad.clone().reshape(&shape)?);
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *x, permute_tensor(grad, &inverse)?);
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let inner = xv.len() / xv.shape()[0];
                let mut gx = vec![0.0; xv.len()];
                for (i, &r) in rows.iter().enumerate() {
                    let src = &grad.data()[i * inner..(i + 1) * inner];
                    gx[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
            Op::GatherLast { x, idx } => {
                let xv = self.value(*x);
                let c = xv.shape()[1];
                let mut gx = vec![0.0; xv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    gx[r * c + i] += grad.data()[r];
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?);
            }
        }
        Ok(())
    }
}

/// Gradients of one backward sweep, keyed by leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    trainable: Vec<bool>,
}

impl Gradients {
    /// Gradient for a trainable leaf. Asking for a constant or detached node
    /// is an error rather than a silent zero.
    pub fn get(&self, v: Var) -> Result<&Tensor> {
        if !self.trainable.get(v.0).copied().unwrap_or(false) {
            return Err(Error::DetachedLeaf(v.0));
        }
        Ok(self.grads[v.0].as_ref().expect("trainable leaves always carry a gradient"))
    }
}

struct MatDims {
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl MatDims {
    fn of(sa: &[usize], sb: &[usize], trans_b: bool, batched: bool) -> Result<Self> {
        let (groups, a2, b2) = if batched {
            (sa[0], &sa[1..], &sb[1..])
        } else {
            (1, sa, sb)
        };
        let (m, k) = (a2[0], a2[1]);
        let (kb, n) = if trans_b { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
        if k != kb {
            return Err(shape_err!(
                "matmul inner dimensions differ: {sa:?} x {sb:?} (trans_b = {trans_b})"
            ));
        }
        Ok(Self { groups, m, k, n })
    }
}

fn row_broadcast(x: &Tensor, row: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let d = x.last_dim();
    if row.len() != d {
        return Err(shape_err!(
            "row broadcast of {:?} against {:?}",
            row.shape(),
            x.shape()
        ));
    }
    let mut data = x.data().to_vec();
    for chunk in data.chunks_mut(d) {
        chunk
            .iter_mut()
            .zip(row.data())
            .for_each(|(a, &b)| *a = f(*a, b));
    }
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(shape_err!("invalid permutation {perm:?} for rank {rank}"));
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut data = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let src = x.data();
    for _ in 0..x.len() {
        data.push(src[offset]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    Tensor::new(out_shape, data)
}
