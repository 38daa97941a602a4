//! Wengert tape over [`Tensor`] values.
//!
//! Every primitive evaluates eagerly and appends one node; nodes only refer to
//! earlier nodes, so a reverse sweep over the node list is a valid
//! topological order for the chain rule.

use crate::error::{Result, TensorError};
use crate::params::{Gradients, ParamId, ParamKey, ParamSet};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Multiply,
    MatMul,
    EmbeddingLookup,
    Sigmoid,
    Softplus,
    Tanh,
    Exp,
    LogSoftmax,
    LogSumExp,
    Concat,
    Slice,
    Scale,
    LayerNorm,
    ScaledDotAttention,
    Sum,
    Reshape,
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamKey>),
    Add(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Gather(Var, Vec<usize>),
    Sigmoid(Var),
    Softplus(Var),
    Tanh(Var),
    Exp(Var),
    LogSoftmax(Var),
    LogSumExp(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Scale(Var, f64),
    LayerNorm(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        causal: bool,
        probs: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf(_) => return None,
            Op::Add(..) => Primitive::Add,
            Op::Mul(..) => Primitive::Multiply,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Gather(..) => Primitive::EmbeddingLookup,
            Op::Sigmoid(_) => Primitive::Sigmoid,
            Op::Softplus(_) => Primitive::Softplus,
            Op::Tanh(_) => Primitive::Tanh,
            Op::Exp(_) => Primitive::Exp,
            Op::LogSoftmax(_) => Primitive::LogSoftmax,
            Op::LogSumExp(..) => Primitive::LogSumExp,
            Op::Concat(..) => Primitive::Concat,
            Op::Slice(..) => Primitive::Slice,
            Op::Scale(..) => Primitive::Scale,
            Op::LayerNorm(..) => Primitive::LayerNorm,
            Op::Attention { .. } => Primitive::ScaledDotAttention,
            Op::Sum(_) => Primitive::Sum,
            Op::Reshape(_) => Primitive::Reshape,
        })
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(sum(exp(xs)))` with max subtraction; an empty slice yields `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Whether `b` can be broadcast against `a` by repeating over leading axes.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let b_trim: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    let nb: usize = b.iter().product();
    if nb == 1 {
        return true;
    }
    if b_trim.len() > a.len() {
        return false;
    }
    a[a.len() - b_trim.len()..] == b_trim[..]
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Primitive that produced `v`, or `None` for leaves.
    pub fn primitive(&self, v: Var) -> Option<Primitive> {
        self.nodes[v.0].op.primitive()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Leaf backed by a parameter; receives gradient only if trainable.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let trainable = params.is_trainable(id);
        let key = trainable.then(|| params.key(id));
        self.push(params.get(id).clone(), Op::Leaf(key), trainable)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, false)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "multiply", |x, y| x * y, true)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        is_mul: bool,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.is_empty() || !broadcastable(va.shape(), vb.shape()) {
            return Err(TensorError::Shape {
                op: name,
                shapes: vec![va.shape().to_vec(), vb.shape().to_vec()],
            });
        }
        let nb = vb.len();
        let bd = vb.data();
        let data: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let op = if is_mul { Op::Mul(a, b) } else { Op::Add(a, b) };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, op, ng))
    }

    /// `a - b`, composed from scale and add.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                shapes: vec![va.shape().to_vec(), vb.shape().to_vec()],
            });
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a, b),
            ng,
        ))
    }

    /// Row gather: `table[indices[i], :]` for a rank-2 table.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.rank() != 2 {
            return Err(TensorError::Shape {
                op: "embedding-lookup",
                shapes: vec![vt.shape().to_vec()],
            });
        }
        let (n, d) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(TensorError::Index {
                    op: "embedding-lookup",
                    index: i,
                    extent: n,
                });
            }
            out.extend_from_slice(&vt.data()[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), d], out),
            Op::Gather(table, indices.to_vec()),
            ng,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(out, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, stable_softplus, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// `ln(sigmoid(x)) = -softplus(-x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        let s = self.softplus(n);
        self.scale(s, -1.0)
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut out = Vec::with_capacity(va.len());
        for row in va.data().chunks(cols.max(1)) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&x| x - lse));
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push(t, Op::LogSoftmax(a), ng)
    }

    /// Log-sum-exp reducing `axis`; the axis is removed from the shape.
    pub fn logsumexp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TensorError::Axis {
                op: "logsumexp",
                axis,
                shape: va.shape().to_vec(),
            });
        }
        let (outer, n, inner) = split_axis(va.shape(), axis);
        let d = va.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = Vec::with_capacity(n);
        for o in 0..outer {
            for i in 0..inner {
                buf.clear();
                buf.extend((0..n).map(|j| d[(o * n + j) * inner + i]));
                out.push(log_sum_exp(&buf));
            }
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LogSumExp(a, axis), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.value(p).shape().to_vec(),
            None => {
                return Err(TensorError::Shape {
                    op: "concat",
                    shapes: vec![],
                })
            }
        };
        if axis >= first.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let shapes: Vec<Vec<usize>> = parts
            .iter()
            .map(|&p| self.value(p).shape().to_vec())
            .collect();
        for s in &shapes {
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    shapes,
                });
            }
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec(), axis),
            ng,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                shape: va.shape().to_vec(),
            });
        }
        if start > end || end > va.shape()[axis] {
            return Err(TensorError::Index {
                op: "slice",
                index: end,
                extent: va.shape()[axis],
            });
        }
        let (outer, n, inner) = split_axis(va.shape(), axis);
        let m = end - start;
        let mut out = Vec::with_capacity(outer * m * inner);
        for o in 0..outer {
            out.extend_from_slice(&va.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = va.shape().to_vec();
        shape[axis] = m;
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice(a, axis, start),
            ng,
        ))
    }

    /// Per-row normalization over the trailing axis (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let cols = va.cols().max(1);
        let mut out = Vec::with_capacity(va.len());
        let mut rstds = Vec::with_capacity(va.rows());
        for row in va.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            rstds.push(rstd);
            out.extend(row.iter().map(|x| (x - mean) * rstd));
        }
        let t = Tensor::from_parts(va.shape().to_vec(), out);
        let ng = self.needs(a);
        self.push(t, Op::LayerNorm(a, rstds), ng)
    }

    /// `softmax(q kᵀ / sqrt(d)) v`; with `causal`, row `i` sees keys `0..=i` only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let ok = vq.rank() == 2
            && vk.rank() == 2
            && vv.rank() == 2
            && vq.shape()[1] == vk.shape()[1]
            && vk.shape()[0] == vv.shape()[0]
            && vk.shape()[0] > 0;
        if !ok {
            return Err(TensorError::Shape {
                op: "scaled-dot-attention",
                shapes: vec![
                    vq.shape().to_vec(),
                    vk.shape().to_vec(),
                    vv.shape().to_vec(),
                ],
            });
        }
        let (lq, d) = (vq.shape()[0], vq.shape()[1]);
        let lk = vk.shape()[0];
        let dv = vv.shape()[1];
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; lq * lk];
        let mut out = vec![0.0; lq * dv];
        for i in 0..lq {
            let visible = if causal { (i + 1).min(lk) } else { lk };
            let qi = &vq.data()[i * d..(i + 1) * d];
            let row = &mut probs[i * lk..i * lk + visible];
            for (j, p) in row.iter_mut().enumerate() {
                let kj = &vk.data()[j * d..(j + 1) * d];
                *p = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for p in row.iter_mut() {
                *p = (*p - m).exp();
                z += *p;
            }
            for p in row.iter_mut() {
                *p /= z;
            }
            let oi = &mut out[i * dv..(i + 1) * dv];
            for (j, &p) in row.iter().enumerate() {
                let vj = &vv.data()[j * dv..(j + 1) * dv];
                for (o, x) in oi.iter_mut().zip(vj) {
                    *o += p * x;
                }
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::from_parts(vec![lq, dv], out),
            Op::Attention {
                q,
                k,
                v,
                causal,
                probs,
            },
            ng,
        ))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                shapes: vec![va.shape().to_vec(), shape.to_vec()],
            });
        }
        let t = Tensor::from_parts(shape.to_vec(), va.data().to_vec());
        let ng = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Returns gradients for every trainable parameter leaf reached.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut result = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut result);
        }
        Ok(result)
    }

    /// Convenience: backward plus accumulation into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let g = self.backward(loss)?;
        params.accumulate(&g)
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        result: &mut Gradients,
    ) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf(key) => {
                if let Some(key) = key {
                    match result.entries.get_mut(key) {
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                        None => {
                            result.entries.insert(*key, g.to_vec());
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
                if self.needs(*b) {
                    let nb = self.value(*b).len();
                    self.acc(grads, *b, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[i % nb] += gi;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let nb = vb.len();
                if self.needs(*a) {
                    self.acc(grads, *a, |ga| {
                        for (i, &gi) in g.iter().enumerate() {
                            ga[i] += gi * vb[i % nb];
                        }
                    });
                }
                if self.needs(*b) {
                    self.acc(grads, *b, |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            gb[i % nb] += gi * va[i];
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    // dA = G Bᵀ
                    self.acc(grads, *a, |ga| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let bp = &vb.data()[p * n..(p + 1) * n];
                                ga[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    // dB = Aᵀ G
                    self.acc(grads, *b, |gb| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = va.data()[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let row = &mut gb[p * n..(p + 1) * n];
                                row.iter_mut().zip(gi).for_each(|(x, y)| *x += aip * y);
                            }
                        }
                    });
                }
            }
            Op::Gather(table, indices) => {
                let d = self.value(*table).cols();
                self.acc(grads, *table, |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        gt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Sigmoid(a) => self.acc(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Softplus(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * stable_sigmoid(va[i]);
                    }
                })
            }
            Op::Tanh(a) => self.acc(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Exp(a) => self.acc(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * out[i];
                }
            }),
            Op::Scale(a, c) => self.acc(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * c;
                }
            }),
            Op::LogSoftmax(a) => {
                let cols = node.value.cols().max(1);
                self.acc(grads, *a, |ga| {
                    for (r, (grow, orow)) in g.chunks(cols).zip(out.chunks(cols)).enumerate() {
                        let gs: f64 = grow.iter().sum();
                        for j in 0..cols {
                            ga[r * cols + j] += grow[j] - orow[j].exp() * gs;
                        }
                    }
                })
            }
            Op::LogSumExp(a, axis) => {
                let va = self.value(*a);
                let (outer, n, inner) = split_axis(va.shape(), *axis);
                let x = va.data();
                self.acc(grads, *a, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = out[o * inner + i];
                            let gr = g[o * inner + i];
                            if r == f64::NEG_INFINITY {
                                continue;
                            }
                            for j in 0..n {
                                let idx = (o * n + j) * inner + i;
                                ga[idx] += gr * (x[idx] - r).exp();
                            }
                        }
                    }
                })
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).shape()[*axis];
                    if self.needs(p) {
                        self.acc(grads, p, |gp| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                                gp[o * n * inner..(o + 1) * n * inner]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, y)| *x += y);
                            }
                        });
                    }
                    offset += n;
                }
            }
            Op::Slice(a, axis, start) => {
                let (outer, n, inner) = split_axis(self.value(*a).shape(), *axis);
                let m = node.value.shape()[*axis];
                self.acc(grads, *a, |ga| {
                    for o in 0..outer {
                        let dst = &mut ga[(o * n + start) * inner..(o * n + start + m) * inner];
                        dst.iter_mut()
                            .zip(&g[o * m * inner..(o + 1) * m * inner])
                            .for_each(|(x, y)| *x += y);
                    }
                })
            }
            Op::LayerNorm(a, rstds) => {
                let cols = node.value.cols().max(1);
                self.acc(grads, *a, |ga| {
                    for (r, rstd) in rstds.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &out[r * cols..(r + 1) * cols];
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgx = gr.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            ga[r * cols + j] += rstd * (gr[j] - mg - xh[j] * mgx);
                        }
                    }
                })
            }
            Op::Attention {
                q,
                k,
                v,
                causal,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (lq, d) = (vq.shape()[0], vq.shape()[1]);
                let lk = vk.shape()[0];
                let dv = vv.shape()[1];
                let scale = 1.0 / (d as f64).sqrt();
                let mut gq = vec![0.0; lq * d];
                let mut gk = vec![0.0; lk * d];
                let mut gv = vec![0.0; lk * dv];
                let mut gs = vec![0.0; lk];
                for i in 0..lq {
                    let visible = if *causal { (i + 1).min(lk) } else { lk };
                    let gi = &g[i * dv..(i + 1) * dv];
                    let pi = &probs[i * lk..i * lk + visible];
                    let mut dot = 0.0;
                    for j in 0..visible {
                        let vj = &vv.data()[j * dv..(j + 1) * dv];
                        let gp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        gs[j] = gp;
                        dot += pi[j] * gp;
                        for (x, y) in gv[j * dv..(j + 1) * dv].iter_mut().zip(gi) {
                            *x += pi[j] * y;
                        }
                    }
                    let qi = &vq.data()[i * d..(i + 1) * d];
                    for j in 0..visible {
                        let s = pi[j] * (gs[j] - dot) * scale;
                        let kj = &vk.data()[j * d..(j + 1) * d];
                        for c in 0..d {
                            gq[i * d + c] += s * kj[c];
                            gk[j * d + c] += s * qi[c];
                        }
                    }
                }
                for (var, gvec) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if self.needs(var) {
                        self.acc(grads, var, |gx| {
                            gx.iter_mut().zip(&gvec).for_each(|(x, y)| *x += y)
                        });
                    }
                }
            }
            Op::Sum(a) => self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Reshape(a) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y))
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(buf);
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×n`.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, x)| *o += aip * x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut t = Tape::new();
        let x = t.scalar(0.0);
        let y = t.sigmoid(x);
        assert_eq!(t.value(y).item().unwrap(), 0.5);
    }

    #[test]
    fn logsumexp_of_two_zeros_is_ln2() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.logsumexp(x, 0).unwrap();
        assert!((t.value(y).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_of_empty_axis_is_neg_inf() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 0]));
        let y = t.logsumexp(x, 1).unwrap();
        assert_eq!(t.value(y).data(), &[f64::NEG_INFINITY, f64::NEG_INFINITY]);
    }

    #[test]
    fn matmul_with_ones() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::full(&[2, 3], 1.0));
        let b = t.constant(Tensor::full(&[3, 1], 1.0));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        assert_eq!(t.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_reports_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(TensorError::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = t.constant(Tensor::zeros(&[4]));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.insert("x", Tensor::scalar(3.0)).unwrap();
        let mut t = Tape::new();
        let x = t.param(&ps, id);
        let y = t.mul(x, x).unwrap();
        t.backward_into(y, &mut ps).unwrap();
        assert_eq!(ps.grad(id).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let mut ps = ParamSet::new();
        let id = ps.insert("x", Tensor::vector(vec![0.3, -1.2])).unwrap();
        let mut t = Tape::new();
        let x = t.param(&ps, id);
        let y = t.logsumexp(x, 0).unwrap();
        let g = t.backward(y).unwrap();
        let g = g.get(ps.key(id)).unwrap();
        let z = 0.3f64.exp() + (-1.2f64).exp();
        assert!((g[0] - 0.3f64.exp() / z).abs() < 1e-15);
        assert!((g[0] + g[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn frozen_leaves_receive_nothing() {
        let mut ps = ParamSet::new();
        let id = ps.insert("x", Tensor::scalar(2.0)).unwrap();
        ps.set_trainable(false);
        let mut t = Tape::new();
        let x = t.param(&ps, id);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap());
        let y = t.log_softmax(x);
        for r in 0..2 {
            let s: f64 = t.value(y).row(r).iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_attention_ignores_future() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let k1 = t.constant(Tensor::matrix(2, 2, vec![0.5, -0.5, 1.0, 2.0]).unwrap());
        let k2 = t.constant(Tensor::matrix(2, 2, vec![0.5, -0.5, -7.0, 9.0]).unwrap());
        let v = t.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let a = t.attention(q, k1, v, true).unwrap();
        let b = t.attention(q, k2, v, true).unwrap();
        assert_eq!(t.value(a).data()[0], t.value(b).data()[0]);
        assert_eq!(t.value(a).data()[0], 1.0);
    }
}
