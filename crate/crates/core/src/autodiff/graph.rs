//! Reverse-mode differentiation over a recorded graph of tensor primitives.
//!
//! Every primitive appends a node holding its forward value. Nodes are
//! created in topological order, so `backward` walks them once in reverse
//! and accumulates adjoints; a node feeding several consumers receives the
//! sum of their contributions.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Softmax(Var),
    LogSumExp(Var, usize),
    SumAll(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Broadcast(Var),
    ClampMin(Var, f64),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation. Single writer; independent graphs may run on
/// different threads.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not reach it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numpy-style broadcast of two shapes (right aligned).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// `in_shape` that broadcasts onto it.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let off = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[i + off] = s;
        }
        s *= in_shape[i];
    }
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// True when `in_shape`, without leading ones, is a suffix of `out_shape`,
/// so broadcast element `k` reads input element `k % len`.
fn is_suffix(in_shape: &[usize], out_shape: &[usize]) -> bool {
    let first = in_shape.iter().position(|&d| d != 1).unwrap_or(in_shape.len());
    out_shape.ends_with(&in_shape[first..])
}

/// Sum `grad` (shaped like the broadcast output) back onto `in_shape`.
fn reduce_to(grad: &Tensor, in_shape: &[usize]) -> Tensor {
    if grad.shape() == in_shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(in_shape);
    if out.len() == 1 {
        out.data_mut()[0] = grad.data().iter().sum();
        return out;
    }
    if is_suffix(in_shape, grad.shape()) {
        let o = out.data_mut();
        for chunk in grad.data().chunks(o.len()) {
            o.iter_mut().zip(chunk).for_each(|(a, g)| *a += g);
        }
        return out;
    }
    let map = broadcast_map(in_shape, grad.shape());
    let o = out.data_mut();
    for (g, &i) in grad.data().iter().zip(&map) {
        o[i] += g;
    }
    out
}

fn binary_values(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let shape = broadcast_shapes(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))?;
    let data = if b.len() == 1 {
        let y = b.data()[0];
        if a.shape() == shape.as_slice() {
            a.data().iter().map(|&x| f(x, y)).collect()
        } else {
            let ma = broadcast_map(a.shape(), &shape);
            ma.iter().map(|&i| f(a.data()[i], y)).collect()
        }
    } else if a.shape() == shape.as_slice() && is_suffix(b.shape(), &shape) {
        let (bd, n) = (b.data(), b.len());
        a.data().iter().enumerate().map(|(k, &x)| f(x, bd[k % n])).collect()
    } else if b.shape() == shape.as_slice() && is_suffix(a.shape(), &shape) {
        let (ad, n) = (a.data(), a.len());
        b.data().iter().enumerate().map(|(k, &y)| f(ad[k % n], y)).collect()
    } else if a.shape() == shape.as_slice() {
        let mb = broadcast_map(b.shape(), &shape);
        a.data().iter().zip(&mb).map(|(&x, &j)| f(x, b.data()[j])).collect()
    } else if b.shape() == shape.as_slice() {
        let ma = broadcast_map(a.shape(), &shape);
        ma.iter().zip(b.data()).map(|(&i, &y)| f(a.data()[i], y)).collect()
    } else {
        let ma = broadcast_map(a.shape(), &shape);
        let mb = broadcast_map(b.shape(), &shape);
        ma.iter()
            .zip(&mb)
            .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
            .collect()
    };
    Tensor::new(shape, data)
}

/// Strides for iterating `shape` as (outer, axis, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Param => true,
            Op::Constant => false,
            _ => self
                .inputs(&op)
                .iter()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::BatchMatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b) => vec![*a, *b],
            Op::Concat(vs, _) => vs.clone(),
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Softmax(a)
            | Op::LogSumExp(a, _)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::Slice(a, _, _)
            | Op::Reshape(a)
            | Op::Broadcast(a)
            | Op::ClampMin(a, _) => vec![*a],
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Param, t, "param")
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Constant, t, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), t, "matmul")
    }

    /// `[B,m,k] x [B,k,n] -> [B,m,n]`; either batch extent may be 1.
    pub fn bmm(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        let bad = || Error::shape("bmm", format!("{:?} x {:?}", ta.shape(), tx.shape()));
        if ta.rank() != 3 || tx.rank() != 3 || ta.shape()[2] != tx.shape()[1] {
            return Err(bad());
        }
        let (ba, bx) = (ta.shape()[0], tx.shape()[0]);
        if ba != bx && ba != 1 && bx != 1 {
            return Err(bad());
        }
        let batch = ba.max(bx);
        let (m, k, n) = (ta.shape()[1], ta.shape()[2], tx.shape()[2]);
        let mut out = vec![0.0; batch * m * n];
        kernels::bmm(
            ta.data(),
            tx.data(),
            &mut out,
            batch,
            ba == batch,
            bx == batch,
            m,
            k,
            n,
        );
        let t = Tensor::new(vec![batch, m, n], out)?;
        self.push(Op::BatchMatMul(a, x), t, "bmm")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = binary_values("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), t, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = binary_values("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), t, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = binary_values("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), t, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = binary_values("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.push(Op::Div(a, b), t, "div")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), t, "neg")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), t, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), t, "add_scalar")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), t, "tanh")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(softplus);
        self.push(Op::Softplus(a), t, "softplus")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), t, "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), t, "ln")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), t, "sqrt")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::recip);
        self.push(Op::Recip(a), t, "reciprocal")
    }

    /// `max(a, c)` elementwise; no gradient flows where the floor is active.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(c));
        self.push(Op::ClampMin(a, c), t, "clamp_min")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = *ta.shape().last().unwrap();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(Op::Softmax(a), t, "softmax")
    }

    /// `ln Σ exp` over `axis`, which is removed from the shape.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(Error::shape(
                "log_sum_exp",
                format!("axis {axis} of {:?}", ta.shape()),
            ));
        }
        let (outer, len, inner) = axis_split(ta.shape(), axis);
        let d = ta.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| d[(o * len + j) * inner + i];
                let mx = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|j| (at(j) - mx).exp()).sum();
                out[o * inner + i] = mx + s.ln();
            }
        }
        let t = Tensor::new(reduced_shape(ta.shape(), axis), out)?;
        self.push(Op::LogSumExp(a, axis), t, "log_sum_exp")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} of {:?}", ta.shape()),
            ));
        }
        let (outer, len, inner) = axis_split(ta.shape(), axis);
        let d = ta.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let t = Tensor::new(reduced_shape(ta.shape(), axis), out)?;
        self.push(Op::SumAxis(a, axis), t, "sum_axis")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(
                *parts
                    .first()
                    .ok_or_else(|| Error::shape("concat", "no inputs"))?,
            )
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let t = Tensor::new(shape, data)?;
        self.push(Op::Concat(parts.to_vec(), axis), t, "concat")
    }

    /// `a[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() || len == 0 || start + len > ta.shape()[axis] {
            return Err(Error::shape(
                "slice",
                format!("{start}+{len} on axis {axis} of {:?}", ta.shape()),
            ));
        }
        let (outer, full, inner) = axis_split(ta.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&ta.data()[base..base + len * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        self.push(Op::Slice(a, axis, start), t, "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        self.push(Op::Reshape(a), t, "reshape")
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        match broadcast_shapes(ta.shape(), shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("{:?} -> {shape:?}", ta.shape()),
                ))
            }
        }
        let data = if is_suffix(ta.shape(), shape) {
            let n: usize = shape.iter().product();
            ta.data().iter().copied().cycle().take(n).collect()
        } else {
            let map = broadcast_map(ta.shape(), shape);
            map.iter().map(|&i| ta.data()[i]).collect()
        };
        let t = Tensor::new(shape.to_vec(), data)?;
        self.push(Op::Broadcast(a), t, "broadcast")
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contrib) in self.local_grads(idx, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            if matches!(node.op, Op::Param) {
                grads[idx] = Some(g);
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Param) {
                grads[i] = None;
            }
        }
        if grads.iter().flatten().any(|t| !t.all_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> (Var, Tensor) {
            let x = val(a);
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            (
                a,
                Tensor::new(x.shape().to_vec(), data).expect("same shape"),
            )
        };
        let out = match &node.op {
            Op::Param | Op::Constant => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut ga = vec![0.0; m * k];
                kernels::matmul_bt(g.data(), tb.data(), &mut ga, m, k, n);
                let mut gb = vec![0.0; k * n];
                kernels::matmul_at(ta.data(), g.data(), &mut gb, m, k, n);
                vec![
                    (*a, Tensor::new(vec![m, k], ga)?),
                    (*b, Tensor::new(vec![k, n], gb)?),
                ]
            }
            Op::BatchMatMul(a, x) => {
                let (ta, tx) = (val(*a), val(*x));
                let batch = g.shape()[0];
                let (m, k, n) = (ta.shape()[1], ta.shape()[2], tx.shape()[2]);
                let a_b = ta.shape()[0] == batch;
                let x_b = tx.shape()[0] == batch;
                let mut ga = vec![0.0; batch * m * k];
                let mut gx = vec![0.0; batch * k * n];
                let gd = g.data();
                crate::par::for_each_chunk_mut(&mut ga, m * k, |b, out| {
                    let xb = if x_b {
                        &tx.data()[b * k * n..(b + 1) * k * n]
                    } else {
                        &tx.data()[..k * n]
                    };
                    kernels::matmul_bt(&gd[b * m * n..(b + 1) * m * n], xb, out, m, k, n);
                });
                crate::par::for_each_chunk_mut(&mut gx, k * n, |b, out| {
                    let ab = if a_b {
                        &ta.data()[b * m * k..(b + 1) * m * k]
                    } else {
                        &ta.data()[..m * k]
                    };
                    kernels::matmul_at(ab, &gd[b * m * n..(b + 1) * m * n], out, m, k, n);
                });
                let ga = Tensor::new(vec![batch, m, k], ga)?;
                let gx = Tensor::new(vec![batch, k, n], gx)?;
                vec![
                    (*a, reduce_to(&ga, ta.shape())),
                    (*x, reduce_to(&gx, tx.shape())),
                ]
            }
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())),
                (*b, reduce_to(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, reduce_to(g, val(*a).shape())),
                (*b, reduce_to(&g.map(|v| -v), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let ga = binary_values("mul", g, val(*b), |x, y| x * y)?;
                let gb = binary_values("mul", g, val(*a), |x, y| x * y)?;
                vec![
                    (*a, reduce_to(&ga, val(*a).shape())),
                    (*b, reduce_to(&gb, val(*b).shape())),
                ]
            }
            Op::Div(a, b) => {
                let ga = binary_values("div", g, val(*b), |x, y| x / y)?;
                // d(a/b)/db = -y/b
                let gy = binary_values("mul", g, y, |x, y| x * y)?;
                let gb = binary_values("div", &gy, val(*b), |x, y| -x / y)?;
                vec![
                    (*a, reduce_to(&ga, val(*a).shape())),
                    (*b, reduce_to(&gb, val(*b).shape())),
                ]
            }
            Op::Neg(a) => vec![(*a, g.map(|v| -v))],
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Sigmoid(a) => vec![elementwise(*a, &|_, y, g| g * y * (1.0 - y))],
            Op::Tanh(a) => vec![elementwise(*a, &|_, y, g| g * (1.0 - y * y))],
            Op::Softplus(a) => vec![elementwise(*a, &|x, _, g| g * sigmoid(x))],
            Op::Exp(a) => vec![elementwise(*a, &|_, y, g| g * y)],
            Op::Ln(a) => vec![elementwise(*a, &|x, _, g| g / x)],
            Op::Sqrt(a) => vec![elementwise(*a, &|_, y, g| g * 0.5 / y)],
            Op::Recip(a) => vec![elementwise(*a, &|_, y, g| -g * y * y)],
            Op::ClampMin(a, c) => {
                let c = *c;
                vec![elementwise(*a, &|x, _, g| if x > c { g } else { 0.0 })]
            }
            Op::Softmax(a) => {
                let n = *y.shape().last().unwrap();
                let mut data = vec![0.0; y.len()];
                for ((dst, yr), gr) in data
                    .chunks_mut(n)
                    .zip(y.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yi), &gi) in dst.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                vec![(*a, Tensor::new(y.shape().to_vec(), data)?)]
            }
            Op::LogSumExp(a, axis) => {
                let x = val(*a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut data = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            let xi = (o * len + j) * inner + i;
                            let yi = o * inner + i;
                            data[xi] = g.data()[yi] * (x.data()[xi] - y.data()[yi]).exp();
                        }
                    }
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::SumAxis(a, axis) => {
                let x = val(*a);
                let (outer, len, inner) = axis_split(x.shape(), *axis);
                let mut data = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut data[(o * len + j) * inner..(o * len + j + 1) * inner];
                        dst.copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(y.shape(), *axis);
                let mut out: Vec<(Var, Vec<f64>)> = parts
                    .iter()
                    .map(|&p| (p, Vec::with_capacity(val(p).len())))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, buf) in out.iter_mut() {
                        let w = val(*p).shape()[*axis] * inner;
                        buf.extend_from_slice(&g.data()[off..off + w]);
                        off += w;
                    }
                }
                out.into_iter()
                    .map(|(p, d)| Ok((p, Tensor::new(val(p).shape().to_vec(), d)?)))
                    .collect::<Result<Vec<_>>>()?
            }
            Op::Slice(a, axis, start) => {
                let x = val(*a);
                let (outer, full, inner) = axis_split(x.shape(), *axis);
                let len = y.shape()[*axis];
                let mut data = vec![0.0; x.len()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    data[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), data)?)]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(*a).shape().to_vec())?)],
            Op::Broadcast(a) => vec![(*a, reduce_to(g, val(*a).shape()))],
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn primitive_values() {
        let mut g = Graph::new();
        let z = g.constant(s(0.0)).unwrap();
        let sg = g.sigmoid(z).unwrap();
        assert_eq!(g.value(sg).item(), Some(0.5));
        let sp = g.softplus(z).unwrap();
        assert!((g.value(sp).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let v = g.constant(Tensor::zeros(&[3])).unwrap();
        let sm = g.softmax(v).unwrap();
        for &p in g.value(sm).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn square_and_sigmoid_gradients() {
        let mut g = Graph::new();
        let x = g.param(s(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.wrt(x).item(), Some(6.0));

        let mut g = Graph::new();
        let x = g.param(s(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        let gr = g.backward(y).unwrap();
        assert_eq!(gr.wrt(x).item(), Some(0.25));
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(s(2.0)).unwrap();
        let unused = g.param(Tensor::ones(&[2, 2])).unwrap();
        let y = g.exp(x).unwrap();
        let gr = g.backward(y).unwrap();
        assert!(gr.get(unused).is_none());
        assert_eq!(gr.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(s(0.0)).unwrap();
        assert!(matches!(g.ln(x), Err(Error::NonFinite(_))));
        assert!(matches!(g.recip(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3])).unwrap();
        let b = g.constant(Tensor::ones(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
        let c = g.constant(Tensor::ones(&[4])).unwrap();
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn broadcasting_add_reduces_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::ones(&[2, 3])).unwrap();
        let b = g.param(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let l = g.sum(c).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.wrt(b).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(gr.wrt(a).data(), &[1.0; 6]);
    }

    #[test]
    fn suffix_detection() {
        assert!(is_suffix(&[1, 3], &[4, 3]));
        assert!(is_suffix(&[3], &[2, 4, 3]));
        assert!(is_suffix(&[4, 3], &[4, 3]));
        assert!(!is_suffix(&[4, 1], &[4, 3]));
        assert!(!is_suffix(&[2, 1, 3], &[2, 2, 3]));
    }

    #[test]
    fn broadcast_map_middle_axis() {
        let m = broadcast_map(&[2, 1, 3], &[2, 2, 3]);
        assert_eq!(m, vec![0, 1, 2, 0, 1, 2, 3, 4, 5, 3, 4, 5]);
    }
}
