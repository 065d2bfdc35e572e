//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and the indices
//! of its inputs. Backpropagation walks the tape once in reverse order; for
//! each node the contributions to its inputs are accumulated left to right,
//! which makes gradient bits reproducible run to run.

use std::cell::{Ref, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Result, ScfmError};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Softplus(usize),
    Square(usize),
    Clamp { src: usize, lo: f64, hi: f64 },
    Sum(usize),
    Mean(usize),
    SumAxis { src: usize, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Concat { srcs: Vec<usize>, axis: usize },
    LogSumExp { src: usize, axis: usize },
    Broadcast(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the output.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

const PAR_MATMUL_THRESHOLD: usize = 1 << 16;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        self.check_owner(output)?;
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id].value;
        if out.numel() != 1 {
            return Err(ScfmError::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::ones(out.shape()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contribs = local_grads(&nodes, id, &g);
            for (input, c) in contribs {
                if !nodes[input].requires_grad {
                    continue;
                }
                accumulate(&mut grads[input], c);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(ScfmError::Graph("variable belongs to a different tape".into()))
        }
    }
}

/// `∂output/∂p` for every `p` in `wrt`, in the same order.
pub fn eval_and_grad(output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
    let tape = output.tape;
    for w in wrt {
        tape.check_owner(*w)?;
    }
    let grads = tape.backward(output)?;
    Ok(wrt.iter().map(|w| grads.get(*w)).collect())
}

fn accumulate(slot: &mut Option<Tensor>, c: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                *a += b;
            }
        }
        None => *slot = Some(c),
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(ScfmError::Shape(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// For each flat index of `out`, the flat index of the broadcast source.
fn index_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let n: usize = out.iter().product();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { s };
        s *= src[i];
    }
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out[d] {
                break;
            }
            offset -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

fn expand(src: &Tensor, out_shape: &[usize]) -> Tensor {
    if src.shape() == out_shape {
        return src.clone();
    }
    let map = index_map(out_shape, src.shape());
    let d = src.data();
    Tensor::new(out_shape.to_vec(), map.iter().map(|&i| d[i]).collect()).expect("mapped")
}

fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let map = index_map(g.shape(), shape);
    let mut out = Tensor::zeros(shape);
    let o = out.data_mut();
    for (gi, &si) in g.data().iter().zip(&map) {
        o[si] += gi;
    }
    out
}

fn binary_values(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let ea = expand(a, &shape);
    let eb = expand(b, &shape);
    let data = ea.data().iter().zip(eb.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(shape, data)
}

/// Splits a shape around `axis` into (outer, len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---------------------------------------------------------------------------
// dense kernels

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let row = |(i, orow): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MATMUL_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn local_grads(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to(g, val(*a).shape())),
            (*b, reduce_to(g, val(*b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce_to(g, val(*a).shape())),
            (*b, reduce_to(&g.map(|x| -x), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ea = expand(va, g.shape());
            let eb = expand(vb, g.shape());
            let ga = binary_values(g, &eb, |x, y| x * y).expect("same shape");
            let gb = binary_values(g, &ea, |x, y| x * y).expect("same shape");
            vec![(*a, reduce_to(&ga, va.shape())), (*b, reduce_to(&gb, vb.shape()))]
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ea = expand(va, g.shape());
            let eb = expand(vb, g.shape());
            let ga = binary_values(g, &eb, |x, y| x / y).expect("same shape");
            let mut gb = g.clone();
            for ((o, &x), &y) in gb.data_mut().iter_mut().zip(ea.data()).zip(eb.data()) {
                *o = -*o * x / (y * y);
            }
            vec![(*a, reduce_to(&ga, va.shape())), (*b, reduce_to(&gb, vb.shape()))]
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            let bt = transpose(vb.data(), k, n);
            let ga = matmul_kernel(g.data(), &bt, m, n, k);
            let at = transpose(va.data(), m, k);
            let gb = matmul_kernel(&at, g.data(), k, m, n);
            vec![
                (*a, Tensor::new(vec![m, k], ga).expect("shape")),
                (*b, Tensor::new(vec![k, n], gb).expect("shape")),
            ]
        }
        Op::Exp(a) => {
            let out = &node.value;
            vec![(*a, binary_values(g, out, |x, y| x * y).expect("same shape"))]
        }
        Op::Log(a) => vec![(*a, binary_values(g, val(*a), |x, y| x / y).expect("same shape"))],
        Op::Tanh(a) => {
            let out = &node.value;
            vec![(*a, binary_values(g, out, |x, y| x * (1.0 - y * y)).expect("same shape"))]
        }
        Op::Softplus(a) => vec![(
            *a,
            binary_values(g, val(*a), |x, y| x * sigmoid(y)).expect("same shape"),
        )],
        Op::Square(a) => vec![(
            *a,
            binary_values(g, val(*a), |x, y| 2.0 * x * y).expect("same shape"),
        )],
        Op::Clamp { src, lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            vec![(
                *src,
                binary_values(g, val(*src), |x, y| if y < lo || y > hi { 0.0 } else { x })
                    .expect("same shape"),
            )]
        }
        Op::Sum(a) => {
            let gv = g.data()[0];
            vec![(*a, Tensor::full(val(*a).shape(), gv))]
        }
        Op::Mean(a) => {
            let n = val(*a).numel() as f64;
            let gv = g.data()[0] / n;
            vec![(*a, Tensor::full(val(*a).shape(), gv))]
        }
        Op::SumAxis { src, axis } => {
            let shape = val(*src).shape();
            let (outer, len, inner) = split_axis(shape, *axis);
            let mut out = Tensor::zeros(shape);
            let o = out.data_mut();
            let gd = g.data();
            for p in 0..outer {
                for l in 0..len {
                    for q in 0..inner {
                        o[(p * len + l) * inner + q] = gd[p * inner + q];
                    }
                }
            }
            vec![(*src, out)]
        }
        Op::Slice { src, axis, start } => {
            let shape = val(*src).shape();
            let (outer, len, inner) = split_axis(shape, *axis);
            let width = g.shape()[*axis];
            let mut out = Tensor::zeros(shape);
            let o = out.data_mut();
            let gd = g.data();
            for p in 0..outer {
                for l in 0..width {
                    let dst = (p * len + start + l) * inner;
                    let srci = (p * width + l) * inner;
                    o[dst..dst + inner].copy_from_slice(&gd[srci..srci + inner]);
                }
            }
            vec![(*src, out)]
        }
        Op::Concat { srcs, axis } => {
            let out_shape = g.shape();
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let gd = g.data();
            let mut offset = 0;
            let mut res = Vec::with_capacity(srcs.len());
            for &s in srcs {
                let sshape = val(s).shape();
                let w = sshape[*axis];
                let mut part = Vec::with_capacity(outer * w * inner);
                for p in 0..outer {
                    let base = (p * total + offset) * inner;
                    part.extend_from_slice(&gd[base..base + w * inner]);
                }
                res.push((s, Tensor::new(sshape.to_vec(), part).expect("shape")));
                offset += w;
            }
            res
        }
        Op::LogSumExp { src, axis } => {
            let input = val(*src);
            let (outer, len, inner) = split_axis(input.shape(), *axis);
            let out = node.value.data();
            let gd = g.data();
            let x = input.data();
            let mut res = Tensor::zeros(input.shape());
            let o = res.data_mut();
            for p in 0..outer {
                for q in 0..inner {
                    let lse = out[p * inner + q];
                    let gv = gd[p * inner + q];
                    for l in 0..len {
                        let i = (p * len + l) * inner + q;
                        o[i] = gv * (x[i] - lse).exp();
                    }
                }
            }
            vec![(*src, res)]
        }
        Op::Broadcast(a) => vec![(*a, reduce_to(g, val(*a).shape()))],
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).expect("same numel"))],
    }
}

// ---------------------------------------------------------------------------
// operations on Var

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Forward value (borrowed from the tape).
    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables from different tapes cannot be combined"
        );
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        let rg = self.requires_grad();
        self.tape.push(v, op, rg)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(&other);
        let v = binary_values(&self.value(), &other.value(), f)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(v, op, rg))
    }

    pub fn try_add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn try_sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn try_mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn try_div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Matrix product of two 2-D nodes.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let v = {
            let (a, b) = (self.value(), other.value());
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(ScfmError::Shape(format!(
                    "matmul of {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![m, n], matmul_kernel(a.data(), b.data(), m, k, n))?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id), rg))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    /// Elementwise clamp; zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { src: self.id, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let s: f64 = v.data().iter().sum::<f64>() / v.numel() as f64;
        drop(v);
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), rg)
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(ScfmError::Shape(format!("axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for p in 0..outer {
            for l in 0..len {
                for q in 0..inner {
                    out[p * inner + q] += d[(p * len + l) * inner + q];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        drop(v);
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(shape, out)?, Op::SumAxis { src: self.id, axis }, rg))
    }

    /// Entries `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() || start > end || end > v.shape()[axis] {
            return Err(ScfmError::Shape(format!(
                "slice [{start},{end}) on axis {axis} of {:?}",
                v.shape()
            )));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let w = end - start;
        let d = v.data();
        let mut out = Vec::with_capacity(outer * w * inner);
        for p in 0..outer {
            let base = (p * len + start) * inner;
            out.extend_from_slice(&d[base..base + w * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = w;
        drop(v);
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| ScfmError::Shape("concat of zero parts".into()))?;
        let tape = first.tape;
        let base_shape = first.shape();
        if axis >= base_shape.len() {
            return Err(ScfmError::Shape(format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for p in parts {
            first.same_tape(p);
            let s = p.shape();
            let ok = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(ScfmError::Shape(format!(
                    "concat of {base_shape:?} and {s:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
            for p in 0..outer {
                for v in &vals {
                    let w = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[p * w..(p + 1) * w]);
                }
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        Ok(tape.push(Tensor::new(shape, out)?, Op::Concat { srcs: ids, axis }, rg))
    }

    /// Numerically stable `log Σ exp` along `axis`, removing it.
    pub fn logsumexp(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(ScfmError::Shape(format!("axis {axis} out of range for {:?}", v.shape())));
        }
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for p in 0..outer {
            for q in 0..inner {
                let at = |l: usize| d[(p * len + l) * inner + q];
                let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                out[p * inner + q] = if m == f64::NEG_INFINITY {
                    m
                } else {
                    m + (0..len).map(|l| (at(l) - m).exp()).sum::<f64>().ln()
                };
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        drop(v);
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(Tensor::new(shape, out)?, Op::LogSumExp { src: self.id, axis }, rg))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let target = broadcast_shape(&self.shape(), shape)?;
        if target != shape {
            return Err(ScfmError::Shape(format!(
                "{:?} cannot broadcast to {shape:?}",
                self.shape()
            )));
        }
        let v = expand(&self.value(), shape);
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::Broadcast(self.id), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(v, Op::Reshape(self.id), rg))
    }

    /// Same value, no gradient flows back through the result.
    pub fn stop_gradient(self) -> Var<'t> {
        let v = self.value().clone();
        self.tape.push(v, Op::Leaf, false)
    }

    /// Multiplication by a constant.
    pub fn scale(self, c: f64) -> Var<'t> {
        let k = self.tape.scalar(c);
        self * k
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let k = self.tape.scalar(c);
        self + k
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.try_add(rhs).expect("add: incompatible shapes")
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.try_sub(rhs).expect("sub: incompatible shapes")
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.try_mul(rhs).expect("mul: incompatible shapes")
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.try_div(rhs).expect("div: incompatible shapes")
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x * x;
        let g = eval_and_grad(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[6.0]);
    }

    #[test]
    fn logsumexp_of_zeros() {
        let tape = Tape::new();
        let x = tape.param(t1(&[0.0, 0.0]));
        let y = x.logsumexp(0).unwrap();
        assert!((y.item() - std::f64::consts::LN_2).abs() < 1e-15);
        let g = eval_and_grad(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.5, 0.5]);
    }

    #[test]
    fn stop_gradient_blocks_one_factor() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = (x.stop_gradient() * x).sum();
        let g = eval_and_grad(y, &[x]).unwrap();
        assert_eq!(g[0].data(), &[2.0]);
    }

    #[test]
    fn stop_gradient_examples() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(5.0));
        let s = x.stop_gradient();
        assert_eq!(s.item(), 5.0);
        let g = eval_and_grad(s.sum(), &[x]).unwrap();
        assert_eq!(g[0].data(), &[0.0]);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.7));
        let loss = (x.stop_gradient() - x).square().sum();
        assert_eq!(loss.item(), 0.0);
        let g = eval_and_grad(loss, &[x]).unwrap();
        assert_eq!(g[0].data()[0], 0.0);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.param(Tensor::scalar(-4.0));
        let loss = (x.stop_gradient() * y).sum();
        let g = eval_and_grad(loss, &[x, y]).unwrap();
        assert_eq!(g[0].data(), &[0.0]);
        assert_eq!(g[1].data(), &[3.0]);
    }

    #[test]
    fn non_scalar_output_is_a_shape_error() {
        let tape = Tape::new();
        let x = tape.param(t1(&[1.0, 2.0]));
        assert!(matches!(eval_and_grad(x, &[x]), Err(ScfmError::Shape(_))));
    }

    #[test]
    fn foreign_variable_is_a_graph_error() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = tape.param(Tensor::scalar(1.0));
        let y = other.param(Tensor::scalar(1.0));
        assert!(matches!(eval_and_grad(x.sum(), &[y]), Err(ScfmError::Graph(_))));
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let tape = Tape::new();
        let a = tape.param(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.param(Tensor::new(vec![1, 3], vec![10., 20., 30.]).unwrap());
        let y = (a * b).sum();
        let g = eval_and_grad(y, &[a, b]).unwrap();
        assert_eq!(g[0].data(), &[10., 20., 30., 10., 20., 30.]);
        assert_eq!(g[1].data(), &[5., 7., 9.]);
    }

    #[test]
    fn matmul_gradients() {
        let tape = Tape::new();
        let a = tape.param(Tensor::new(vec![1, 2], vec![1., 2.]).unwrap());
        let b = tape.param(Tensor::new(vec![2, 1], vec![3., 4.]).unwrap());
        let y = a.matmul(b).unwrap().sum();
        assert_eq!(y.item(), 11.0);
        let g = eval_and_grad(y, &[a, b]).unwrap();
        assert_eq!(g[0].data(), &[3., 4.]);
        assert_eq!(g[1].data(), &[1., 2.]);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let tape = Tape::new();
        let a = tape.param(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let l = a.slice(1, 0, 1).unwrap();
        let r = a.slice(1, 1, 3).unwrap();
        let c = Var::concat(&[l, r], 1).unwrap();
        assert!(c.value().bit_eq(&a.value()));
        let w = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let g = eval_and_grad((c * w).sum(), &[a]).unwrap();
        assert_eq!(g[0].data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn sum_axis_and_reshape() {
        let tape = Tape::new();
        let a = tape.param(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let s0 = a.sum_axis(0).unwrap();
        assert_eq!(s0.value().data(), &[5., 7., 9.]);
        let s1 = a.sum_axis(1).unwrap();
        assert_eq!(s1.value().data(), &[6., 15.]);
        let r = a.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), vec![3, 2]);
    }

    #[test]
    fn tape_is_reusable_after_backward() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = (x * x).sum();
        let g1 = eval_and_grad(y, &[x]).unwrap();
        let g2 = eval_and_grad(y, &[x]).unwrap();
        assert!(g1[0].bit_eq(&g2[0]));
        let z = (x * x * x).sum();
        let g3 = eval_and_grad(z, &[x]).unwrap();
        assert_eq!(g3[0].data(), &[12.0]);
    }
}
