//! Eager reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s during one
//! forward pass. [`Tape::backward`] replays the adjoints in reverse order and
//! returns a [`Gradients`] table. A tape is built per forward pass and
//! dropped after the backward pass.
//!
//! ```
//! use endogede_core::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.square().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, numel, Tensor};

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a Tensor,
    pub out: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// Adjoints of a scalar loss with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.var(value, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.var(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn var(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = ids.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: ids,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Propagates adjoints from a one-element `loss` back to every leaf.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must hold one value, got shape {:?}", root.value.shape()),
            ));
        }
        if !root.value.is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", root.value.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| nodes[p].value.as_ref()).collect(),
                needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        let oi = i + rank - input.len();
        strides[oi] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` over the broadcast output.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    if a == out && numel(b) == 1 {
        (0..n).for_each(|i| f(i, i, 0));
        return;
    }
    if b == out && numel(a) == 1 {
        (0..n).for_each(|i| f(i, 0, i));
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

#[derive(Clone, Copy)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }

    /// Partial derivatives `(d/da, d/db)`.
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryOp::Add => (1.0, 1.0),
            BinaryOp::Sub => (1.0, -1.0),
            BinaryOp::Mul => (b, a),
            BinaryOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The single value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary(self, other: Var<'t>, op: BinaryOp) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shape(op.name(), a.shape(), b.shape()))?;
        let mut out = vec![0.0; numel(&out_shape)];
        let (ad, bd) = (a.data(), b.data());
        for_each_broadcast(&out_shape, a.shape(), b.shape(), |o, ia, ib| {
            out[o] = op.eval(ad[ia], bd[ib]);
        });
        let value = Tensor::new(&out_shape, out)?;
        let backward: BackwardFn = Box::new(move |ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            let mut ga = ctx.needs[0].then(|| vec![0.0; a.len()]);
            let mut gb = ctx.needs[1].then(|| vec![0.0; b.len()]);
            let (ad, bd, g) = (a.data(), b.data(), ctx.grad.data());
            for_each_broadcast(ctx.out.shape(), a.shape(), b.shape(), |o, ia, ib| {
                let (da, db) = op.partials(ad[ia], bd[ib]);
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += g[o] * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += g[o] * db;
                }
            });
            vec![
                ga.map(|d| Tensor::new(a.shape(), d).expect("shape")),
                gb.map(|d| Tensor::new(b.shape(), d).expect("shape")),
            ]
        });
        Ok(self.tape.push(value, &[self, other], backward))
    }

    /// Element-wise sum with broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Div)
    }

    /// Applies `f` element-wise; `df(x, y)` is the derivative at input `x`
    /// with output `y`.
    fn unary(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let value = self.value().map(f);
        let backward: BackwardFn = Box::new(move |ctx| {
            let x = ctx.inputs[0];
            let data = x
                .data()
                .iter()
                .zip(ctx.out.data())
                .zip(ctx.grad.data())
                .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::new(x.shape(), data).expect("shape"))]
        });
        self.tape.push(value, &[self], backward)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|x| -x, |_, _| -1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Clamps to `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    /// Sum of all elements as a rank-0 var.
    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let value = Tensor::scalar(v.data().iter().sum());
        let backward: BackwardFn = Box::new(|ctx| {
            let g = ctx.grad.item();
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        });
        self.tape.push(value, &[self], backward)
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over the last axis, keeping it with size 1.
    pub fn sum_last(self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let c = *shape.last().unwrap_or(&1);
        let mut out_shape = shape.clone();
        if let Some(l) = out_shape.last_mut() {
            *l = 1;
        }
        let data = v.data().chunks(c.max(1)).map(|ch| ch.iter().sum()).collect();
        let value = Tensor::new(&out_shape, data).expect("shape");
        let backward: BackwardFn = Box::new(move |ctx| {
            let g = ctx.grad.data();
            let x = ctx.inputs[0];
            let data = (0..x.len()).map(|i| g[i / c]).collect();
            vec![Some(Tensor::new(x.shape(), data).expect("shape"))]
        });
        self.tape.push(value, &[self], backward)
    }

    /// Mean over the last axis, keeping it with size 1.
    pub fn mean_last(self) -> Var<'t> {
        let c = *self.shape().last().unwrap_or(&1) as f64;
        self.sum_last().scale(1.0 / c)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        let backward: BackwardFn = Box::new(|ctx| {
            let x = ctx.inputs[0];
            vec![Some(ctx.grad.clone().reshape(x.shape()).expect("shape"))]
        });
        Ok(self.tape.push(value, &[self], backward))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&other.value())?;
        let backward: BackwardFn = Box::new(|ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let g = ctx.grad.data();
            // dA = G·Bᵀ, dB = Aᵀ·G
            let ga = ctx.needs[0].then(|| {
                let bt = b.transpose().expect("rank 2");
                Tensor::new(&[m, k], matmul_raw(g, bt.data(), m, n, k)).expect("shape")
            });
            let gb = ctx.needs[1].then(|| {
                let at = a.transpose().expect("rank 2");
                Tensor::new(&[k, n], matmul_raw(at.data(), g, k, m, n)).expect("shape")
            });
            vec![ga, gb]
        });
        Ok(self.tape.push(value, &[self, other], backward))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        let backward: BackwardFn =
            Box::new(|ctx| vec![Some(ctx.grad.transpose().expect("rank 2"))]);
        Ok(self.tape.push(value, &[self], backward))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_last", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &values[0].shape()[..values[0].rank() - 1];
        for v in &values {
            if &v.shape()[..v.rank() - 1] != lead {
                return Err(Error::shape("concat_last", values[0].shape(), v.shape()));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        let backward: BackwardFn = Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut offset = 0;
            let mut out = Vec::with_capacity(widths.len());
            for (i, &w) in widths.iter().enumerate() {
                if ctx.needs[i] {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    out.push(Some(Tensor::new(ctx.inputs[i].shape(), d).expect("shape")));
                } else {
                    out.push(None);
                }
                offset += w;
            }
            out
        });
        Ok(tape.push(value, parts, backward))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let shape = v.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::invalid("slice_last", "rank 0"))?;
        if start + len > c {
            return Err(Error::invalid(
                "slice_last",
                format!("range {start}..{} exceeds axis of size {c}", start + len),
            ));
        }
        let rows = v.len() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * c + start..r * c + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let value = Tensor::new(&out_shape, data)?;
        let backward: BackwardFn = Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![0.0; rows * c];
            for r in 0..rows {
                d[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::new(ctx.inputs[0].shape(), d).expect("shape"))]
        });
        Ok(self.tape.push(value, &[self], backward))
    }

    /// Picks `k` columns per row of an `[n, e]` matrix: `out[i][j] =
    /// self[i][cols[i*k + j]]`.
    pub fn gather_cols(self, cols: &[usize], k: usize) -> Result<Var<'t>> {
        let v = self.value();
        let &[n, e] = v.shape() else {
            return Err(Error::invalid("gather_cols", format!("rank-2 required, got {:?}", v.shape())));
        };
        if cols.len() != n * k || cols.iter().any(|&c| c >= e) {
            return Err(Error::invalid("gather_cols", "index table does not match input"));
        }
        let data = (0..n * k).map(|i| v.data()[(i / k) * e + cols[i]]).collect();
        let value = Tensor::new(&[n, k], data)?;
        let cols = cols.to_vec();
        let backward: BackwardFn = Box::new(move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![0.0; n * e];
            for i in 0..n * k {
                d[(i / k) * e + cols[i]] += g[i];
            }
            vec![Some(Tensor::new(&[n, e], d).expect("shape"))]
        });
        Ok(self.tape.push(value, &[self], backward))
    }

    /// Inverse of [`gather_cols`](Self::gather_cols): places an `[n, k]`
    /// matrix into `[n, e]` zeros.
    pub fn scatter_cols(self, cols: &[usize], e: usize) -> Result<Var<'t>> {
        let v = self.value();
        let &[n, k] = v.shape() else {
            return Err(Error::invalid("scatter_cols", format!("rank-2 required, got {:?}", v.shape())));
        };
        if cols.len() != n * k || cols.iter().any(|&c| c >= e) {
            return Err(Error::invalid("scatter_cols", "index table does not match input"));
        }
        let mut data = vec![0.0; n * e];
        for i in 0..n * k {
            data[(i / k) * e + cols[i]] += v.data()[i];
        }
        let value = Tensor::new(&[n, e], data)?;
        let cols = cols.to_vec();
        let backward: BackwardFn = Box::new(move |ctx| {
            let g = ctx.grad.data();
            let d = (0..n * k).map(|i| g[(i / k) * e + cols[i]]).collect();
            vec![Some(Tensor::new(&[n, k], d).expect("shape"))]
        });
        Ok(self.tape.push(value, &[self], backward))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        let v = self.value();
        let c = *v.shape().last().unwrap_or(&1);
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / s));
        }
        let value = Tensor::new(v.shape(), data).expect("shape");
        let backward: BackwardFn = Box::new(move |ctx| {
            let (y, g) = (ctx.out.data(), ctx.grad.data());
            let mut d = vec![0.0; y.len()];
            for r in 0..y.len() / c.max(1) {
                let s = r * c;
                let dot: f64 = (s..s + c).map(|i| y[i] * g[i]).sum();
                for i in s..s + c {
                    d[i] = y[i] * (g[i] - dot);
                }
            }
            vec![Some(Tensor::new(ctx.out.shape(), d).expect("shape"))]
        });
        self.tape.push(value, &[self], backward)
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

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive inputs.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Inverse of the logistic sigmoid for inputs in `(0, 1)`.
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}
