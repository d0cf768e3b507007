//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose inputs were recorded earlier, so the node
//! order is already topological and `backward` is a single reverse sweep.
//! Leaf gradients are accumulated with `+=`; intermediate gradients are
//! dropped as soon as they have been propagated.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::attention;
use crate::bap;
use crate::error::{Error, Result};
use crate::nn::{self, PoolMode};
use crate::tensor::{Real, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Relu(Var),
    BroadcastMul { map: Var, x: Var },
    MatMul(Var, Var),
    AddRow { x: Var, bias: Var },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: nn::Padding,
        /// Patch matrix kept from the forward pass for the weight gradient.
        col: Option<Vec<T>>,
    },
    GlobalPool { x: Var, mode: PoolMode, argmax: Vec<usize> },
    SignSqrt(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Resize { x: Var },
    Bap { f: Var, a: Var, mode: PoolMode, argmax: Vec<usize> },
    ChannelScale { x: Var, scales: Vec<T> },
    CenterLoss { p: Var, centers: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Relu(..) => "relu",
            Op::BroadcastMul { .. } => "broadcast_mul",
            Op::MatMul(..) => "matmul",
            Op::AddRow { .. } => "add_row",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalPool { .. } => "global_pool",
            Op::SignSqrt(..) => "sign_sqrt",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::Resize { .. } => "bilinear_resize",
            Op::Bap { .. } => "bap",
            Op::ChannelScale { .. } => "channel_scale",
            Op::CenterLoss { .. } => "center_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It participates in differentiation when the tensor
    /// was created with [`Tensor::with_grad`].
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_unchecked(tensor, Op::Leaf, requires_grad)
    }

    /// Records a leaf that always participates in differentiation.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push_unchecked(tensor, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push_unchecked(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient of the loss with respect to a leaf, after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Adds this tape's gradient for `v` into `target`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            index,
            tape: self.id,
        }
    }

    /// Appends an op result after validating inputs and finiteness.
    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(Error::DivisionByZero { op: "div" });
        }
        let out = self.zip_with(a, b, |x, y| x / y);
        self.push(out, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `a + s` elementwise.
    pub fn shift(&mut self, a: Var, s: T) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::Shift(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    /// `map[..., 1] ⊙ x[..., C]`: the single-channel map scales every channel.
    pub fn broadcast_mul(&mut self, map: Var, x: Var) -> Result<Var> {
        self.check(map)?;
        self.check(x)?;
        let (sm, sx) = (self.shape(map), self.shape(x));
        let ok = sm.len() == sx.len()
            && sm.last() == Some(&1)
            && sm[..sm.len() - 1] == sx[..sx.len() - 1];
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "broadcast_mul",
                lhs: sm.to_vec(),
                rhs: sx.to_vec(),
            });
        }
        let c = *sx.last().unwrap();
        let (m, xv) = (self.value(map).data(), self.value(x).data());
        let data = xv
            .chunks_exact(c)
            .zip(m)
            .flat_map(|(px, &w)| px.iter().map(move |&v| w * v))
            .collect();
        let out = Tensor::from_parts(sx.to_vec(), data);
        self.push(out, Op::BroadcastMul { map, x }, &[map, x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::from_parts(vec![m, n], out);
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// Adds `bias[n]` to every row of `x[m, n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let n = sx[1];
        let bv = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&v, &b)| v + b))
            .collect();
        let out = Tensor::from_parts(sx.to_vec(), data);
        self.push(out, Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let s = t.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let m = s / T::from_f64(t.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).clone().reshape(shape)?;
        let out = Tensor::from_parts(out.shape().to_vec(), out.into_data());
        self.push(out, Op::Reshape(a), &[a])
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape supports exactly
    /// one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.consumed {
            return Err(Error::DoubleBackward);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.index] = Some(vec![T::one()]);
        for i in (0..=loss.index).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            for (input, delta) in self.backward_node(i, &g) {
                accumulate(&mut self.grads[input.index], delta);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                self.grads[i] = None;
            } else if self.grads[i].is_none() {
                self.grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        let val = |v: Var| self.nodes[v.index].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if self.needs(a) {
                    out.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    out.push((b, g.to_vec()));
                }
            }
            &Op::Sub(a, b) => {
                if self.needs(a) {
                    out.push((a, g.to_vec()));
                }
                if self.needs(b) {
                    out.push((b, g.iter().map(|&v| -v).collect()));
                }
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(&g, &y)| g * y).collect()));
                }
                if self.needs(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(&g, &x)| g * x).collect()));
                }
            }
            &Op::Div(a, b) => {
                let (xa, xb) = (val(a), val(b));
                if self.needs(a) {
                    out.push((a, g.iter().zip(xb).map(|(&g, &y)| g / y).collect()));
                }
                if self.needs(b) {
                    let d = g
                        .iter()
                        .zip(xa.iter().zip(xb))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect();
                    out.push((b, d));
                }
            }
            &Op::Scale(a, s) => out.push((a, g.iter().map(|&v| v * s).collect())),
            &Op::Shift(a) => out.push((a, g.to_vec())),
            &Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(a))
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((a, d));
            }
            &Op::BroadcastMul { map, x } => {
                let (mv, xv) = (val(map), val(x));
                let c = xv.len() / mv.len();
                if self.needs(map) {
                    let d = g
                        .chunks_exact(c)
                        .zip(xv.chunks_exact(c))
                        .map(|(gp, xp)| {
                            gp.iter().zip(xp).fold(T::zero(), |acc, (&g, &x)| acc + g * x)
                        })
                        .collect();
                    out.push((map, d));
                }
                if self.needs(x) {
                    let d = g
                        .chunks_exact(c)
                        .zip(mv)
                        .flat_map(|(gp, &w)| gp.iter().map(move |&g| g * w))
                        .collect();
                    out.push((x, d));
                }
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.index].value.shape(), self.nodes[b.index].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(a) {
                    // da = g · bᵀ
                    let bv = val(b);
                    let mut d = vec![T::zero(); m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let brow = &bv[c * n..(c + 1) * n];
                            d[r * k + c] =
                                grow.iter().zip(brow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                        }
                    }
                    out.push((a, d));
                }
                if self.needs(b) {
                    // db = aᵀ · g
                    let av = val(a);
                    let mut d = vec![T::zero(); k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let x = av[r * k + c];
                            for (dv, &gv) in d[c * n..(c + 1) * n].iter_mut().zip(grow) {
                                *dv = *dv + x * gv;
                            }
                        }
                    }
                    out.push((b, d));
                }
            }
            &Op::AddRow { x, bias } => {
                if self.needs(x) {
                    out.push((x, g.to_vec()));
                }
                if self.needs(bias) {
                    let n = val(bias).len();
                    let mut d = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (dv, &gv) in d.iter_mut().zip(row) {
                            *dv = *dv + gv;
                        }
                    }
                    out.push((bias, d));
                }
            }
            &Op::Sum(a) => out.push((a, vec![g[0]; val(a).len()])),
            &Op::Mean(a) => {
                let n = val(a).len();
                out.push((a, vec![g[0] / T::from_f64(n as f64); n]));
            }
            &Op::Reshape(a) => out.push((a, g.to_vec())),
            Op::Conv2d { x, w, b, stride, pad, col } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.nodes[x.index].value.shape();
                let ws = self.nodes[w.index].value.shape();
                let grads = nn::conv2d_backward(
                    val(x),
                    xs,
                    val(w),
                    ws,
                    *stride,
                    *pad,
                    col.as_deref(),
                    g,
                    [self.needs(x), self.needs(w), self.needs(b)],
                );
                for (v, d) in [x, w, b].into_iter().zip(grads) {
                    if let Some(d) = d {
                        out.push((v, d));
                    }
                }
            }
            Op::GlobalPool { x, mode, argmax } => {
                let xs = self.nodes[x.index].value.shape();
                out.push((*x, nn::global_pool_backward(xs, *mode, argmax, g)));
            }
            &Op::SignSqrt(a) => out.push((a, nn::sign_sqrt_backward(val(a), g))),
            Op::L2Normalize { x, norms } => {
                let y = self.nodes[i].value.data();
                out.push((*x, nn::l2_normalize_backward(y, norms, g)));
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                out.push((*logits, nn::softmax_xent_backward(probs, labels, g[0])));
            }
            Op::Resize { x } => {
                let xs = self.nodes[x.index].value.shape();
                let os = self.nodes[i].value.shape();
                out.push((*x, nn::bilinear_resize_backward(xs, os[1], os[2], g)));
            }
            Op::Bap { f, a, mode, argmax } => {
                let fs = self.nodes[f.index].value.shape();
                let as_ = self.nodes[a.index].value.shape();
                let (df, da) = bap::bap_backward(
                    val(*f),
                    fs,
                    val(*a),
                    as_,
                    *mode,
                    argmax,
                    g,
                    [self.needs(*f), self.needs(*a)],
                );
                if let Some(d) = df {
                    out.push((*f, d));
                }
                if let Some(d) = da {
                    out.push((*a, d));
                }
            }
            Op::ChannelScale { x, scales } => {
                out.push((*x, attention::channel_scale_backward(scales, g)));
            }
            Op::CenterLoss { p, centers } => {
                let b = self.nodes[p.index].value.shape()[0];
                out.push((*p, attention::center_loss_backward(val(*p), centers, b, g[0])));
            }
        }
        out
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a = *a + d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`, accumulating over `k` in index order.
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let x = a[r * k + c];
            for (o, &y) in orow.iter_mut().zip(&b[c * n..(c + 1) * n]) {
                *o = *o + x * y;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_forward() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 10.0, 18.0]);
        let c = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(c).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcast_identity_mask() {
        let mut tape = Tape::new();
        let map = tape.constant(Tensor::full(&[1, 2, 2, 1], 1.0).unwrap());
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 1.0).collect();
        let x = tape.constant(t(&[1, 2, 2, 3], &data));
        let y = tape.broadcast_mul(map, x).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn shape_and_division_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
        let z = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.div(a, z), Err(Error::DivisionByZero { .. })));
        let m = tape.constant(t(&[2, 3], &[0.0; 6]));
        assert!(tape.matmul(m, m).is_err());
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = tape.constant(t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let y = tape.matmul(i, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.3, -2.0, 5.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::DoubleBackward)));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut one = Tape::<f64>::new();
        let mut two = Tape::<f64>::new();
        let x = one.constant(t(&[1], &[1.0]));
        assert!(matches!(two.relu(x), Err(Error::ForeignVar)));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(
            tape.scale(x, 10.0),
            Err(Error::NonFinite { op: "scale" })
        ));
    }

    #[test]
    fn gradients_of_two_terms_add() {
        // loss = sum(x⊙x) + sum(3x) on one tape equals the separate gradients summed.
        let x0 = [0.5, -1.5, 2.0];
        let run = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.param(t(&[3], &x0));
            let sq = tape.mul(x, x).unwrap();
            let f = tape.sum(sq).unwrap();
            let s3 = tape.scale(x, 3.0).unwrap();
            let g = tape.sum(s3).unwrap();
            let loss = match which {
                0 => f,
                1 => g,
                _ => tape.add(f, g).unwrap(),
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let (gf, gg, gs) = (run(0), run(1), run(2));
        for i in 0..3 {
            assert_eq!(gs[i], gf[i] + gg[i]);
        }
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[0.0, 0.0]);
    }
}
