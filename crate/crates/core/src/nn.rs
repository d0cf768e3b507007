//! Network primitives: convolution, global pooling, sign-sqrt and l2
//! normalization, softmax cross-entropy and bilinear resizing.
//!
//! All image tensors are `[batch, H, W, C]`; convolution weights are
//! `[kh, kw, in_c, out_c]` so the innermost loops run over contiguous output
//! channels.

use crate::error::{Error, Result};
use crate::gemm;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Init, Real, Tensor};

/// Guard inside the square root of the sign-sqrt derivative.
pub const SIGN_SQRT_EPS: f64 = 1e-12;
/// Norms at or below this are treated as the zero vector.
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    /// Global average pooling.
    Gap,
    /// Global max pooling; ties go to the first position in row-major order.
    Gmp,
}

/// Zero rows and columns added before (top, left) and after (bottom, right)
/// the input of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub before: usize,
    pub after: usize,
}

impl Padding {
    pub const fn same(p: usize) -> Self {
        Self { before: p, after: p }
    }
}

impl From<usize> for Padding {
    fn from(p: usize) -> Self {
        Self::same(p)
    }
}

/// Weights and geometry of one convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
}

impl<T: Real> Conv2dParams<T> {
    /// He-uniform initialised weights and zero bias.
    pub fn init(
        k: usize,
        in_c: usize,
        out_c: usize,
        stride: usize,
        padding: impl Into<Padding>,
        seed: u64,
    ) -> Result<Self> {
        let fan_in = (k * k * in_c) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Ok(Self {
            weight: Tensor::new(&[k, k, in_c, out_c], Init::Uniform { bound, seed })?.with_grad(),
            bias: Tensor::zeros(&[out_c])?.with_grad(),
            stride,
            padding: padding.into(),
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[2]
    }
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[3]
    }
}

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: impl Into<Padding>) -> Option<usize> {
    let pad = pad.into();
    let padded = input + pad.before + pad.after;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Patch matrix `[b·oh·ow, kh·kw·ic]` with zeros where the window overhangs
/// the padded border. Column order matches the `[kh, kw, ic, oc]` weights.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], xs: &[usize], kh: usize, kw: usize, stride: usize, pad: Padding, oh: usize, ow: usize) -> Vec<T> {
    let (b, h, wd, ic) = (xs[0], xs[1], xs[2], xs[3]);
    let k = kh * kw * ic;
    let mut col = vec![T::zero(); b * oh * ow * k];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * k;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad.before as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad.before as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xi = ((bi * h + iy as usize) * wd + ix as usize) * ic;
                        let ci = row + (ky * kw + kx) * ic;
                        col[ci..ci + ic].copy_from_slice(&x[xi..xi + ic]);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(col: &[T], xs: &[usize], kh: usize, kw: usize, stride: usize, pad: Padding, oh: usize, ow: usize) -> Vec<T> {
    let (b, h, wd, ic) = (xs[0], xs[1], xs[2], xs[3]);
    let k = kh * kw * ic;
    let mut dx = vec![T::zero(); b * h * wd * ic];
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * k;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad.before as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad.before as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xi = ((bi * h + iy as usize) * wd + ix as usize) * ic;
                        let ci = row + (ky * kw + kx) * ic;
                        for (d, &g) in dx[xi..xi + ic].iter_mut().zip(&col[ci..ci + ic]) {
                            *d = *d + g;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn is_pointwise(ws: &[usize], stride: usize, pad: Padding) -> bool {
    ws[0] == 1 && ws[1] == 1 && stride == 1 && pad == Padding::same(0)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Real>(
    x: &[T],
    xs: &[usize],
    w: &[T],
    ws: &[usize],
    bias: &[T],
    stride: usize,
    pad: Padding,
    oh: usize,
    ow: usize,
    keep_col: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (kh, kw, oc) = (ws[0], ws[1], ws[3]);
    let rows = xs[0] * oh * ow;
    let k = kh * kw * xs[3];
    let mut out = Vec::with_capacity(rows * oc);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    if is_pointwise(ws, stride, pad) {
        gemm::gemm_acc(rows, k, oc, x, w, &mut out);
        return (out, None);
    }
    let col = im2col(x, xs, kh, kw, stride, pad, oh, ow);
    gemm::gemm_acc(rows, k, oc, &col, w, &mut out);
    (out, keep_col.then_some(col))
}

/// Gradients for (input, weight, bias); only the flagged ones are computed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    xs: &[usize],
    w: &[T],
    ws: &[usize],
    stride: usize,
    pad: Padding,
    col: Option<&[T]>,
    g: &[T],
    needs: [bool; 3],
) -> [Option<Vec<T>>; 3] {
    let (kh, kw, ic, oc) = (ws[0], ws[1], ws[2], ws[3]);
    let oh = conv_out_dim(xs[1], kh, stride, pad).unwrap();
    let ow = conv_out_dim(xs[2], kw, stride, pad).unwrap();
    let rows = xs[0] * oh * ow;
    let k = kh * kw * ic;
    let pointwise = is_pointwise(ws, stride, pad);
    let db = needs[2].then(|| {
        let mut db = vec![T::zero(); oc];
        for gpx in g.chunks_exact(oc) {
            for (d, &gv) in db.iter_mut().zip(gpx) {
                *d = *d + gv;
            }
        }
        db
    });
    let dw = needs[1].then(|| {
        let mut dw = vec![T::zero(); w.len()];
        match (pointwise, col) {
            (true, _) => gemm::gemm_tn_acc(rows, k, oc, x, g, &mut dw),
            (false, Some(col)) => gemm::gemm_tn_acc(rows, k, oc, col, g, &mut dw),
            (false, None) => {
                let col = im2col(x, xs, kh, kw, stride, pad, oh, ow);
                gemm::gemm_tn_acc(rows, k, oc, &col, g, &mut dw);
            }
        }
        dw
    });
    let dx = needs[0].then(|| {
        let w_t = gemm::transpose(k, oc, w);
        let mut dcol = vec![T::zero(); rows * k];
        gemm::gemm_acc(rows, oc, k, g, &w_t, &mut dcol);
        if pointwise {
            dcol
        } else {
            col2im(&dcol, xs, kh, kw, stride, pad, oh, ow)
        }
    });
    [dx, dw, db]
}

pub(crate) fn global_pool_backward<T: Real>(xs: &[usize], mode: PoolMode, argmax: &[usize], g: &[T]) -> Vec<T> {
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let mut dx = vec![T::zero(); b * h * w * c];
    match mode {
        PoolMode::Gap => {
            let inv = T::one() / T::from_f64((h * w) as f64);
            for bi in 0..b {
                for p in 0..h * w {
                    let base = (bi * h * w + p) * c;
                    for ch in 0..c {
                        dx[base + ch] = g[bi * c + ch] * inv;
                    }
                }
            }
        }
        PoolMode::Gmp => {
            for (j, &idx) in argmax.iter().enumerate() {
                dx[idx] = dx[idx] + g[j];
            }
        }
    }
    dx
}

pub(crate) fn sign_sqrt_backward<T: Real>(x: &[T], g: &[T]) -> Vec<T> {
    let eps = T::from_f64(SIGN_SQRT_EPS);
    let half = T::from_f64(0.5);
    x.iter()
        .zip(g)
        .map(|(&v, &g)| g * half / (v.abs() + eps).sqrt())
        .collect()
}

pub(crate) fn l2_normalize_backward<T: Real>(y: &[T], norms: &[T], g: &[T]) -> Vec<T> {
    let d = y.len() / norms.len();
    let mut dx = vec![T::zero(); y.len()];
    for (r, &n) in norms.iter().enumerate() {
        if n.is_zero() {
            continue;
        }
        let yr = &y[r * d..(r + 1) * d];
        let gr = &g[r * d..(r + 1) * d];
        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for j in 0..d {
            dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
        }
    }
    dx
}

pub(crate) fn softmax_xent_backward<T: Real>(probs: &[T], labels: &[usize], g: T) -> Vec<T> {
    let b = labels.len();
    let c = probs.len() / b;
    let scale = g / T::from_f64(b as f64);
    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (i, &l) in labels.iter().enumerate() {
        d[i * c + l] = d[i * c + l] - scale;
    }
    d
}

/// Source sample positions for one axis of an align-corners-false resize:
/// `(lo, hi, weight_of_hi)` per output index.
fn resize_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Forward-only bilinear resize of a `[b, h, w, c]` tensor.
pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::InvalidArgument(format!("bilinear_resize expects rank 4, got {s:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::DegenerateOutput { op: "bilinear_resize" });
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let xv = x.data();
    let mut out = Vec::with_capacity(b * out_h * out_w * c);
    for bi in 0..b {
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::from_f64(fx);
                let at = |yy: usize, xx: usize, ch: usize| xv[((bi * h + yy) * w + xx) * c + ch];
                for ch in 0..c {
                    let top = at(y0, x0, ch) * (T::one() - fx) + at(y0, x1, ch) * fx;
                    let bot = at(y1, x0, ch) * (T::one() - fx) + at(y1, x1, ch) * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
    }
    Tensor::from_vec(&[b, out_h, out_w, c], out)
}

pub(crate) fn bilinear_resize_backward<T: Real>(xs: &[usize], out_h: usize, out_w: usize, g: &[T]) -> Vec<T> {
    let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let mut dx = vec![T::zero(); b * h * w * c];
    let mut gi = 0;
    for bi in 0..b {
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::from_f64(fx);
                for ch in 0..c {
                    let gv = g[gi];
                    gi += 1;
                    let mut add = |yy: usize, xx: usize, wgt: T| {
                        let i = ((bi * h + yy) * w + xx) * c + ch;
                        dx[i] = dx[i] + gv * wgt;
                    };
                    add(y0, x0, (T::one() - fy) * (T::one() - fx));
                    add(y0, x1, (T::one() - fy) * fx);
                    add(y1, x0, fy * (T::one() - fx));
                    add(y1, x1, fy * fx);
                }
            }
        }
    }
    dx
}

/// Numerically stable row-wise softmax of `[b, C]` logits.
pub fn softmax_rows<T: Real>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z = exps.iter().fold(T::zero(), |a, &v| a + v);
        out.extend(exps.into_iter().map(|e| e / z));
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: impl Into<Padding>) -> Result<Var> {
        let pad = pad.into();
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] || bs != [ws[3]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (oh, ow) = match (
            conv_out_dim(xs[1], ws[0], stride, pad),
            conv_out_dim(xs[2], ws[1], stride, pad),
        ) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => return Err(Error::DegenerateOutput { op: "conv2d" }),
        };
        let (out, col) = conv2d_forward(
            self.value(x).data(),
            &xs,
            self.value(w).data(),
            &ws,
            self.value(b).data(),
            stride,
            pad,
            oh,
            ow,
            self.requires_grad(w),
        );
        let out = Tensor::from_parts(vec![xs[0], oh, ow, ws[3]], out);
        self.push(out, Op::Conv2d { x, w, b, stride, pad, col }, &[x, w, b])
    }

    /// Convolution with the weights and bias of `p` already on the tape.
    pub fn conv2d_with(&mut self, x: Var, p: (&Conv2dParams<T>, Var, Var)) -> Result<Var> {
        self.conv2d(x, p.1, p.2, p.0.stride, p.0.padding)
    }

    /// `[b, h, w, c] -> [b, c]`.
    pub fn global_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidArgument(format!("global_pool expects rank 4, got {xs:?}")));
        }
        let (b, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Gap => {
                let n = T::from_f64((h * w) as f64);
                for bi in 0..b {
                    let o = &mut out[bi * c..(bi + 1) * c];
                    for p in 0..h * w {
                        let base = (bi * h * w + p) * c;
                        for (ov, &v) in o.iter_mut().zip(&xv[base..base + c]) {
                            *ov = *ov + v;
                        }
                    }
                    o.iter_mut().for_each(|v| *v = *v / n);
                }
            }
            PoolMode::Gmp => {
                argmax = vec![0; b * c];
                for bi in 0..b {
                    for ch in 0..c {
                        let mut best = bi * h * w * c + ch;
                        for p in 1..h * w {
                            let i = (bi * h * w + p) * c + ch;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                        argmax[bi * c + ch] = best;
                        out[bi * c + ch] = xv[best];
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![b, c], out);
        self.push(out, Op::GlobalPool { x, mode, argmax }, &[x])
    }

    /// Elementwise `sign(x)·√|x|`.
    pub fn sign_sqrt(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            if v > T::zero() {
                v.sqrt()
            } else if v < T::zero() {
                -(-v).sqrt()
            } else {
                T::zero()
            }
        });
        self.push(out, Op::SignSqrt(x), &[x])
    }

    /// Scales each row (last axis) to unit l2 norm. Rank-1 input is one row.
    /// A zero row stays zero and passes no gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let eps = T::from_f64(L2_EPS);
        let mut norms = Vec::with_capacity(t.len() / d);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks_exact(d) {
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if n > eps {
                norms.push(n);
                out.extend(row.iter().map(|&v| v / n));
            } else {
                norms.push(T::zero());
                out.extend(std::iter::repeat(T::zero()).take(d));
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Mean softmax cross-entropy of `[b, C]` logits. Returns the scalar loss
    /// and the softmax probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor<T>)> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let lv = self.value(logits).data();
        let mut loss = T::zero();
        for (row, &l) in lv.chunks_exact(c).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            loss = loss + (lse - row[l]);
        }
        let loss = loss / T::from_f64(labels.len() as f64);
        let probs = softmax_rows(lv, c);
        let probs_t = Tensor::from_parts(s.clone(), probs.clone());
        let var = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )?;
        Ok((var, probs_t))
    }

    /// Bilinear resize with gradients flowing to the pixel values.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = bilinear_resize(self.value(x), out_h, out_w)?;
        self.push(out, Op::Resize { x }, &[x])
    }
}
