//! Bilinear attention pooling.
//!
//! For feature maps `F[b, H, W, N]` and attention maps `A[b, H, W, M]`, part
//! `k` pools the masked features `a_k ⊙ F` into `f_k ∈ R^N`; the rows are
//! stacked in attention-channel order into `P[b, M, N]`. The masked maps are
//! never materialised: each output row is accumulated directly, one part at
//! a time, summing pixels in row-major order.

use crate::error::{Error, Result};
use crate::nn::PoolMode;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Real, Tensor};

fn check_shapes(fs: &[usize], as_: &[usize]) -> Result<()> {
    if fs.len() != 4 || as_.len() != 4 || fs[..3] != as_[..3] {
        return Err(Error::ShapeMismatch {
            op: "bap",
            lhs: fs.to_vec(),
            rhs: as_.to_vec(),
        });
    }
    Ok(())
}

/// Forward kernel. Returns `P` and, for max pooling, the flat feature index
/// that produced each entry.
pub(crate) fn bap_forward<T: Real>(
    f: &[T],
    fs: &[usize],
    a: &[T],
    as_: &[usize],
    mode: PoolMode,
) -> (Vec<T>, Vec<usize>) {
    let (b, h, w, n) = (fs[0], fs[1], fs[2], fs[3]);
    let m = as_[3];
    let hw = h * w;
    let mut p = vec![T::zero(); b * m * n];
    let mut argmax = Vec::new();
    if mode == PoolMode::Gmp {
        argmax = vec![0; b * m * n];
    }
    let count = T::from_f64(hw as f64);
    for bi in 0..b {
        for k in 0..m {
            let row = (bi * m + k) * n;
            match mode {
                PoolMode::Gap => {
                    let out = &mut p[row..row + n];
                    for px in 0..hw {
                        let ak = a[(bi * hw + px) * m + k];
                        let fp = &f[(bi * hw + px) * n..(bi * hw + px + 1) * n];
                        for (o, &fv) in out.iter_mut().zip(fp) {
                            *o = *o + ak * fv;
                        }
                    }
                    out.iter_mut().for_each(|v| *v = *v / count);
                }
                PoolMode::Gmp => {
                    for c in 0..n {
                        let mut best = a[bi * hw * m + k] * f[bi * hw * n + c];
                        let mut best_px = 0;
                        for px in 1..hw {
                            let v = a[(bi * hw + px) * m + k] * f[(bi * hw + px) * n + c];
                            if v > best {
                                best = v;
                                best_px = px;
                            }
                        }
                        p[row + c] = best;
                        argmax[row + c] = best_px;
                    }
                }
            }
        }
    }
    (p, argmax)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bap_backward<T: Real>(
    f: &[T],
    fs: &[usize],
    a: &[T],
    as_: &[usize],
    mode: PoolMode,
    argmax: &[usize],
    g: &[T],
    needs: [bool; 2],
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (b, h, w, n) = (fs[0], fs[1], fs[2], fs[3]);
    let m = as_[3];
    let hw = h * w;
    let mut df = needs[0].then(|| vec![T::zero(); f.len()]);
    let mut da = needs[1].then(|| vec![T::zero(); a.len()]);
    match mode {
        PoolMode::Gap => {
            let inv = T::one() / T::from_f64(hw as f64);
            for bi in 0..b {
                for px in 0..hw {
                    let fp = &f[(bi * hw + px) * n..(bi * hw + px + 1) * n];
                    let ap = &a[(bi * hw + px) * m..(bi * hw + px + 1) * m];
                    for k in 0..m {
                        let gk = &g[(bi * m + k) * n..(bi * m + k + 1) * n];
                        if let Some(df) = df.as_mut() {
                            let s = ap[k] * inv;
                            let dfp = &mut df[(bi * hw + px) * n..(bi * hw + px + 1) * n];
                            for (d, &gv) in dfp.iter_mut().zip(gk) {
                                *d = *d + s * gv;
                            }
                        }
                        if let Some(da) = da.as_mut() {
                            let dot = fp.iter().zip(gk).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                            let i = (bi * hw + px) * m + k;
                            da[i] = da[i] + dot * inv;
                        }
                    }
                }
            }
        }
        PoolMode::Gmp => {
            for bi in 0..b {
                for k in 0..m {
                    for c in 0..n {
                        let j = (bi * m + k) * n + c;
                        let px = argmax[j];
                        let fi = (bi * hw + px) * n + c;
                        let ai = (bi * hw + px) * m + k;
                        if let Some(df) = df.as_mut() {
                            df[fi] = df[fi] + g[j] * a[ai];
                        }
                        if let Some(da) = da.as_mut() {
                            da[ai] = da[ai] + g[j] * f[fi];
                        }
                    }
                }
            }
        }
    }
    (df, da)
}

/// Plain-tensor bilinear attention pooling (no tape).
pub fn bap<T: Real>(features: &Tensor<T>, attention: &Tensor<T>, mode: PoolMode) -> Result<Tensor<T>> {
    let (fs, as_) = (features.shape(), attention.shape());
    check_shapes(fs, as_)?;
    let (p, _) = bap_forward(features.data(), fs, attention.data(), as_, mode);
    Tensor::from_vec(&[fs[0], as_[3], fs[3]], p)
}

impl<T: Real> Tape<T> {
    /// Part feature matrix `P[b, M, N]` from features `F[b, H, W, N]` and
    /// attention `A[b, H, W, M]`.
    pub fn bap(&mut self, f: Var, a: Var, mode: PoolMode) -> Result<Var> {
        let fs = self.value(f).shape().to_vec();
        let as_ = self.value(a).shape().to_vec();
        check_shapes(&fs, &as_)?;
        let (p, argmax) = bap_forward(self.value(f).data(), &fs, self.value(a).data(), &as_, mode);
        let out = Tensor::from_parts(vec![fs[0], as_[3], fs[3]], p);
        self.push(out, Op::Bap { f, a, mode, argmax }, &[f, a])
    }
}

/// Result of checking that average-pooled BAP is bilinear in `(F, A)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearityReport {
    pub alpha: f64,
    /// Max relative error of `bap(αF, A)` against `α·bap(F, A)`.
    pub feature_scaling_err: f64,
    /// Max relative error of `bap(F, αA)` against `α·bap(F, A)`.
    pub attention_scaling_err: f64,
}

impl BilinearityReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.feature_scaling_err <= tol && self.attention_scaling_err <= tol
    }
}

/// Scales each argument by `alpha` in turn and measures how far the pooled
/// result is from `alpha` times the unscaled one.
pub fn bilinearity_probe<T: Real>(features: &Tensor<T>, attention: &Tensor<T>, alpha: f64) -> Result<BilinearityReport> {
    let base = bap(features, attention, PoolMode::Gap)?;
    let a = T::from_f64(alpha);
    let by_f = bap(&features.map(|v| v * a), attention, PoolMode::Gap)?;
    let by_a = bap(features, &attention.map(|v| v * a), PoolMode::Gap)?;
    let err = |scaled: &Tensor<T>| {
        scaled
            .data()
            .iter()
            .zip(base.data())
            .map(|(&s, &b)| {
                let expect = b.as_f64() * alpha;
                let diff = (s.as_f64() - expect).abs();
                let scale = expect.abs().max(s.as_f64().abs());
                if scale == 0.0 {
                    0.0
                } else {
                    diff / scale
                }
            })
            .fold(0.0, f64::max)
    };
    Ok(BilinearityReport {
        alpha,
        feature_scaling_err: err(&by_f),
        attention_scaling_err: err(&by_a),
    })
}
