//! Weakly supervised attention learning: attention regularization against
//! moving-average part centers, and attention dropout.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::wire::{ByteReader, ByteWriter};

/// Per-(class, part) feature centers `c_k`, updated by moving average and
/// never by gradient descent.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank<T> {
    centers: Tensor<T>,
    beta: f64,
}

impl<T: Real> CenterBank<T> {
    /// All-zero centers for `classes × parts × channels`.
    pub fn new(classes: usize, parts: usize, channels: usize, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidArgument(format!("center rate {beta} outside [0, 1]")));
        }
        Ok(Self {
            centers: Tensor::zeros(&[classes, parts, channels])?,
            beta,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.beta = beta;
    }

    pub fn centers(&self) -> &Tensor<T> {
        &self.centers
    }

    pub fn centers_mut(&mut self) -> &mut Tensor<T> {
        &mut self.centers
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.centers.shape();
        (s[0], s[1], s[2])
    }

    /// Center row for `(class, part)`.
    pub fn center(&self, class: usize, part: usize) -> &[T] {
        let (_, m, n) = self.dims();
        let o = (class * m + part) * n;
        &self.centers.data()[o..o + n]
    }

    fn check_features(&self, shape: &[usize], labels: &[usize]) -> Result<()> {
        let (c, m, n) = self.dims();
        if shape.len() != 3 || shape[1] != m || shape[2] != n || shape[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "center_bank",
                lhs: shape.to_vec(),
                rhs: vec![labels.len(), m, n],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        Ok(())
    }

    /// Centers for each sample's label, laid out like `P[b, M, N]`.
    fn gather(&self, labels: &[usize]) -> Vec<T> {
        let (_, m, n) = self.dims();
        let mut out = Vec::with_capacity(labels.len() * m * n);
        for &l in labels {
            out.extend_from_slice(&self.centers.data()[l * m * n..(l + 1) * m * n]);
        }
        out
    }

    /// Attention regularization `L_A`: batch mean of `Σ_k ‖f_k − c_k‖²`,
    /// with the centers held constant.
    pub fn regularization_loss(&self, tape: &mut Tape<T>, parts: Var, labels: &[usize]) -> Result<Var> {
        self.check_features(tape.shape(parts), labels)?;
        let centers = self.gather(labels);
        let b = labels.len();
        let p = tape.value(parts).data();
        let mut sum = T::zero();
        for (&pv, &cv) in p.iter().zip(&centers) {
            let d = pv - cv;
            sum = sum + d * d;
        }
        let loss = sum / T::from_f64(b as f64);
        tape.push(Tensor::scalar(loss), Op::CenterLoss { p: parts, centers }, &[parts])
    }

    /// `c ← c + β(f − c)` for every sample (in batch order) and every part
    /// marked active in that sample's mask. Inactive parts are left alone.
    pub fn update(&mut self, parts: &Tensor<T>, labels: &[usize], active: Option<&[DropoutMask]>) -> Result<()> {
        self.check_features(parts.shape(), labels)?;
        let (_, m, n) = self.dims();
        if let Some(masks) = active {
            if masks.len() != labels.len() || masks.iter().any(|mk| mk.keep.len() != m) {
                return Err(Error::InvalidArgument("dropout masks do not match the batch".into()));
            }
        }
        let beta = T::from_f64(self.beta);
        let p = parts.data();
        for (i, &label) in labels.iter().enumerate() {
            for k in 0..m {
                if let Some(masks) = active {
                    if !masks[i].keep[k] {
                        continue;
                    }
                }
                let f = &p[(i * m + k) * n..(i * m + k + 1) * n];
                let o = (label * m + k) * n;
                let c = &mut self.centers.data_mut()[o..o + n];
                for (cv, &fv) in c.iter_mut().zip(f) {
                    *cv = *cv + beta * (fv - *cv);
                }
            }
        }
        Ok(())
    }

    pub fn write(&self, w: &mut ByteWriter) {
        w.f64(self.beta);
        self.centers.write_wsbt(w);
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let beta = r.f64()?;
        let centers = Tensor::read_wsbt(r)?;
        if centers.shape().len() != 3 {
            return Err(Error::Format {
                offset: r.offset(),
                message: format!("center bank must be rank 3, got {:?}", centers.shape()),
            });
        }
        Ok(Self { centers, beta })
    }
}

pub(crate) fn center_loss_backward<T: Real>(p: &[T], centers: &[T], batch: usize, g: T) -> Vec<T> {
    let s = T::from_f64(2.0) * g / T::from_f64(batch as f64);
    p.iter().zip(centers).map(|(&pv, &cv)| s * (pv - cv)).collect()
}

pub(crate) fn channel_scale_backward<T: Real>(scales: &[T], g: &[T]) -> Vec<T> {
    g.iter().zip(scales).map(|(&gv, &s)| gv * s).collect()
}

/// Bernoulli keep mask over the `M` attention channels of one sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
}

impl DropoutMask {
    pub fn all(parts: usize) -> Self {
        Self {
            keep: vec![true; parts],
        }
    }

    pub fn sample<R: Rng + ?Sized>(parts: usize, keep_prob: f64, rng: &mut R) -> Self {
        Self {
            keep: (0..parts).map(|_| rng.gen::<f64>() < keep_prob).collect(),
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

fn check_keep_prob(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidArgument(format!("keep probability {p} outside (0, 1]")));
    }
    Ok(())
}

fn mask_scales<T: Real>(masks: &[DropoutMask], keep_prob: f64) -> Vec<T> {
    let inv = T::from_f64(1.0 / keep_prob);
    masks
        .iter()
        .flat_map(|m| m.keep.iter().map(move |&k| if k { inv } else { T::zero() }))
        .collect()
}

/// Draws one mask per sample for `[b, H, W, M]` attention and applies
/// `a_k ← m_k·a_k / p`. With `p = 1` every channel is kept and the scale is 1.
pub fn attention_dropout<T: Real, R: Rng + ?Sized>(
    attention: &Tensor<T>,
    keep_prob: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<DropoutMask>)> {
    check_keep_prob(keep_prob)?;
    let s = attention.shape();
    if s.len() != 4 {
        return Err(Error::InvalidArgument(format!("attention must be rank 4, got {s:?}")));
    }
    let masks: Vec<_> = (0..s[0]).map(|_| DropoutMask::sample(s[3], keep_prob, rng)).collect();
    let scales = mask_scales::<T>(&masks, keep_prob);
    let data = scale_channels(attention.data(), s, &scales);
    Ok((Tensor::from_vec(s, data)?, masks))
}

fn scale_channels<T: Real>(x: &[T], shape: &[usize], scales: &[T]) -> Vec<T> {
    let c = shape[shape.len() - 1];
    let per_sample = x.len() / shape[0];
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let b = i / per_sample;
            v * scales[b * c + i % c]
        })
        .collect()
}

impl<T: Real> Tape<T> {
    /// Multiplies channel `c` of sample `b` by `scales[b·C + c]` (constants).
    pub fn channel_scale(&mut self, x: Var, scales: Vec<T>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || scales.len() != s[0] * s[s.len() - 1] {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                lhs: s,
                rhs: vec![scales.len()],
            });
        }
        let data = scale_channels(self.value(x).data(), &s, &scales);
        let out = Tensor::from_parts(s.clone(), data);
        let full = expand_scales(&s, &scales);
        self.push(out, Op::ChannelScale { x, scales: full }, &[x])
    }

    /// Attention dropout on the tape; the gradient is scaled by `m/p`.
    pub fn attention_dropout<R: Rng + ?Sized>(
        &mut self,
        attention: Var,
        keep_prob: f64,
        rng: &mut R,
    ) -> Result<(Var, Vec<DropoutMask>)> {
        check_keep_prob(keep_prob)?;
        let s = self.shape(attention).to_vec();
        if s.len() != 4 {
            return Err(Error::InvalidArgument(format!("attention must be rank 4, got {s:?}")));
        }
        let masks: Vec<_> = (0..s[0]).map(|_| DropoutMask::sample(s[3], keep_prob, rng)).collect();
        let v = self.channel_scale(attention, mask_scales(&masks, keep_prob))?;
        Ok((v, masks))
    }

    /// Dropout with caller-supplied masks, for replaying a fixed draw.
    pub fn attention_dropout_with(&mut self, attention: Var, keep_prob: f64, masks: &[DropoutMask]) -> Result<Var> {
        check_keep_prob(keep_prob)?;
        self.channel_scale(attention, mask_scales(masks, keep_prob))
    }
}

/// Per-element scale factors so the backward pass is a plain product.
fn expand_scales<T: Real>(shape: &[usize], scales: &[T]) -> Vec<T> {
    let len: usize = shape.iter().product();
    let c = shape[shape.len() - 1];
    let per_sample = len / shape[0];
    (0..len).map(|i| scales[(i / per_sample) * c + i % c]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn parts(seed: u64) -> Tensor<f64> {
        Tensor::new(&[3, 2, 4], Init::Uniform { bound: 2.0, seed }).unwrap()
    }

    fn loss_value(bank: &CenterBank<f64>, p: &Tensor<f64>, labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(p.clone());
        let l = bank.regularization_loss(&mut tape, v, labels).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn loss_is_zero_at_centers() {
        let p = parts(1);
        let mut bank = CenterBank::<f64>::new(1, 2, 4, 1.0).unwrap();
        bank.update(&p.index_first(0).reshape(&[1, 2, 4]).unwrap(), &[0], None).unwrap();
        let one = p.index_first(0).reshape(&[1, 2, 4]).unwrap();
        assert_eq!(loss_value(&bank, &one, &[0]), 0.0);
    }

    #[test]
    fn fresh_bank_loss_is_squared_norm() {
        let p = parts(2);
        let bank = CenterBank::<f64>::new(4, 2, 4, 0.05).unwrap();
        assert!(bank.centers().data().iter().all(|&v| v == 0.0));
        let labels = [0, 3, 1];
        let sq: f64 = p.data().iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((loss_value(&bank, &p, &labels) - sq).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_loop() {
        let p = parts(3);
        let mut bank = CenterBank::<f64>::new(2, 2, 4, 0.05).unwrap();
        *bank.centers_mut() = Tensor::new(&[2, 2, 4], Init::Uniform { bound: 1.0, seed: 4 }).unwrap();
        let labels = [1, 0, 1];
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            for k in 0..2 {
                for c in 0..4 {
                    let d = p.get(&[i, k, c]) - bank.centers().get(&[l, k, c]);
                    total += d * d;
                }
            }
        }
        assert!((loss_value(&bank, &p, &labels) - total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dims_are_checked() {
        let bank = CenterBank::<f64>::new(2, 3, 4, 0.05).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(parts(1));
        assert!(bank.regularization_loss(&mut tape, v, &[0, 1, 0]).is_err());
        let bank = CenterBank::<f64>::new(2, 2, 4, 0.05).unwrap();
        assert!(matches!(
            bank.regularization_loss(&mut tape, v, &[0, 2, 0]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn center_update_arithmetic() {
        let mut bank = CenterBank::<f64>::new(1, 1, 1, 0.05).unwrap();
        let f = Tensor::full(&[1, 1, 1], 1.0).unwrap();
        bank.update(&f, &[0], None).unwrap();
        assert!((bank.center(0, 0)[0] - 0.05).abs() < 1e-15);

        let mut frozen = CenterBank::<f64>::new(1, 1, 1, 0.0).unwrap();
        frozen.update(&f, &[0], None).unwrap();
        assert_eq!(frozen.center(0, 0)[0], 0.0);
    }

    #[test]
    fn dropped_parts_keep_their_center() {
        let mut bank = CenterBank::<f64>::new(1, 2, 4, 0.5).unwrap();
        let p = parts(5).index_first(0).reshape(&[1, 2, 4]).unwrap();
        let mask = DropoutMask { keep: vec![false, true] };
        bank.update(&p, &[0], Some(&[mask])).unwrap();
        assert!(bank.center(0, 0).iter().all(|&v| v == 0.0));
        assert!(bank.center(0, 1).iter().all(|&v| v != 0.0));
    }

    #[test]
    fn dropout_keep_all_is_identity() {
        let a = Tensor::<f64>::new(&[2, 3, 3, 4], Init::Uniform { bound: 1.0, seed: 1 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, masks) = attention_dropout(&a, 1.0, &mut rng).unwrap();
        assert_eq!(out, a);
        assert!(masks.iter().all(|m| m.kept() == 4));
    }

    #[test]
    fn dropout_scales_kept_channels() {
        let a = Tensor::<f64>::full(&[1, 2, 2, 16], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, masks) = attention_dropout(&a, 0.8, &mut rng).unwrap();
        for (i, &v) in out.data().iter().enumerate() {
            let expect = if masks[0].keep[i % 16] { 1.25 } else { 0.0 };
            assert_eq!(v, expect);
        }
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let a = Tensor::<f64>::zeros(&[1, 1, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(attention_dropout(&a, 0.0, &mut rng).is_err());
        assert!(attention_dropout(&a, 1.5, &mut rng).is_err());
    }

    #[test]
    fn dropout_gradient_is_mask_over_p() {
        let a = Tensor::<f64>::full(&[1, 1, 1, 8], 2.0).unwrap();
        let mut tape = Tape::new();
        let av = tape.param(a);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, masks) = tape.attention_dropout(av, 0.8, &mut rng).unwrap();
        let s = tape.sum(d).unwrap();
        tape.backward(s).unwrap();
        for (k, &g) in tape.grad(av).unwrap().iter().enumerate() {
            assert_eq!(g, if masks[0].keep[k] { 1.25 } else { 0.0 });
        }
    }
}
