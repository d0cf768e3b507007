//! The full network: convolutional backbone, 1×1 attention head, bilinear
//! attention pooling, sign-sqrt/l2 normalization and a linear classifier,
//! plus the two-stage locate-crop-reclassify refinement.

use rand::Rng;

use crate::attention::DropoutMask;
use crate::error::{Error, Result};
use crate::localization::{self, BoundingBox, ObjectMask};
use crate::nn::{self, Conv2dParams, Padding, PoolMode};
use crate::tape::{Tape, Var};
use crate::tensor::{Init, Real, Tensor};

/// Subtracted from every input pixel so a flat mid-gray background gives a
/// near-zero first-layer response.
pub const INPUT_MEAN: f64 = 0.5;

/// Default multiplier on the unit-norm descriptor before the classifier.
pub const DEFAULT_LOGIT_SCALE: f64 = 32.0;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    /// Number of attention maps `M`.
    pub parts: usize,
    /// Square input side in pixels.
    pub input_size: usize,
    /// Output widths of the 3×3 backbone blocks; the last one is `N`.
    /// Block 0 keeps resolution, every later block halves it.
    pub channels: Vec<usize>,
    /// `false` replaces attention pooling by plain global pooling of `F`.
    pub attention_pooling: bool,
    pub pool: PoolMode,
    /// Fixed factor applied to the normalized descriptor, so logits are not
    /// confined to the range of a unit vector times small weights.
    pub logit_scale: f64,
}

impl ModelConfig {
    pub fn new(classes: usize, parts: usize, input_size: usize, channels: Vec<usize>) -> Self {
        Self {
            classes,
            parts,
            input_size,
            channels,
            attention_pooling: true,
            pool: PoolMode::Gap,
            logit_scale: DEFAULT_LOGIT_SCALE,
        }
    }

    pub fn features(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    /// Rows of the part feature matrix: `M`, or 1 without attention pooling.
    pub fn part_rows(&self) -> usize {
        if self.attention_pooling {
            self.parts
        } else {
            1
        }
    }

    /// Length of the flattened, normalized descriptor fed to the classifier.
    pub fn descriptor_dim(&self) -> usize {
        self.part_rows() * self.features()
    }

    /// Spatial side of the feature maps.
    pub fn feature_size(&self) -> usize {
        let mut s = self.input_size;
        for i in 1..self.channels.len() {
            let (stride, pad) = block_geometry(i);
            s = nn::conv_out_dim(s, 3, stride, pad).unwrap_or(0);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.parts == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid model config {self:?}")));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("logit scale {} must be positive", self.logit_scale)));
        }
        if self.feature_size() == 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {} too small for {} backbone blocks",
                self.input_size,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Stride and padding of backbone block `i`. Block 0 keeps resolution and
/// later blocks halve it. The first
/// halving block pads only the bottom and right edges, which puts the
/// receptive-field center of each feature cell within half a pixel of the
/// center of the input block the cell covers.
pub fn block_geometry(i: usize) -> (usize, Padding) {
    match i {
        1 => (2, Padding { before: 0, after: 1 }),
        0 => (1, Padding::same(1)),
        _ => (2, Padding::same(1)),
    }
}

/// Learnable parameters plus architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct WsBanModel<T> {
    config: ModelConfig,
    backbone: Vec<Conv2dParams<T>>,
    attention: Conv2dParams<T>,
    classifier: Tensor<T>,
    classifier_bias: Tensor<T>,
}

/// A named parameter, and whether weight decay applies to it.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub tensor: &'a mut Tensor<T>,
    pub decay: bool,
}

/// Model parameters recorded on a tape, in [`WsBanModel::named_params`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn conv(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }
    fn classifier(&self) -> (Var, Var) {
        let n = self.vars.len();
        (self.vars[n - 2], self.vars[n - 1])
    }
}

/// Per-stage switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageOptions {
    pub train: bool,
    /// Attention keep probability; 1 disables dropout.
    pub keep_prob: f64,
}

impl StageOptions {
    pub fn eval() -> Self {
        Self {
            train: false,
            keep_prob: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutput<T> {
    /// Backbone feature maps `F[b, h, w, N]`.
    pub features: Var,
    /// Attention maps `A[b, h, w, M]`, after dropout when training.
    pub attention: Option<Var>,
    /// Raw part features `P[b, rows, N]`.
    pub parts: Var,
    /// Flattened descriptor after sign-sqrt and l2 normalization.
    pub normalized: Var,
    pub logits: Var,
    pub probs: Tensor<T>,
    /// Dropout masks drawn for this stage (all-keep when not training).
    pub masks: Vec<DropoutMask>,
}

impl<T: Real> StageOutput<T> {
    /// Per-sample object masks: the channel mean of the attention maps, or
    /// of the feature maps for a model without attention pooling.
    pub fn object_masks(&self, tape: &Tape<T>) -> Result<Vec<ObjectMask>> {
        let maps = tape.value(self.attention.unwrap_or(self.features));
        (0..maps.shape()[0])
            .map(|i| localization::mean_attention_map(&maps.index_first(i)))
            .collect()
    }
}

/// Two-stage switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub stage: StageOptions,
    pub refinement: bool,
    pub theta: f64,
    /// Fraction of box extent added per side before cropping.
    pub crop_margin: f64,
}

impl ForwardOptions {
    pub fn eval(refinement: bool, theta: f64) -> Self {
        Self {
            stage: StageOptions::eval(),
            refinement,
            theta,
            crop_margin: CROP_MARGIN,
        }
    }
}

pub const CROP_MARGIN: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct TwoStageOutput<T> {
    pub stage1: StageOutput<T>,
    pub stage2: Option<StageOutput<T>>,
    /// Stage-1 boxes, one per sample.
    pub boxes: Vec<BoundingBox>,
    /// `(p1 + p2) / 2`, or `p1` without refinement.
    pub p_final: Tensor<T>,
}

impl<T: Real> WsBanModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut backbone = Vec::with_capacity(config.channels.len());
        let mut in_c = 3;
        for (i, &c) in config.channels.iter().enumerate() {
            let (stride, pad) = block_geometry(i);
            backbone.push(Conv2dParams::init(3, in_c, c, stride, pad, seed.wrapping_add(i as u64 + 1))?);
            in_c = c;
        }
        let n = config.features();
        let mut attention = Conv2dParams::<T>::init(1, n, config.parts, 1, 0, seed.wrapping_add(101))?;
        // Non-negative attention weights so no part map starts out dead
        // behind the ReLU.
        for v in attention.weight.data_mut() {
            *v = v.abs();
        }
        let d = config.descriptor_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let classifier = Tensor::new(
            &[d, config.classes],
            Init::Uniform {
                bound,
                seed: seed.wrapping_add(202),
            },
        )?
        .with_grad();
        let classifier_bias = Tensor::zeros(&[config.classes])?.with_grad();
        Ok(Self {
            config,
            backbone,
            attention,
            classifier,
            classifier_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &[Conv2dParams<T>] {
        &self.backbone
    }

    pub fn attention_head(&self) -> &Conv2dParams<T> {
        &self.attention
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        out.push(("attention.weight".into(), &self.attention.weight));
        out.push(("attention.bias".into(), &self.attention.bias));
        out.push(("classifier.weight".into(), &self.classifier));
        out.push(("classifier.bias".into(), &self.classifier_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter_mut().enumerate() {
            out.push(ParamMut {
                name: format!("backbone.{i}.weight"),
                tensor: &mut l.weight,
                decay: true,
            });
            out.push(ParamMut {
                name: format!("backbone.{i}.bias"),
                tensor: &mut l.bias,
                decay: false,
            });
        }
        out.push(ParamMut {
            name: "attention.weight".into(),
            tensor: &mut self.attention.weight,
            decay: true,
        });
        out.push(ParamMut {
            name: "attention.bias".into(),
            tensor: &mut self.attention.bias,
            decay: false,
        });
        out.push(ParamMut {
            name: "classifier.weight".into(),
            tensor: &mut self.classifier,
            decay: true,
        });
        out.push(ParamMut {
            name: "classifier.bias".into(),
            tensor: &mut self.classifier_bias,
            decay: false,
        });
        out
    }

    /// Records every parameter on the tape once; both refinement stages use
    /// the same handles. With `trainable = false` they are constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        let vars = self
            .named_params()
            .into_iter()
            .map(|(_, t)| {
                let copy = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
                if trainable {
                    tape.param(copy)
                } else {
                    tape.constant(copy)
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds the tape's parameter gradients into each parameter's buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &BoundParams) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(&bound.vars) {
            tape.accumulate_into(v, p.tensor)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Replaces one parameter's values (shape must match).
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let mut params = self.params_mut();
        let p = params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        if p.tensor.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: p.tensor.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.tensor.data_mut().copy_from_slice(value.data());
        Ok(())
    }

    /// Same architecture and values in another scalar type.
    pub fn cast<U: Real>(&self) -> WsBanModel<U> {
        let conv = |c: &Conv2dParams<T>| Conv2dParams {
            weight: c.weight.cast::<U>().with_grad(),
            bias: c.bias.cast::<U>().with_grad(),
            stride: c.stride,
            padding: c.padding,
        };
        WsBanModel {
            config: self.config.clone(),
            backbone: self.backbone.iter().map(conv).collect(),
            attention: conv(&self.attention),
            classifier: self.classifier.cast::<U>().with_grad(),
            classifier_bias: self.classifier_bias.cast::<U>().with_grad(),
        }
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != s || shape[2] != s || shape[3] != 3 {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: vec![shape.first().copied().unwrap_or(0), s, s, 3],
            });
        }
        Ok(())
    }

    /// One pass: backbone, attention, pooling, normalization, classifier.
    pub fn forward_stage<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        images: Var,
        opts: &StageOptions,
        rng: &mut R,
    ) -> Result<StageOutput<T>> {
        self.check_images(tape.shape(images))?;
        let b = tape.shape(images)[0];
        let mut h = tape.shift(images, T::from_f64(-INPUT_MEAN))?;
        for (i, layer) in self.backbone.iter().enumerate() {
            let (w, bias) = bound.conv(i);
            let z = tape.conv2d(h, w, bias, layer.stride, layer.padding)?;
            h = tape.relu(z)?;
        }
        let features = h;
        let m = self.config.parts;
        let (attention, parts, masks) = if self.config.attention_pooling {
            let (w, bias) = bound.conv(self.backbone.len());
            let z = tape.conv2d(features, w, bias, 1, 0)?;
            let mut a = tape.relu(z)?;
            let mut masks = vec![DropoutMask::all(m); b];
            if opts.train && opts.keep_prob < 1.0 {
                let (dropped, drawn) = tape.attention_dropout(a, opts.keep_prob, rng)?;
                a = dropped;
                masks = drawn;
            }
            let p = tape.bap(features, a, self.config.pool)?;
            (Some(a), p, masks)
        } else {
            let g = tape.global_pool(features, self.config.pool)?;
            let n = self.config.features();
            let p = tape.reshape(g, &[b, 1, n])?;
            (None, p, vec![DropoutMask::all(1); b])
        };
        let flat = tape.reshape(parts, &[b, self.config.descriptor_dim()])?;
        let signed = tape.sign_sqrt(flat)?;
        let normalized = tape.l2_normalize(signed)?;
        let (w, bias) = bound.classifier();
        let scaled = tape.scale(normalized, T::from_f64(self.config.logit_scale))?;
        let mm = tape.matmul(scaled, w)?;
        let logits = tape.add_row(mm, bias)?;
        let probs = Tensor::from_vec(
            &[b, self.config.classes],
            nn::softmax_rows(tape.value(logits).data(), self.config.classes),
        )?;
        Ok(StageOutput {
            features,
            attention,
            parts,
            normalized,
            logits,
            probs,
            masks,
        })
    }

    /// Stage 1 on the full image; stage 2 on the crop around the stage-1
    /// box, enlarged by the crop margin and resized back to the input size.
    /// The final probabilities average the two stages.
    pub fn forward_two_stage<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        images: &Tensor<T>,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<TwoStageOutput<T>> {
        self.check_images(images.shape())?;
        let x = tape.constant(images.clone());
        let stage1 = self.forward_stage(tape, bound, x, &opts.stage, rng)?;
        let boxes: Vec<BoundingBox> = stage1
            .object_masks(tape)?
            .iter()
            .map(|m| localization::localize(m, opts.theta))
            .collect();
        if !opts.refinement {
            let p_final = stage1.probs.clone();
            return Ok(TwoStageOutput {
                stage1,
                stage2: None,
                boxes,
                p_final,
            });
        }
        let crop_boxes: Vec<BoundingBox> = boxes.iter().map(|b| b.enlarge(opts.crop_margin)).collect();
        let crops = crop_resize(images, &crop_boxes, self.config.input_size)?;
        let x2 = tape.constant(crops);
        let stage2 = self.forward_stage(tape, bound, x2, &opts.stage, rng)?;
        let p_final = average_probs(&stage1.probs, &stage2.probs)?;
        Ok(TwoStageOutput {
            stage1,
            stage2: Some(stage2),
            boxes,
            p_final,
        })
    }
}

/// Elementwise `(p1 + p2) / 2`.
pub fn average_probs<T: Real>(p1: &Tensor<T>, p2: &Tensor<T>) -> Result<Tensor<T>> {
    if p1.shape() != p2.shape() {
        return Err(Error::ShapeMismatch {
            op: "average_probs",
            lhs: p1.shape().to_vec(),
            rhs: p2.shape().to_vec(),
        });
    }
    let half = T::from_f64(0.5);
    let data = p1.data().iter().zip(p2.data()).map(|(&a, &b)| (a + b) * half).collect();
    Tensor::from_vec(p1.shape(), data)
}

/// Crops each image to its box (pixel-aligned, never empty) and resizes the
/// crop to `size × size`.
pub fn crop_resize<T: Real>(images: &Tensor<T>, boxes: &[BoundingBox], size: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[0] != boxes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} boxes for image batch {s:?}",
            boxes.len()
        )));
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(boxes.len());
    for (i, bx) in boxes.iter().enumerate() {
        let (x0, y0, x1, y1) = bx.pixel_bounds(w, h);
        let src = images.index_first(i);
        let mut crop = Vec::with_capacity((y1 - y0) * (x1 - x0) * c);
        for y in y0..y1 {
            let row = (y * w + x0) * c;
            crop.extend_from_slice(&src.data()[row..row + (x1 - x0) * c]);
        }
        let crop = Tensor::from_vec(&[1, y1 - y0, x1 - x0, c], crop)?;
        out.push(nn::bilinear_resize(&crop, size, size)?.index_first(0));
    }
    Tensor::stack(&out)
}

/// Total loss `L1 + L2 + λ·L_A`, skipping absent terms.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    l1: Var,
    l2: Option<Var>,
    la: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("negative λ {lambda}")));
    }
    let mut loss = l1;
    if let Some(l2) = l2 {
        loss = tape.add(loss, l2)?;
    }
    if let Some(la) = la {
        let scaled = tape.scale(la, T::from_f64(lambda))?;
        loss = tape.add(loss, scaled)?;
    }
    Ok(loss)
}
