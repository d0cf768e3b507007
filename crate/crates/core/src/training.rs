//! SGD with momentum, the step learning-rate schedule, the joint training
//! loop and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::CenterBank;
use crate::data::{Dataset, LabeledImages};
use crate::error::{Error, Result};
use crate::localization::{self, BoundingBox, LocalizationMetrics};
use crate::model::{self, ForwardOptions, ParamMut, StageOptions, WsBanModel, CROP_MARGIN};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

/// Momentum buffers plus the schedule they are stepped with.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    velocity: Vec<Vec<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl<T: Real> SgdState<T> {
    /// Zeroed velocities shaped like `params`.
    pub fn new(params: &[ParamMut<'_, T>], cfg: &TrainConfig) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect(),
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            base_lr: cfg.lr,
            decay_factor: cfg.lr_decay,
            decay_every: cfg.lr_decay_every,
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        lr_schedule(self.base_lr, self.decay_factor, self.decay_every, epoch)
    }

    /// `v ← μv − lr·(g + wd·θ)`, `θ ← θ + v`. Weight decay skips parameters
    /// whose `decay` flag is off. Gradients are left for the caller to zero.
    pub fn step(&mut self, params: &mut [ParamMut<'_, T>], epoch: usize) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters for {} velocity buffers",
                params.len(),
                self.velocity.len()
            )));
        }
        let lr = T::from_f64(self.lr(epoch));
        let mu = T::from_f64(self.momentum);
        for (p, v) in params.iter_mut().zip(&mut self.velocity) {
            if p.tensor.len() != v.len() {
                return Err(Error::BufferLength {
                    shape: p.tensor.shape().to_vec(),
                    len: v.len(),
                });
            }
            let wd = T::from_f64(if p.decay { self.weight_decay } else { 0.0 });
            let grad = match p.tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); v.len()],
            };
            for ((theta, vel), g) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vel = mu * *vel - lr * (g + wd * *theta);
                *theta = *theta + *vel;
            }
        }
        Ok(())
    }
}

/// `base · factor^⌊epoch / every⌋`.
pub fn lr_schedule(base: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    base * factor.powi((epoch / every.max(1)) as i32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Weight `λ` of the attention regularization term.
    pub lambda: f64,
    /// Attention keep probability `p`.
    pub keep_prob: f64,
    /// Center update rate `β`.
    pub beta: f64,
    /// Relative localization threshold `θ`.
    pub theta: f64,
    pub regularization: bool,
    pub dropout: bool,
    pub refinement: bool,
    /// Seeds the shuffle order and the dropout masks.
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-5,
            lr_decay: 0.9,
            lr_decay_every: 2,
            lambda: 1.0,
            keep_prob: 0.8,
            beta: 0.05,
            theta: localization::DEFAULT_THRESHOLD,
            regularization: true,
            dropout: true,
            refinement: true,
            seed: 1,
            eval_batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} negative", self.weight_decay));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_decay_every == 0 {
            return bad("lr decay factor must lie in (0, 1] with a positive period".into());
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} negative", self.lambda));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep_prob {} outside (0, 1]", self.keep_prob));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta {} outside (0, 1)", self.theta));
        }
        Ok(())
    }

    fn effective_keep_prob(&self) -> f64 {
        if self.dropout {
            self.keep_prob
        } else {
            1.0
        }
    }
}

/// Epoch means of the loss terms and the held-out metrics after the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub la: f64,
    pub accuracy: f64,
    pub miou: f64,
    pub loc_error: f64,
}

pub const LOG_HEADER: &str = "epoch\tlr\ttrain_loss\tL1\tL2\tLA\tacc\tmIoU\tloc_err";

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.lr, self.loss, self.l1, self.l2, self.la, self.accuracy, self.miou, self.loc_error
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Header plus one tab-separated line per epoch.
    pub fn log_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{LOG_HEADER}").unwrap();
        for r in &self.history {
            writeln!(out, "{}", r.log_line()).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StepLosses {
    total: f64,
    l1: f64,
    l2: f64,
    la: f64,
}

/// Model, part centers and optimizer state that evolve together.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real> {
    pub model: WsBanModel<T>,
    pub centers: CenterBank<T>,
    pub sgd: SgdState<T>,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(mut model: WsBanModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mc = model.config().clone();
        let centers = CenterBank::new(mc.classes, mc.part_rows(), mc.features(), config.beta)?;
        let sgd = SgdState::new(&model.params_mut(), &config);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            model,
            centers,
            sgd,
            config,
            rng,
            step: 0,
        })
    }

    /// Global step counter (mini-batches consumed so far).
    pub fn steps(&self) -> usize {
        self.step
    }

    /// One forward/backward/update on a mini-batch.
    fn train_step(&mut self, images: &Tensor<T>, labels: &[usize], epoch: usize) -> Result<StepLosses> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape, true);
        let opts = ForwardOptions {
            stage: StageOptions {
                train: true,
                keep_prob: cfg.effective_keep_prob(),
            },
            refinement: cfg.refinement,
            theta: cfg.theta,
            crop_margin: CROP_MARGIN,
        };
        let out = self.model.forward_two_stage(&mut tape, &bound, images, &opts, &mut self.rng)?;
        let (l1, _) = tape.softmax_cross_entropy(out.stage1.logits, labels)?;
        let l2 = match &out.stage2 {
            Some(s2) => Some(tape.softmax_cross_entropy(s2.logits, labels)?.0),
            None => None,
        };
        let la = if cfg.regularization {
            let mut la = self.centers.regularization_loss(&mut tape, out.stage1.parts, labels)?;
            if let Some(s2) = &out.stage2 {
                let la2 = self.centers.regularization_loss(&mut tape, s2.parts, labels)?;
                la = tape.add(la, la2)?;
            }
            Some(la)
        } else {
            None
        };
        let loss = model::total_loss(&mut tape, l1, l2, la, cfg.lambda)?;
        let scalar = |v| tape.value(v).data()[0].as_f64();
        let losses = StepLosses {
            total: scalar(loss),
            l1: scalar(l1),
            l2: l2.map_or(0.0, scalar),
            la: la.map_or(0.0, scalar),
        };
        tape.backward(loss)?;
        self.model.accumulate_grads(&tape, &bound)?;
        self.sgd.step(&mut self.model.params_mut(), epoch)?;
        self.model.zero_grads();
        if cfg.regularization {
            self.centers
                .update(tape.value(out.stage1.parts), labels, Some(&out.stage1.masks))?;
            if let Some(s2) = &out.stage2 {
                self.centers.update(tape.value(s2.parts), labels, Some(&s2.masks))?;
            }
        }
        Ok(losses)
    }

    /// Runs one epoch over `data` in a seeded shuffled order and returns the
    /// mean loss terms.
    pub fn train_epoch(&mut self, data: LabeledImages<'_>, epoch: usize) -> Result<(f64, f64, f64, f64)> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let (images, labels) = data.batch(chunk)?;
            let images = images.cast::<T>();
            let lr = self.sgd.lr(epoch);
            let losses = self.train_step(&images, &labels, epoch).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    step: self.step,
                    lr,
                    loss: f64::NAN,
                    l1: f64::NAN,
                    l2: f64::NAN,
                    la: f64::NAN,
                },
                other => other,
            })?;
            if !losses.total.is_finite() {
                return Err(Error::Diverged {
                    step: self.step,
                    lr,
                    loss: losses.total,
                    l1: losses.l1,
                    l2: losses.l2,
                    la: losses.la,
                });
            }
            self.step += 1;
            batches += 1;
            for (s, v) in sums.iter_mut().zip([losses.total, losses.l1, losses.l2, losses.la]) {
                *s += v;
            }
        }
        let n = batches as f64;
        Ok((sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n))
    }

    /// Full schedule. After each epoch the model is evaluated on `eval`
    /// when given; `on_epoch` sees every record as it is produced.
    pub fn fit(
        &mut self,
        data: LabeledImages<'_>,
        eval: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainOutcome> {
        let mut history = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let lr = self.sgd.lr(epoch);
            let (loss, l1, l2, la) = self.train_epoch(data, epoch)?;
            let (accuracy, miou, loc_error) = match eval {
                Some(d) => {
                    let r = evaluate(&self.model, d, self.config.theta, self.config.refinement, self.config.eval_batch_size)?;
                    (r.accuracy, r.metrics.miou, r.metrics.loc_error)
                }
                None => (f64::NAN, f64::NAN, f64::NAN),
            };
            let record = EpochRecord {
                epoch,
                lr,
                loss,
                l1,
                l2,
                la,
                accuracy,
                miou,
                loc_error,
            };
            on_epoch(&record);
            history.push(record);
        }
        Ok(TrainOutcome { history })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub metrics: LocalizationMetrics,
    pub predictions: Vec<usize>,
    /// Stage-1 boxes, one per sample.
    pub boxes: Vec<BoundingBox>,
    pub ious: Vec<f64>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy from `p_final`, localization from stage-1 boxes, all in
/// dropout-free evaluation mode.
pub fn evaluate<T: Real>(
    model: &WsBanModel<T>,
    data: &Dataset,
    theta: f64,
    refinement: bool,
    batch_size: usize,
) -> Result<EvalReport> {
    let view = data.labeled_images();
    let classes = model.config().classes;
    let mut predictions = Vec::with_capacity(data.len());
    let mut boxes = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    let opts = ForwardOptions::eval(refinement, theta);
    // Evaluation never samples, so this stream is never advanced.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, _) = view.batch(chunk)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let out = model.forward_two_stage(&mut tape, &bound, &images.cast::<T>(), &opts, &mut rng)?;
        for row in out.p_final.data().chunks_exact(classes) {
            predictions.push(argmax(row));
        }
        boxes.extend(out.boxes);
    }
    let labels: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    let (accuracy, per_class_accuracy) = accuracy_report(&predictions, &labels, classes);
    let truth = data.boxes();
    let ious: Vec<f64> = boxes.iter().zip(&truth).map(|(p, t)| localization::iou(p, t)).collect();
    let metrics = localization::metrics_from_ious(&ious);
    Ok(EvalReport {
        accuracy,
        per_class_accuracy,
        metrics,
        predictions,
        boxes,
        ious,
    })
}

/// Overall and per-class hit rates; a class with no samples scores 0.
pub fn accuracy_report(predictions: &[usize], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        counts[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let total: usize = hits.iter().sum();
    let per_class = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    (total as f64 / labels.len().max(1) as f64, per_class)
}
