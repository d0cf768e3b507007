//! Central-difference verification of every backward rule.
//!
//! A check builds a scalar loss from a list of input tensors, differentiates
//! it on the tape, and compares each gradient entry with a fourth-order
//! central difference of the loss. Each op in [`OPS`] has a fixed seeded
//! fixture; `"wsban"` runs the whole two-stage model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{CenterBank, DropoutMask};
use crate::error::{Error, Result};
use crate::model::{self, BoundParams, ForwardOptions, ModelConfig, StageOptions, WsBanModel};
use crate::nn::PoolMode;
use crate::tape::{Tape, Var};
use crate::tensor::{Init, Tensor};

/// Names accepted by [`run_op`], in suite order.
pub const OPS: [&str; 27] = [
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "shift",
    "relu",
    "broadcast_mul",
    "matmul",
    "add_row",
    "sum",
    "mean",
    "reshape",
    "conv2d",
    "conv2d_stride2",
    "conv2d_pointwise",
    "global_pool_gap",
    "global_pool_gmp",
    "sign_sqrt",
    "l2_normalize",
    "softmax_cross_entropy",
    "bilinear_resize",
    "bap_gap",
    "bap_gmp",
    "attention_dropout",
    "center_loss",
    "wsban",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    /// Central-difference step: the numeric derivative is
    /// `(f(x + h) − f(x − h)) / 2h`.
    pub step: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    pub tolerance: f64,
    /// Multiplies every analytic gradient before comparison, to confirm the
    /// harness notices a broken backward rule.
    pub corrupt: Option<f64>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-8,
            tolerance: 1e-6,
            corrupt: None,
        }
    }
}

/// The entry with the largest error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Worst {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{:<24} {:>6} entries  max rel-err {:.3e}  {}",
            self.name,
            self.entries,
            self.max_rel_err,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Checks the gradient of `f` with respect to every entry of every input.
/// `f` must be a pure function of its inputs; two evaluations at the same
/// point that differ bitwise fail with [`Error::NondeterministicCheck`].
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], opts: &CheckOptions, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let base = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let again = evaluate(inputs, &f)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NondeterministicCheck);
    }
    let h = opts.step;
    let mut report = CheckReport {
        name: name.to_string(),
        entries: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance: opts.tolerance,
    };
    let mut probe = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(var) {
            Some(g) => g.to_vec(),
            None => vec![0.0; inputs[i].len()],
        };
        for (j, &a) in analytic.iter().enumerate() {
            let x = inputs[i].data()[j];
            let mut at = |offset: f64| -> Result<f64> {
                probe[i].data_mut()[j] = x + offset;
                evaluate(&probe, &f)
            };
            let numeric = (at(h)? - at(-h)?) / (2.0 * h);
            probe[i].data_mut()[j] = x;
            let a = a * opts.corrupt.unwrap_or(1.0);
            let err = relative_error(a, numeric, opts.floor);
            report.entries += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Worst {
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::new(shape, Init::Uniform { bound: 1.0, seed }).expect("fixture shape")
}

/// Values in `±[0.1, 1]`, away from the kinks of relu and sign-sqrt.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut t = uniform(shape, seed);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + 0.9 * v.abs());
    }
    t
}

/// Distinct values on a grid with spacing well above the stencil width,
/// so max-pooling winners cannot change under perturbation.
fn separated(shape: &[usize], seed: u64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let data = order.iter().map(|&k| 0.2 + k as f64 / len as f64).collect();
    Tensor::from_vec(shape, data).expect("fixture shape")
}

/// Reduces any output to a scalar by a fixed random weighting, so every
/// output entry contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = uniform(tape.shape(y), seed);
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

fn wsban_fixture() -> Result<(WsBanModel<f64>, CenterBank<f64>, Tensor<f64>, Vec<usize>)> {
    let config = ModelConfig::new(2, 4, 16, vec![4, 6]);
    let model = WsBanModel::<f64>::new(config, 11)?;
    let mut centers = CenterBank::<f64>::new(2, 4, 6, 0.05)?;
    *centers.centers_mut() = Tensor::new(&[2, 4, 6], Init::Uniform { bound: 0.05, seed: 12 })?;
    for v in centers.centers_mut().data_mut() {
        *v = v.abs();
    }
    let images = Tensor::new(&[2, 16, 16, 3], Init::Uniform { bound: 1.0, seed: 13 })?.map(|v| 0.5 + 0.5 * v);
    Ok((model, centers, images, vec![0, 1]))
}

/// The full training loss of a two-class model with four parts on 16×16
/// inputs: both stages, attention regularization against non-zero centers,
/// and attention dropout with masks fixed by a reseeded generator.
fn wsban_loss(
    model: &WsBanModel<f64>,
    centers: &CenterBank<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    tape: &mut Tape<f64>,
    vars: &[Var],
) -> Result<Var> {
    let bound = BoundParams { vars: vars.to_vec() };
    let opts = ForwardOptions {
        stage: StageOptions {
            train: true,
            keep_prob: 0.8,
        },
        refinement: true,
        theta: 0.2,
        crop_margin: model::CROP_MARGIN,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = model.forward_two_stage(tape, &bound, images, &opts, &mut rng)?;
    let (l1, _) = tape.softmax_cross_entropy(out.stage1.logits, labels)?;
    let stage2 = out
        .stage2
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("refinement produced no second stage".into()))?;
    let (l2, _) = tape.softmax_cross_entropy(stage2.logits, labels)?;
    let la1 = centers.regularization_loss(tape, out.stage1.parts, labels)?;
    let la2 = centers.regularization_loss(tape, stage2.parts, labels)?;
    let la = tape.add(la1, la2)?;
    model::total_loss(tape, l1, Some(l2), Some(la), 1.0)
}

fn conv_check(name: &str, k: usize, stride: usize, pad: usize, opts: &CheckOptions) -> Result<CheckReport> {
    let inputs = [uniform(&[2, 5, 5, 2], 1), uniform(&[k, k, 2, 3], 2), uniform(&[3], 3)];
    check(name, &inputs, opts, |t, v| {
        let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
        weighted_sum(t, y, 4)
    })
}

/// Runs the fixture for one entry of [`OPS`].
pub fn run_op(name: &str, opts: &CheckOptions) -> Result<CheckReport> {
    let binary = |f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>, rhs: Tensor<f64>| {
        check(name, &[uniform(&[2, 3], 1), rhs], opts, move |t, v| {
            let y = f(t, v[0], v[1])?;
            weighted_sum(t, y, 9)
        })
    };
    match name {
        "add" => binary(|t, a, b| t.add(a, b), uniform(&[2, 3], 2)),
        "sub" => binary(|t, a, b| t.sub(a, b), uniform(&[2, 3], 2)),
        "mul" => binary(|t, a, b| t.mul(a, b), uniform(&[2, 3], 2)),
        "div" => binary(|t, a, b| t.div(a, b), away_from_zero(&[2, 3], 2).map(|v| v * 2.0)),
        "scale" => check(name, &[uniform(&[4], 1)], opts, |t, v| {
            let y = t.scale(v[0], -1.75)?;
            weighted_sum(t, y, 9)
        }),
        "shift" => check(name, &[uniform(&[4], 1)], opts, |t, v| {
            let y = t.shift(v[0], 0.3)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 9)
        }),
        "relu" => check(name, &[away_from_zero(&[3, 4], 1)], opts, |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, 9)
        }),
        "broadcast_mul" => check(name, &[uniform(&[2, 3, 3, 1], 1), uniform(&[2, 3, 3, 4], 2)], opts, |t, v| {
            let y = t.broadcast_mul(v[0], v[1])?;
            weighted_sum(t, y, 9)
        }),
        "matmul" => check(name, &[uniform(&[3, 4], 1), uniform(&[4, 5], 2)], opts, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 9)
        }),
        "add_row" => check(name, &[uniform(&[3, 4], 1), uniform(&[4], 2)], opts, |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, 9)
        }),
        "sum" => check(name, &[uniform(&[2, 3], 1)], opts, |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.sum(y)
        }),
        "mean" => check(name, &[uniform(&[2, 3], 1)], opts, |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean(y)
        }),
        "reshape" => check(name, &[uniform(&[2, 6], 1)], opts, |t, v| {
            let y = t.reshape(v[0], &[3, 4])?;
            weighted_sum(t, y, 9)
        }),
        "conv2d" => conv_check(name, 3, 1, 1, opts),
        "conv2d_stride2" => conv_check(name, 3, 2, 1, opts),
        "conv2d_pointwise" => conv_check(name, 1, 1, 0, opts),
        "global_pool_gap" => check(name, &[uniform(&[2, 3, 3, 4], 1)], opts, |t, v| {
            let y = t.global_pool(v[0], PoolMode::Gap)?;
            weighted_sum(t, y, 9)
        }),
        "global_pool_gmp" => check(name, &[separated(&[2, 3, 3, 4], 1)], opts, |t, v| {
            let y = t.global_pool(v[0], PoolMode::Gmp)?;
            weighted_sum(t, y, 9)
        }),
        "sign_sqrt" => check(name, &[away_from_zero(&[3, 4], 1)], opts, |t, v| {
            let y = t.sign_sqrt(v[0])?;
            weighted_sum(t, y, 9)
        }),
        "l2_normalize" => check(name, &[uniform(&[3, 5], 1)], opts, |t, v| {
            let y = t.l2_normalize(v[0])?;
            weighted_sum(t, y, 9)
        }),
        "softmax_cross_entropy" => check(name, &[uniform(&[4, 3], 1).map(|v| 3.0 * v)], opts, |t, v| {
            Ok(t.softmax_cross_entropy(v[0], &[0, 2, 1, 2])?.0)
        }),
        "bilinear_resize" => check(name, &[uniform(&[2, 4, 5, 2], 1)], opts, |t, v| {
            let y = t.bilinear_resize(v[0], 7, 3)?;
            weighted_sum(t, y, 9)
        }),
        "bap_gap" => check(name, &[uniform(&[2, 3, 3, 4], 1), uniform(&[2, 3, 3, 3], 2)], opts, |t, v| {
            let y = t.bap(v[0], v[1], PoolMode::Gap)?;
            weighted_sum(t, y, 9)
        }),
        "bap_gmp" => check(name, &[separated(&[1, 3, 3, 2], 1), separated(&[1, 3, 3, 2], 2)], opts, |t, v| {
            let y = t.bap(v[0], v[1], PoolMode::Gmp)?;
            weighted_sum(t, y, 9)
        }),
        "attention_dropout" => {
            let masks = vec![
                DropoutMask {
                    keep: vec![true, false, true],
                },
                DropoutMask {
                    keep: vec![false, true, true],
                },
            ];
            check(name, &[uniform(&[2, 3, 3, 3], 1)], opts, move |t, v| {
                let y = t.attention_dropout_with(v[0], 0.8, &masks)?;
                weighted_sum(t, y, 9)
            })
        }
        "center_loss" => {
            let mut bank = CenterBank::new(3, 2, 4, 0.05)?;
            *bank.centers_mut() = uniform(&[3, 2, 4], 2);
            check(name, &[uniform(&[2, 2, 4], 1)], opts, move |t, v| {
                bank.regularization_loss(t, v[0], &[2, 0])
            })
        }
        "wsban" => {
            let (model, centers, images, labels) = wsban_fixture()?;
            let params: Vec<Tensor<f64>> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
            check(name, &params, opts, |t, v| wsban_loss(&model, &centers, &images, &labels, t, v))
        }
        _ => Err(Error::InvalidArgument(format!(
            "unknown op {name:?}; known ops: {}",
            OPS.join(", ")
        ))),
    }
}

/// Runs every fixture, or only `only` when given.
pub fn run_suite(only: Option<&str>, opts: &CheckOptions) -> Result<Vec<CheckReport>> {
    match only {
        Some(name) => Ok(vec![run_op(name, opts)?]),
        None => OPS.iter().map(|name| run_op(name, opts)).collect(),
    }
}
