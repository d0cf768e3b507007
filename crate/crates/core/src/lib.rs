//! Weakly supervised bilinear attention network on a from-scratch autodiff
//! core.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense tensors and reverse-mode differentiation,
//!   with [`gradcheck`] verifying every backward rule by central differences.
//! - [`nn`]: convolution, pooling, normalization, softmax cross-entropy and
//!   bilinear resizing.
//! - [`bap`]: bilinear attention pooling of feature maps by attention maps.
//! - [`attention`]: attention regularization against moving-average part
//!   centers, and attention dropout.
//! - [`model`]: the full two-stage network.
//! - [`localization`]: object boxes from attention maps, IoU metrics.
//! - [`training`]: SGD with momentum, the learning-rate schedule, the training
//!   loop and evaluation.
//! - [`data`]: the procedural part-based benchmark and its file format.
//! - [`config`], [`checkpoint`], [`viz`]: run configuration, model files and
//!   PPM/PGM export used by the command-line tool.
//! - [`experiment`]: complete runs, from generated data to an evaluated
//!   checkpoint.

pub mod attention;
pub mod bap;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
mod gemm;
pub mod gradcheck;
pub mod localization;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod viz;
pub mod wire;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Init, Real, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/bap.md")]
    mod bap {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/localization.md")]
    mod localization {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
