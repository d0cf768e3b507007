use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },

    #[error("{op}: degenerate output size")]
    DegenerateOutput { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape")]
    DoubleBackward,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("gradient check: function is not deterministic under a fixed seed")]
    NondeterministicCheck,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("training diverged at step {step} (lr {lr}): loss {loss} [L1 {l1}, L2 {l2}, LA {la}]")]
    Diverged {
        step: usize,
        lr: f64,
        loss: f64,
        l1: f64,
        l2: f64,
        la: f64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
