use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core and the pipeline stages built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    ValueCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: invalid geometry (input {input:?}, kernel {kernel:?}, stride {stride}, padding {padding})")]
    InvalidGeometry {
        op: &'static str,
        input: Vec<usize>,
        kernel: Vec<usize>,
        stride: usize,
        padding: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("batch normalization in train mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("target row {row} is not a probability vector (sum {sum})")]
    MalformedTarget { row: usize, sum: f64 },

    #[error("{op} needs a square image, got {height}x{width}")]
    NotSquare {
        op: &'static str,
        height: usize,
        width: usize,
    },

    #[error("{0} classes requested but only 1..=8 procedural classes exist")]
    UnsupportedClassCount(usize),

    #[error("class {class} has an odd sample count {count}; cannot split in half")]
    OddClassCount { class: usize, count: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("{0} pool is empty")]
    EmptyPool(&'static str),

    #[error("parameter `{name}` expects {expected} values, snapshot carries {actual}")]
    ParamMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },

    #[error("snapshot is missing parameter `{0}`")]
    MissingParam(String),

    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
