use std::io;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch on axis `{axis}`: expected {expected}, got {actual}")]
    ShapeMismatch {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("axis `{axis}` has length {len}, not divisible by stride {stride}; pad the input first")]
    NotDivisible {
        axis: &'static str,
        len: usize,
        stride: usize,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("loss is not a scalar: it has {0} elements")]
    NotScalar(usize),

    #[error("tensor #{0} is not on the tape")]
    UnknownTensor(usize),

    #[error("invalid network spec: {0}")]
    Spec(String),

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error("bounding box: {0}")]
    BBox(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error("training diverged at step {step} ({phase}): {detail}")]
    Diverged {
        step: usize,
        phase: &'static str,
        detail: String,
    },

    #[error("golden mismatch: {0}")]
    Golden(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(axis: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            axis,
            expected,
            actual,
        })
    }
}
