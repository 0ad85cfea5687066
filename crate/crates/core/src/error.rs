use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("loss must be a single element, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(usize),
    #[error("bad range: {0}")]
    BadRange(String),
    #[error("diffusion step {step} outside 0..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("batch of {0} is too small (need at least 4)")]
    BatchTooSmall(usize),
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("caption of {len} tokens exceeds the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("bad resolution: expected {expected:?}, got {got:?}")]
    BadResolution {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("linear system is singular")]
    SingularSystem,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("keep fraction {0} not in (0, 1]")]
    BadFraction(f64),
    #[error("tap mismatch: {0}")]
    TapMismatch(String),
    #[error("structure loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("feature cache was computed with weights {cached}, current weights are {current}")]
    StaleFeatureCache { cached: String, current: String },
    #[error("missing upstream artifact from stage `{stage}`: {path}")]
    UpstreamMissing { stage: &'static str, path: PathBuf },
    #[error("hash check failed for {what}: manifest says {expected}, found {found}")]
    HashMismatch {
        what: String,
        expected: String,
        found: String,
    },
    #[error("no test items passed the accuracy threshold {0}")]
    EmptyAfterFilter(f64),
    #[error("format error: {0}")]
    Format(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
