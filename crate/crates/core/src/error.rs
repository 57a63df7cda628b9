use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate sample: {0}")]
    DegenerateSample(&'static str),

    #[error("insufficient data: need {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("no positive pairs under the ground-truth transform")]
    EmptyPositives,

    #[error("attention context is empty")]
    EmptyContext,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("transfer failed for tensor `{tensor}`: {reason}")]
    Transfer { tensor: String, reason: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("ply parse error at byte {offset}: {msg}")]
    Ply { offset: usize, msg: String },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("scene generation: {0}")]
    Generation(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("internal: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
