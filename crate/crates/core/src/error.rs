use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("id {id} out of range for table of {limit} rows")]
    IndexOutOfRange { id: usize, limit: usize },

    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("attention over sample {sample} has every position masked")]
    AllMasked { sample: usize },

    #[error("non-finite loss for sample {sample}")]
    NonFiniteLoss { sample: usize },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: &'static str },

    #[error("unknown task: {0}")]
    UnknownTask(String),

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("vocabulary target size {requested} unreachable; achievable maximum is {max}")]
    VocabTooLarge { requested: usize, max: usize },

    #[error("empty reference")]
    EmptyReference,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parameter mismatch: {0:?}")]
    ParamMismatch(Vec<String>),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

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

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
