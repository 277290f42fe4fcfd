use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("unknown {what} kind `{name}`")]
    UnknownKind { what: &'static str, name: String },
    #[error("{op}: input outside the domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backprop root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("index {index} out of range for size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("softmax cross-entropy over an empty batch (every position ignored)")]
    EmptyBatch,
    #[error("optimizer has no slot for parameter `{0}`")]
    MissingSlot(String),
    #[error("gradient for parameter `{0}` contains NaN or infinity")]
    NonFiniteGradient(String),
    #[error("epoch {got} observed after epoch {last}")]
    EpochOutOfOrder { last: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task mismatch: {0}")]
    TaskMismatch(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("caption `{caption}` has {tokens} tokens, more than max_len - 2 = {limit}")]
    CaptionTooLong {
        caption: String,
        tokens: usize,
        limit: usize,
    },
    #[error("invalid token id {0}")]
    InvalidTokenId(usize),
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch: header says {expected}, blob hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
