use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric fault in `{op}`: non-finite value produced")]
    NumericFault { op: &'static str },

    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("masked cross-entropy needs at least one masked-in position")]
    EmptyMask,

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("expected a {expected} input, got {got}")]
    WrongVariant {
        expected: &'static str,
        got: &'static str,
    },

    #[error("select_layer {layer} out of range for a tower with {blocks} blocks")]
    SelectLayer { layer: i32, blocks: usize },

    #[error("invalid visual input: {0}")]
    InvalidVisual(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sequence length {len} exceeds the context window of {window}")]
    ContextOverflow { len: usize, window: usize },

    #[error("prompt must contain exactly one visual placeholder when a visual input is given, found {0}")]
    VisualSlot(usize),

    #[error("round {round} out of range for a conversation with {rounds} rounds")]
    RoundOutOfRange { round: usize, rounds: usize },

    #[error("empty conversation")]
    EmptyConversation,

    #[error("batch size {0} is too small to mix two non-empty pools")]
    BatchTooSmall(usize),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("training diverged at step {step} (batch {batch}): {source}")]
    Diverged {
        step: usize,
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("not enough material: {0}")]
    NotEnoughMaterial(String),

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("ablation arms differ in more than the ablated field: {0:?}")]
    ArmMismatch(Vec<String>),

    #[error("empty split `{0}`")]
    EmptySplit(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
