use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,

    #[error("empty chunk")]
    EmptyChunk,

    #[error("empty text")]
    EmptyText,

    #[error("no trainable content")]
    NoTrainableContent,

    #[error("input exceeds max length: {len} > {max}")]
    InputTooLong { len: usize, max: usize },

    #[error("token id {0} out of vocabulary range")]
    InvalidTokenId(u32),

    #[error("no labeled positions")]
    NoLabeledPositions,

    #[error("selection/gradient mismatch: {0}")]
    SelectionMismatch(String),

    #[error("degenerate delta in layer {0}")]
    DegenerateDelta(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("shape mismatch for {name}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid blueprint spec {0:?}")]
    InvalidBlueprint(String),

    #[error("missing embedding for id {0:?}")]
    MissingId(String),

    #[error("inconsistent dimension: expected {expected}, got {actual}")]
    InconsistentDimension { expected: usize, actual: usize },

    #[error("embedding id sets differ: {0}")]
    IdSetMismatch(String),

    #[error("broken-triplet budget exceeded: more than {0} broken triplets")]
    BrokenBudgetExceeded(usize),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("not an embedding store")]
    NotAnEmbeddingStore,

    #[error("not a checkpoint")]
    NotACheckpoint,

    #[error("truncated file")]
    Truncated,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
