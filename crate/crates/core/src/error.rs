use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty document")]
    EmptyDocument,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("embedding batch {batch}: {message}")]
    EmbeddingBatch { batch: usize, message: String },

    #[error("retriever {retriever}: {source}")]
    Retriever {
        retriever: String,
        #[source]
        source: Box<Error>,
    },

    #[error("backend {backend}: {message}")]
    Backend { backend: String, message: String },

    #[error(
        "backend {backend}: requests {start}..{end} failed after {attempts} attempts: {message}"
    )]
    RetriesExhausted {
        backend: String,
        start: usize,
        end: usize,
        attempts: usize,
        message: String,
    },

    #[error("backend {backend}: expected {expected} results, got {actual}")]
    ResponseCount {
        backend: String,
        expected: usize,
        actual: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("mock script line {line}: {message}")]
    MockScript { line: usize, message: String },

    #[error("slot {slot} out of range for {n} options")]
    SlotOutOfRange { slot: usize, n: usize },

    #[error("no parsable answers")]
    NoParsableAnswers,

    #[error("question has no options")]
    NoOptions,

    #[error("question {question_id}: {message}")]
    Question {
        question_id: String,
        message: String,
    },

    #[error("mask boundary {boundary} exceeds sequence length {len}")]
    BoundaryOutOfRange { boundary: usize, len: usize },

    #[error("answer cue not found in token sequence")]
    CueNotFound,

    #[error("zero probability for true token at position {position}")]
    ZeroProbability { position: usize },

    #[error("invalid prediction table: {0}")]
    PredictionTable(String),

    #[error("accuracy over an empty prediction set")]
    EmptyPredictions,

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
