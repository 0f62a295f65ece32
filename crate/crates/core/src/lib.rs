//! Retrieval-augmented multiple-choice question answering over
//! technical-standards corpora.
//!
//! The pipeline stages live in separate modules:
//!
//! - [`corpus`]: section-aware parsing and heading-prefixed chunking
//! - [`abbrev`]: abbreviation mining, detection and hit-rate
//! - [`retrieval`]: dense dot-product KNN, BM25 and hybrid context assembly
//! - [`prompt`]: option-listing and free-answer prompt templates
//! - [`shuffle`]: option permutation sampling and majority voting
//! - [`answer`]: option extraction from model completions
//! - [`trainprep`]: question-masked loss and fine-tuning record emission
//! - [`backend`]: completion / embedding clients and the scriptable mock
//! - [`eval`]: dataset loading, pipeline variants and accuracy reports
//!
//! Model inference is always behind the traits in [`backend`].

pub mod abbrev;
pub mod answer;
pub mod backend;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod prompt;
pub mod retrieval;
pub mod seed;
pub mod shuffle;
pub mod trainprep;

pub use abbrev::{AbbrevDict, AbbrevEntry, Detection};
pub use backend::{CompletionBackend, CompletionRequest, EmbeddingBackend};
pub use corpus::{Chunk, ChunkingConfig, Document, Section};
pub use error::{Error, Result};
pub use eval::{EvalReport, McqQuestion, PipelineConfig};
pub use prompt::{PromptStyle, PromptText};
pub use retrieval::{Bm25Index, Context, EmbeddingMatrix, ScoredChunk};
pub use shuffle::{Permutation, VoteTally};
