//! Completion and embedding backends.
//!
//! The pipeline only talks to [`CompletionBackend`] and [`EmbeddingBackend`].
//! [`complete_batch`] and [`embed_batch`] wrap a raw backend call with the
//! retry, alignment and dimension checks every caller relies on.

mod cache;
mod http;
mod mock;

use std::path::PathBuf;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::CachedEmbedder;
pub use http::{HttpCompletion, HttpEmbedder};
pub use mock::{mock_script_load, MockCompletion, MockEmbedder, MockRule, MockScript};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompts: Vec<String>,
    pub max_new_tokens: u32,
    pub temperature: f32,
    pub seed: Option<u64>,
    pub model: String,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, prompts: Vec<String>) -> Self {
        Self {
            prompts,
            max_new_tokens: 32,
            temperature: 0.0,
            seed: None,
            model: model.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Invalid("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of a single backend attempt. Transient failures are retried by
/// [`complete_batch`] and [`embed_batch`].
#[derive(Debug)]
pub enum CallError {
    Transient(String),
    Fatal(String),
}

pub type CallResult<T> = std::result::Result<T, CallError>;

pub trait CompletionBackend: Send + Sync {
    fn id(&self) -> &str;

    /// One attempt at completing every prompt of the request.
    fn complete(&self, req: &CompletionRequest) -> CallResult<Vec<String>>;

    fn retries(&self) -> usize {
        0
    }
}

pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> &str;

    /// One attempt at embedding every text.
    fn embed(&self, texts: &[String]) -> CallResult<Vec<Vec<f32>>>;

    fn retries(&self) -> usize {
        0
    }
}

fn with_retries<T>(
    backend: &str,
    retries: usize,
    count: usize,
    mut call: impl FnMut() -> CallResult<T>,
) -> Result<T> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match call() {
            Ok(v) => return Ok(v),
            Err(CallError::Fatal(message)) => {
                return Err(Error::Backend {
                    backend: backend.to_string(),
                    message,
                })
            }
            Err(CallError::Transient(message)) if attempt > retries => {
                return Err(Error::RetriesExhausted {
                    backend: backend.to_string(),
                    start: 0,
                    end: count,
                    attempts: attempt,
                    message,
                })
            }
            Err(CallError::Transient(_)) => {
                std::thread::sleep(std::time::Duration::from_millis(50 << attempt.min(6)));
            }
        }
    }
}

/// Completes a batch; output `i` always answers prompt `i`.
pub fn complete_batch(
    req: &CompletionRequest,
    backend: &dyn CompletionBackend,
) -> Result<Vec<String>> {
    req.validate()?;
    let out = with_retries(backend.id(), backend.retries(), req.prompts.len(), || {
        backend.complete(req)
    })?;
    if out.len() != req.prompts.len() {
        return Err(Error::ResponseCount {
            backend: backend.id().to_string(),
            expected: req.prompts.len(),
            actual: out.len(),
        });
    }
    Ok(out)
}

/// Embeds a batch and checks alignment and a uniform dimension.
pub fn embed_batch(texts: &[String], backend: &dyn EmbeddingBackend) -> Result<Vec<Vec<f32>>> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let out = with_retries(backend.id(), backend.retries(), texts.len(), || {
        backend.embed(texts)
    })?;
    if out.len() != texts.len() {
        return Err(Error::ResponseCount {
            backend: backend.id().to_string(),
            expected: texts.len(),
            actual: out.len(),
        });
    }
    let dim = out[0].len();
    if let Some(bad) = out.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    Ok(out)
}

/// Remembers the first dimension a backend produced and rejects drift.
#[derive(Debug, Default)]
pub struct DimensionLock(OnceLock<usize>);

impl DimensionLock {
    pub fn check(&self, vectors: &[Vec<f32>]) -> CallResult<()> {
        let Some(first) = vectors.first() else {
            return Ok(());
        };
        let expected = *self.0.get_or_init(|| first.len());
        match vectors.iter().find(|v| v.len() != expected) {
            Some(v) => Err(CallError::Fatal(format!(
                "dimension drift: expected {expected}, got {}",
                v.len()
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendRole {
    Generation,
    RetrievalEmbedding,
    AnswerEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

pub const DEFAULT_API_KEY_ENV: &str = "STDQA_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: usize,
    /// Environment variable holding a bearer token; defaults to `STDQA_API_KEY`.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Mock completion rule file.
    #[serde(default)]
    pub script: Option<PathBuf>,
    /// Mock embedding dimension.
    #[serde(default)]
    pub dim: Option<usize>,
    /// On-disk embedding cache directory.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

fn default_timeout() -> u64 {
    120
}

fn default_retries() -> usize {
    2
}

impl BackendConfig {
    pub fn mock(model: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Mock,
            model: model.into(),
            endpoint: None,
            timeout_secs: default_timeout(),
            retries: 0,
            api_key_env: None,
            script: None,
            dim: None,
            cache_dir: None,
        }
    }

    fn api_key(&self) -> Option<String> {
        let var = self.api_key_env.as_deref().unwrap_or(DEFAULT_API_KEY_ENV);
        std::env::var(var).ok().filter(|k| !k.is_empty())
    }

    fn endpoint(&self) -> Result<&str> {
        self.endpoint.as_deref().ok_or_else(|| {
            Error::Config(format!(
                "backend {}: http backend needs an endpoint",
                self.model
            ))
        })
    }

    pub fn build_completion(&self) -> Result<Box<dyn CompletionBackend>> {
        Ok(match self.kind {
            BackendKind::Http => Box::new(HttpCompletion::new(
                self.endpoint()?,
                &self.model,
                self.timeout_secs,
                self.retries,
                self.api_key(),
            )),
            BackendKind::Mock => {
                let script = match &self.script {
                    Some(path) => mock_script_load(path)?,
                    None => MockScript::default(),
                };
                Box::new(MockCompletion::new(&self.model, script))
            }
        })
    }

    pub fn build_embedder(&self) -> Result<Box<dyn EmbeddingBackend>> {
        let inner: Box<dyn EmbeddingBackend> = match self.kind {
            BackendKind::Http => Box::new(HttpEmbedder::new(
                self.endpoint()?,
                &self.model,
                self.timeout_secs,
                self.retries,
                self.api_key(),
            )),
            BackendKind::Mock => Box::new(MockEmbedder::new(
                &self.model,
                self.dim.unwrap_or(mock::DEFAULT_MOCK_DIM),
            )),
        };
        Ok(match &self.cache_dir {
            Some(dir) => Box::new(CachedEmbedder::new(inner, dir)?),
            None => inner,
        })
    }
}
