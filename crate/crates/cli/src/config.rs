//! Pipeline configuration file (TOML).
//!
//! ```toml
//! [pipeline]
//! shuffle_k = 20
//! seed = 7
//!
//! [backends.generation]
//! kind = "http"
//! model = "phi-2"
//! endpoint = "http://localhost:8000/v1/completions"
//!
//! [[backends.retrieval]]
//! kind = "mock"
//! model = "bag-of-words"
//! dim = 256
//!
//! [paths]
//! index = "out/index"
//! abbrevs = "out/abbreviations.json"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::Deserialize;
use stdqa_core::backend::BackendConfig;
use stdqa_core::{ChunkingConfig, CompletionBackend, EmbeddingBackend, PipelineConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub pipeline: PipelineConfig,
    pub chunking: ChunkingConfig,
    pub backends: BackendsConfig,
    pub paths: PathsConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendsConfig {
    pub generation: Option<BackendConfig>,
    /// One dense retriever per entry; BM25 is always on.
    pub retrieval: Vec<BackendConfig>,
    pub answer_embedding: Option<BackendConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub index: Option<PathBuf>,
    pub abbrevs: Option<PathBuf>,
}

fn resolve(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

fn resolve_backend(base: &Path, b: &mut BackendConfig) {
    resolve(base, &mut b.script);
    resolve(base, &mut b.cache_dir);
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let raw = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: FileConfig =
            toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.paths.index);
        resolve(base, &mut cfg.paths.abbrevs);
        if let Some(b) = &mut cfg.backends.generation {
            resolve_backend(base, b);
        }
        if let Some(b) = &mut cfg.backends.answer_embedding {
            resolve_backend(base, b);
        }
        for b in &mut cfg.backends.retrieval {
            resolve_backend(base, b);
        }
        Ok(cfg)
    }
}

/// Live backends built from [`BackendsConfig`].
pub struct LiveBackends {
    pub generation: Option<Box<dyn CompletionBackend>>,
    pub retrieval: Vec<Box<dyn EmbeddingBackend>>,
    pub answer_embedding: Option<Box<dyn EmbeddingBackend>>,
}

impl LiveBackends {
    pub fn build(cfg: &BackendsConfig) -> Result<Self> {
        let mut ids: Vec<&str> = cfg.retrieval.iter().map(|b| b.model.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            bail!("retrieval backend {} is configured twice", w[0]);
        }
        Ok(Self {
            generation: cfg
                .generation
                .as_ref()
                .map(BackendConfig::build_completion)
                .transpose()?,
            retrieval: cfg
                .retrieval
                .iter()
                .map(BackendConfig::build_embedder)
                .collect::<stdqa_core::Result<_>>()?,
            answer_embedding: cfg
                .answer_embedding
                .as_ref()
                .map(BackendConfig::build_embedder)
                .transpose()?,
        })
    }

    pub fn retrieval_refs(&self) -> Vec<&dyn EmbeddingBackend> {
        self.retrieval.iter().map(|b| b.as_ref()).collect()
    }

    pub fn generation(&self) -> Result<&dyn CompletionBackend> {
        match &self.generation {
            Some(b) => Ok(b.as_ref()),
            None => bail!("no [backends.generation] configured"),
        }
    }
}
