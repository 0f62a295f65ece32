//! Hybrid retrieval: exact dot-product KNN per embedding model plus BM25.
//!
//! Results from the retrievers are not fused. The context is the
//! concatenation of each retriever's top-k in declaration order (dense
//! retrievers first, then BM25) with duplicate chunks dropped after their
//! first appearance.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{embed_batch, EmbeddingBackend};
use crate::corpus::{read_chunks_jsonl, write_chunks_jsonl, Chunk};
use crate::error::{Error, Result};

pub const DEFAULT_EMBED_BATCH: usize = 64;
pub const DEFAULT_PER_RETRIEVER_K: usize = 2;
pub const BM25_RETRIEVER_ID: &str = "bm25";

/// Chunk-aligned embeddings from one model, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub model_id: String,
    pub dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn from_rows(model_id: &str, rows: Vec<Vec<f32>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend(row);
        }
        Ok(Self {
            model_id: model_id.to_string(),
            dim,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(model_id: &str, dim: usize, bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(4)
            || (dim > 0 && !(bytes.len() / 4).is_multiple_of(dim))
            || (dim == 0 && !bytes.is_empty())
        {
            return Err(Error::Invalid(format!(
                "embedding file for {model_id} has {} bytes, not a multiple of {dim} f32 rows",
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            model_id: model_id.to_string(),
            dim,
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    /// Position of the chunk in the indexed chunk list.
    pub ordinal: usize,
    pub score: f64,
    pub retriever_id: String,
}

/// Embeds chunk texts in consecutive batches of `batch_size`.
pub fn embed_chunks(
    chunks: &[Chunk],
    backend: &dyn EmbeddingBackend,
    batch_size: usize,
) -> Result<EmbeddingMatrix> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(chunks.len());
    let mut dim = None;
    for (batch, group) in chunks.chunks(batch_size).enumerate() {
        let texts: Vec<String> = group.iter().map(Chunk::text).collect();
        let vectors = embed_batch(&texts, backend).map_err(|e| Error::EmbeddingBatch {
            batch,
            message: e.to_string(),
        })?;
        let batch_dim = vectors[0].len();
        match dim {
            None => dim = Some(batch_dim),
            Some(d) if d != batch_dim => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: batch_dim,
                })
            }
            Some(_) => {}
        }
        rows.extend(vectors);
    }
    EmbeddingMatrix::from_rows(backend.id(), rows)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Higher score first, then lower ordinal.
fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn top_k(mut scored: Vec<(usize, f64)>, k: usize, retriever_id: &str) -> Vec<ScoredChunk> {
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored
        .into_iter()
        .map(|(ordinal, score)| ScoredChunk {
            ordinal,
            score,
            retriever_id: retriever_id.to_string(),
        })
        .collect()
}

/// Exact top-k by dot product; `k` is capped at the row count.
pub fn knn_query(query: &[f32], matrix: &EmbeddingMatrix, k: usize) -> Result<Vec<ScoredChunk>> {
    if matrix.is_empty() {
        return Ok(Vec::new());
    }
    if query.len() != matrix.dim {
        return Err(Error::DimensionMismatch {
            expected: matrix.dim,
            actual: query.len(),
        });
    }
    let scored = matrix
        .rows()
        .map(|row| dot(query, row))
        .enumerate()
        .collect();
    Ok(top_k(scored, k, &matrix.model_id))
}

/// Lowercased alphanumeric tokens.
pub fn bm25_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    pub params: Bm25Params,
    pub doc_freq: BTreeMap<String, usize>,
    pub term_freqs: Vec<BTreeMap<String, u32>>,
    pub lengths: Vec<usize>,
    pub avg_len: f64,
    #[serde(skip)]
    postings: BTreeMap<String, Vec<(usize, u32)>>,
}

impl Bm25Index {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    fn rebuild_postings(&mut self) {
        self.postings.clear();
        for (ordinal, tfs) in self.term_freqs.iter().enumerate() {
            for (term, &tf) in tfs {
                self.postings
                    .entry(term.clone())
                    .or_default()
                    .push((ordinal, tf));
            }
        }
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("bm25 index", e))
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let mut index: Self =
            serde_json::from_str(json).map_err(|e| Error::json("bm25 index", e))?;
        if index.term_freqs.len() != index.lengths.len() {
            return Err(Error::Invalid(
                "bm25 index: term_freqs and lengths disagree".into(),
            ));
        }
        index.rebuild_postings();
        Ok(index)
    }
}

pub fn bm25_build(chunks: &[Chunk], params: Bm25Params) -> Bm25Index {
    let texts: Vec<String> = chunks.iter().map(Chunk::text).collect();
    bm25_build_texts(&texts, params)
}

pub fn bm25_build_texts<S: AsRef<str>>(texts: &[S], params: Bm25Params) -> Bm25Index {
    let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
    let mut term_freqs = Vec::with_capacity(texts.len());
    let mut lengths = Vec::with_capacity(texts.len());
    for text in texts {
        let mut tfs: BTreeMap<String, u32> = BTreeMap::new();
        let mut len = 0;
        for token in bm25_tokens(text.as_ref()) {
            *tfs.entry(token).or_default() += 1;
            len += 1;
        }
        for term in tfs.keys() {
            *doc_freq.entry(term.clone()).or_default() += 1;
        }
        term_freqs.push(tfs);
        lengths.push(len);
    }
    let avg_len = if lengths.is_empty() {
        0.0
    } else {
        lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
    };
    let mut index = Bm25Index {
        params,
        doc_freq,
        term_freqs,
        lengths,
        avg_len,
        postings: BTreeMap::new(),
    };
    index.rebuild_postings();
    index
}

/// BM25 score of every chunk for the question's tokens (repeated query
/// tokens contribute once per occurrence).
pub fn bm25_scores(question: &str, index: &Bm25Index) -> Vec<f64> {
    let mut scores = vec![0.0; index.len()];
    let Bm25Params { k1, b } = index.params;
    for term in bm25_tokens(question) {
        let Some(postings) = index.postings.get(&term) else {
            continue;
        };
        let idf = index.idf(postings.len());
        for &(ordinal, tf) in postings {
            let tf = tf as f64;
            let norm = if index.avg_len > 0.0 {
                index.lengths[ordinal] as f64 / index.avg_len
            } else {
                0.0
            };
            scores[ordinal] += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm));
        }
    }
    scores
}

/// Top-k chunks with a positive BM25 score.
pub fn bm25_query(question: &str, index: &Bm25Index, k: usize) -> Vec<ScoredChunk> {
    let scored = bm25_scores(question, index)
        .into_iter()
        .enumerate()
        .filter(|(_, s)| *s > 0.0)
        .collect();
    top_k(scored, k, BM25_RETRIEVER_ID)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub chunk_id: String,
    pub text: String,
    pub retriever_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub entries: Vec<ContextEntry>,
}

impl Context {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.text.as_str())
    }

    /// Appends hits in order, skipping chunks already present.
    pub fn assemble<'a>(chunks: &[Chunk], hits: impl IntoIterator<Item = &'a ScoredChunk>) -> Self {
        let mut seen = HashSet::new();
        let entries = hits
            .into_iter()
            .filter(|h| seen.insert(h.ordinal))
            .map(|h| ContextEntry {
                chunk_id: chunks[h.ordinal].chunk_id.clone(),
                text: chunks[h.ordinal].text(),
                retriever_id: h.retriever_id.clone(),
                score: h.score,
            })
            .collect();
        Self { entries }
    }
}

/// A dense index paired with the backend that embeds queries for it.
#[derive(Clone, Copy)]
pub struct DenseRetriever<'a> {
    pub matrix: &'a EmbeddingMatrix,
    pub backend: &'a dyn EmbeddingBackend,
}

enum Retriever<'a> {
    Dense(DenseRetriever<'a>),
    Lexical(&'a Bm25Index),
}

impl Retriever<'_> {
    fn id(&self) -> &str {
        match self {
            Retriever::Dense(d) => &d.matrix.model_id,
            Retriever::Lexical(_) => BM25_RETRIEVER_ID,
        }
    }

    fn top(&self, question: &str, k: usize) -> Result<Vec<ScoredChunk>> {
        match self {
            Retriever::Dense(d) => {
                let query = embed_batch(&[question.to_string()], d.backend)?;
                knn_query(&query[0], d.matrix, k)
            }
            Retriever::Lexical(index) => Ok(bm25_query(question, index, k)),
        }
    }
}

/// Union of every retriever's top `per_retriever_k`, in declaration order,
/// first occurrence wins.
pub fn hybrid_retrieve(
    question: &str,
    chunks: &[Chunk],
    dense: &[DenseRetriever<'_>],
    bm25: Option<&Bm25Index>,
    per_retriever_k: usize,
) -> Result<Context> {
    if question.trim().is_empty() {
        return Err(Error::Invalid("question must be non-empty".into()));
    }
    let retrievers: Vec<Retriever> = dense
        .iter()
        .copied()
        .map(Retriever::Dense)
        .chain(bm25.map(Retriever::Lexical))
        .collect();
    let results: Vec<Vec<ScoredChunk>> = retrievers
        .par_iter()
        .map(|r| {
            r.top(question, per_retriever_k)
                .map_err(|e| Error::Retriever {
                    retriever: r.id().to_string(),
                    source: Box::new(e),
                })
        })
        .collect::<Result<_>>()?;
    if let Some(bad) = results.iter().flatten().find(|h| h.ordinal >= chunks.len()) {
        return Err(Error::Invalid(format!(
            "retriever {} returned chunk {} but only {} chunks are loaded",
            bad.retriever_id,
            bad.ordinal,
            chunks.len()
        )));
    }
    Ok(Context::assemble(chunks, results.iter().flatten()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseManifest {
    pub model_id: String,
    pub dim: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub chunk_count: usize,
    pub chunks_file: String,
    pub dense: Vec<DenseManifest>,
    pub bm25: Bm25Params,
    pub bm25_file: String,
}

/// Chunks plus every retrieval structure built over them.
#[derive(Debug, Clone)]
pub struct ChunkIndex {
    pub chunks: Vec<Chunk>,
    pub dense: Vec<EmbeddingMatrix>,
    pub bm25: Bm25Index,
}

impl ChunkIndex {
    pub fn build(
        chunks: Vec<Chunk>,
        embedders: &[&dyn EmbeddingBackend],
        batch_size: usize,
        params: Bm25Params,
    ) -> Result<Self> {
        let mut dense = Vec::with_capacity(embedders.len());
        for backend in embedders {
            let matrix =
                embed_chunks(&chunks, *backend, batch_size).map_err(|e| Error::Retriever {
                    retriever: backend.id().to_string(),
                    source: Box::new(e),
                })?;
            dense.push(matrix);
        }
        let bm25 = bm25_build(&chunks, params);
        Ok(Self {
            chunks,
            dense,
            bm25,
        })
    }

    /// Pairs each dense matrix with the backend of the same model id.
    pub fn dense_retrievers<'a>(
        &'a self,
        backends: &[&'a dyn EmbeddingBackend],
    ) -> Result<Vec<DenseRetriever<'a>>> {
        self.dense
            .iter()
            .map(|matrix| {
                backends
                    .iter()
                    .find(|b| b.id() == matrix.model_id)
                    .map(|backend| DenseRetriever {
                        matrix,
                        backend: *backend,
                    })
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "no embedding backend configured for model {}",
                            matrix.model_id
                        ))
                    })
            })
            .collect()
    }

    pub fn retrieve(
        &self,
        question: &str,
        backends: &[&dyn EmbeddingBackend],
        per_retriever_k: usize,
    ) -> Result<Context> {
        let dense = self.dense_retrievers(backends)?;
        hybrid_retrieve(
            question,
            &self.chunks,
            &dense,
            Some(&self.bm25),
            per_retriever_k,
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let chunks_file = "chunks.jsonl".to_string();
        write_chunks_jsonl(&dir.join(&chunks_file), &self.chunks)?;
        let mut dense = Vec::with_capacity(self.dense.len());
        for (i, matrix) in self.dense.iter().enumerate() {
            let file = format!("dense_{i}.f32");
            let path = dir.join(&file);
            fs::write(&path, matrix.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
            dense.push(DenseManifest {
                model_id: matrix.model_id.clone(),
                dim: matrix.dim,
                file,
            });
        }
        let bm25_file = "bm25.json".to_string();
        let path = dir.join(&bm25_file);
        fs::write(&path, self.bm25.to_json()?).map_err(|e| Error::io(&path, e))?;
        let manifest = IndexManifest {
            chunk_count: self.chunks.len(),
            chunks_file,
            dense,
            bm25: self.bm25.params.clone(),
            bm25_file,
        };
        let path = dir.join("index.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::json("index manifest", e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: IndexManifest =
            serde_json::from_str(&raw).map_err(|e| Error::json(path.display().to_string(), e))?;
        let chunks = read_chunks_jsonl(&dir.join(&manifest.chunks_file))?;
        if chunks.len() != manifest.chunk_count {
            return Err(Error::Invalid(format!(
                "index manifest lists {} chunks, found {}",
                manifest.chunk_count,
                chunks.len()
            )));
        }
        let mut dense = Vec::with_capacity(manifest.dense.len());
        for entry in &manifest.dense {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let matrix = EmbeddingMatrix::from_le_bytes(&entry.model_id, entry.dim, &bytes)?;
            if matrix.len() != chunks.len() {
                return Err(Error::Invalid(format!(
                    "{} has {} rows for {} chunks",
                    entry.file,
                    matrix.len(),
                    chunks.len()
                )));
            }
            dense.push(matrix);
        }
        let path = dir.join(&manifest.bm25_file);
        let bm25 =
            Bm25Index::from_json(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        if bm25.len() != chunks.len() {
            return Err(Error::Invalid(
                "bm25 statistics do not match the chunk count".into(),
            ));
        }
        Ok(Self {
            chunks,
            dense,
            bm25,
        })
    }
}
