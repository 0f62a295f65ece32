use std::fs;
use std::path::{Path, PathBuf};

use super::{CallError, CallResult, DimensionLock, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::seed::sha256_hex;

/// Content-addressed on-disk cache in front of an embedding backend.
///
/// Entries are keyed by `sha256(backend id, text)` and stored as
/// little-endian f32 files, so cached and fresh vectors are bit-identical.
pub struct CachedEmbedder {
    inner: Box<dyn EmbeddingBackend>,
    dir: PathBuf,
    dims: DimensionLock,
}

impl CachedEmbedder {
    pub fn new(inner: Box<dyn EmbeddingBackend>, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            inner,
            dir: dir.to_path_buf(),
            dims: DimensionLock::default(),
        })
    }

    fn entry_path(&self, text: &str) -> PathBuf {
        let mut key = Vec::with_capacity(self.inner.id().len() + 1 + text.len());
        key.extend_from_slice(self.inner.id().as_bytes());
        key.push(0);
        key.extend_from_slice(text.as_bytes());
        self.dir.join(format!("{}.f32", sha256_hex(&key)))
    }

    fn read_entry(path: &Path) -> Option<Vec<f32>> {
        let bytes = fs::read(path).ok()?;
        if bytes.len() % 4 != 0 {
            return None;
        }
        Some(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        )
    }

    fn write_entry(path: &Path, v: &[f32]) -> std::io::Result<()> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        // write-then-rename so a cancelled run never leaves a torn entry
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, path)
    }
}

impl EmbeddingBackend for CachedEmbedder {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn embed(&self, texts: &[String]) -> CallResult<Vec<Vec<f32>>> {
        let paths: Vec<PathBuf> = texts.iter().map(|t| self.entry_path(t)).collect();
        let mut out: Vec<Option<Vec<f32>>> = paths.iter().map(|p| Self::read_entry(p)).collect();
        let misses: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !misses.is_empty() {
            let batch: Vec<String> = misses.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.embed(&batch)?;
            if fresh.len() != batch.len() {
                return Err(CallError::Fatal(format!(
                    "expected {} embeddings, got {}",
                    batch.len(),
                    fresh.len()
                )));
            }
            for (&i, v) in misses.iter().zip(fresh) {
                Self::write_entry(&paths[i], &v).map_err(|e| {
                    CallError::Fatal(format!("cache write {}: {e}", paths[i].display()))
                })?;
                out[i] = Some(v);
            }
        }
        let vectors: Vec<Vec<f32>> = out.into_iter().map(|v| v.expect("filled")).collect();
        self.dims.check(&vectors)?;
        Ok(vectors)
    }

    fn retries(&self) -> usize {
        self.inner.retries()
    }
}
