//! Section parsing and heading-prefixed chunking of standards documents.
//!
//! Documents are split at numbered heading lines (`4.1 Paging`). Text before
//! the first heading and sections named in the front-matter skip-list are
//! kept in the [`Document`] but never chunked. Each remaining section body is
//! cut into fixed windows of `chunk_size` characters and every chunk carries
//! its section heading in front of the body.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::sha256_hex;

pub const DEFAULT_CHUNK_SIZE: usize = 1024;
pub const DEFAULT_HEADING_PATTERN: &str = r"^\d+(\.\d+)*\s+\S.*$";

/// Heading used for the text that precedes the first numbered heading.
pub const PREAMBLE_HEADING: &str = "Preamble";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    /// Window length in characters.
    pub chunk_size: usize,
    /// Characters shared by consecutive windows.
    pub chunk_overlap: usize,
    pub heading_pattern: String,
    /// Section titles (numbering stripped, case-insensitive) that are never chunked.
    pub front_matter_headings: Vec<String>,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            chunk_overlap: 0,
            heading_pattern: DEFAULT_HEADING_PATTERN.to_string(),
            front_matter_headings: ["Contents", "Scope", "References", "Foreword"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        if self.chunk_overlap >= self.chunk_size {
            return Err(Error::Config(format!(
                "chunk_overlap ({}) must be smaller than chunk_size ({})",
                self.chunk_overlap, self.chunk_size
            )));
        }
        self.heading_regex().map(|_| ())
    }

    fn heading_regex(&self) -> Result<Regex> {
        Regex::new(&self.heading_pattern)
            .map_err(|e| Error::Config(format!("heading_pattern: {e}")))
    }

    /// Stable hash of the configuration, recorded in corpus manifests.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&json)
    }

    fn is_front_matter(&self, heading: &str) -> bool {
        let title = strip_numbering(heading);
        self.front_matter_headings
            .iter()
            .any(|h| h.trim().eq_ignore_ascii_case(title))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub body: String,
    pub is_front_matter: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub sections: Vec<Section>,
}

impl Document {
    pub fn chunkable_sections(&self) -> impl Iterator<Item = (usize, &Section)> {
        self.sections
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_front_matter)
    }
}

/// The retrieval unit: a window of one section body plus its heading.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub heading: String,
    pub body: String,
}

impl Chunk {
    /// Heading and body joined by a newline; this is what gets embedded,
    /// indexed and shown to the model.
    pub fn text(&self) -> String {
        let mut text = String::with_capacity(self.heading.len() + 1 + self.body.len());
        text.push_str(&self.heading);
        text.push('\n');
        text.push_str(&self.body);
        text
    }
}

/// `4.1 Paging` -> `Paging`
fn strip_numbering(heading: &str) -> &str {
    let trimmed = heading.trim();
    let rest = trimmed.trim_start_matches(|c: char| c.is_ascii_digit() || c == '.');
    if rest.len() != trimmed.len() && rest.starts_with(char::is_whitespace) {
        rest.trim()
    } else {
        trimmed
    }
}

pub fn parse_document(raw_text: &str, doc_id: &str, cfg: &ChunkingConfig) -> Result<Document> {
    if raw_text.trim().is_empty() {
        return Err(Error::EmptyDocument);
    }
    if doc_id.is_empty() {
        return Err(Error::Invalid("doc_id must be non-empty".into()));
    }
    let heading_re = cfg.heading_regex()?;

    // (line start, body start, heading text)
    let mut headings: Vec<(usize, usize, String)> = Vec::new();
    let mut offset = 0;
    for line in raw_text.split_inclusive('\n') {
        let content = line.trim_end_matches(['\n', '\r']);
        if heading_re.is_match(content) {
            headings.push((offset, offset + line.len(), content.trim_end().to_string()));
        }
        offset += line.len();
    }

    let mut sections = Vec::with_capacity(headings.len() + 1);
    let preamble_end = headings.first().map_or(raw_text.len(), |h| h.0);
    let preamble = &raw_text[..preamble_end];
    if !preamble.trim().is_empty() {
        sections.push(Section {
            heading: PREAMBLE_HEADING.to_string(),
            body: preamble.to_string(),
            is_front_matter: true,
        });
    }
    for (i, (_, body_start, heading)) in headings.iter().enumerate() {
        let body_end = headings.get(i + 1).map_or(raw_text.len(), |next| next.0);
        sections.push(Section {
            is_front_matter: cfg.is_front_matter(heading),
            heading: heading.clone(),
            body: raw_text[*body_start..body_end].to_string(),
        });
    }

    let title = preamble
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or(doc_id)
        .to_string();

    Ok(Document {
        doc_id: doc_id.to_string(),
        title,
        sections,
    })
}

/// Character offsets `(start, end)` of each window over a body of `len` chars.
pub fn window_bounds(len: usize, chunk_size: usize, chunk_overlap: usize) -> Vec<(usize, usize)> {
    assert!(
        chunk_overlap < chunk_size,
        "overlap must be below chunk size"
    );
    let stride = chunk_size - chunk_overlap;
    let mut out = Vec::new();
    let mut start = 0;
    while start < len {
        let end = (start + chunk_size).min(len);
        out.push((start, end));
        if end == len {
            break;
        }
        start += stride;
    }
    out
}

/// Splits one section into chunks. Front-matter sections yield nothing.
pub fn chunk_section(
    doc_id: &str,
    section_ordinal: usize,
    section: &Section,
    cfg: &ChunkingConfig,
) -> Vec<Chunk> {
    if section.is_front_matter {
        return Vec::new();
    }
    let body = &section.body;
    // byte offset of every char boundary, plus the end
    let mut boundaries: Vec<usize> = body.char_indices().map(|(i, _)| i).collect();
    let n_chars = boundaries.len();
    boundaries.push(body.len());

    window_bounds(n_chars, cfg.chunk_size, cfg.chunk_overlap)
        .into_iter()
        .enumerate()
        .map(|(ordinal, (start, end))| Chunk {
            chunk_id: format!("{doc_id}:s{section_ordinal}:c{ordinal}"),
            doc_id: doc_id.to_string(),
            heading: section.heading.clone(),
            body: body[boundaries[start]..boundaries[end]].to_string(),
        })
        .collect()
}

pub fn chunk_document(doc: &Document, cfg: &ChunkingConfig) -> Vec<Chunk> {
    doc.chunkable_sections()
        .flat_map(|(ordinal, section)| chunk_section(&doc.doc_id, ordinal, section, cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentSummary {
    pub doc_id: String,
    pub title: String,
    pub sections: usize,
    pub chunkable_sections: usize,
    pub chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config_hash: String,
    pub chunking: ChunkingConfig,
    pub documents: Vec<DocumentSummary>,
    pub total_chunks: usize,
}

/// Document id derived from a file path: the file stem.
pub fn doc_id_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

pub fn read_document(path: &Path, cfg: &ChunkingConfig) -> Result<Document> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_document(&raw, &doc_id_for(path), cfg).map_err(|e| match e {
        Error::EmptyDocument => Error::Invalid(format!("{}: empty document", path.display())),
        other => other,
    })
}

/// Parses every document (in parallel) and concatenates their chunks in
/// input path order.
pub fn build_corpus(
    paths: &[PathBuf],
    cfg: &ChunkingConfig,
) -> Result<(Vec<Chunk>, CorpusManifest)> {
    cfg.validate()?;
    let docs = read_documents(paths, cfg)?;

    let mut chunks = Vec::new();
    let mut documents = Vec::with_capacity(docs.len());
    for doc in &docs {
        let doc_chunks = chunk_document(doc, cfg);
        documents.push(DocumentSummary {
            doc_id: doc.doc_id.clone(),
            title: doc.title.clone(),
            sections: doc.sections.len(),
            chunkable_sections: doc.chunkable_sections().count(),
            chunks: doc_chunks.len(),
        });
        chunks.extend(doc_chunks);
    }
    let manifest = CorpusManifest {
        config_hash: cfg.config_hash(),
        chunking: cfg.clone(),
        documents,
        total_chunks: chunks.len(),
    };
    Ok((chunks, manifest))
}

/// Reads and parses documents in parallel, keeping input order. Document ids
/// must be unique.
pub fn read_documents(paths: &[PathBuf], cfg: &ChunkingConfig) -> Result<Vec<Document>> {
    let docs: Vec<Document> = paths
        .par_iter()
        .map(|p| read_document(p, cfg))
        .collect::<Result<_>>()?;
    let mut seen = HashSet::new();
    for doc in &docs {
        if !seen.insert(doc.doc_id.as_str()) {
            return Err(Error::Invalid(format!("duplicate doc_id {:?}", doc.doc_id)));
        }
    }
    Ok(docs)
}

pub fn write_chunks_jsonl(path: &Path, chunks: &[Chunk]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for chunk in chunks {
        serde_json::to_writer(&mut out, chunk).map_err(|e| Error::json("chunk", e))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_chunks_jsonl(path: &Path) -> Result<Vec<Chunk>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut chunks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let chunk = serde_json::from_str(&line)
            .map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e))?;
        chunks.push(chunk);
    }
    Ok(chunks)
}
