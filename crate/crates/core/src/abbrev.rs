//! Abbreviation dictionary mining and question-side detection.
//!
//! Entries are mined only from sections whose heading mentions
//! "abbreviation". Each body line of the form `TOKEN <whitespace> EXPANSION`
//! whose token passes the [`AbbrevGrammar`] yields one entry.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbbrevEntry {
    pub abbrev: String,
    pub expansion: String,
    pub source_doc: String,
}

/// A later expansion that lost to the first-seen one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conflict {
    pub abbrev: String,
    pub kept: String,
    pub discarded: String,
    pub source_doc: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbbrevDict {
    pub entries: BTreeMap<String, AbbrevEntry>,
    pub conflict_log: Vec<Conflict>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub token: String,
    pub expansion: Option<String>,
    /// Character offsets `[start, end)` of the first occurrence.
    pub span: (usize, usize),
}

/// What counts as an abbreviation token.
///
/// Tokens consist of uppercase letters, digits and inner hyphens, have at
/// least `min_len` characters, and at least `min_upper_fraction` of their
/// characters are uppercase letters (`5G-NR` passes, `2024` does not).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AbbrevGrammar {
    pub min_len: usize,
    pub min_upper_fraction: f64,
    pub stopwords: Vec<String>,
}

impl Default for AbbrevGrammar {
    fn default() -> Self {
        Self {
            min_len: 2,
            min_upper_fraction: 0.5,
            stopwords: [
                "AND", "OR", "NOT", "THE", "OF", "TO", "IN", "ON", "AT", "BY", "AN", "AS", "IS",
                "IT", "IF", "NO", "FOR", "ALL", "NONE", "ABOVE", "TRUE", "FALSE",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

impl AbbrevGrammar {
    pub fn matches(&self, token: &str) -> bool {
        let len = token.chars().count();
        if len < self.min_len.max(1) || token.starts_with('-') || token.ends_with('-') {
            return false;
        }
        let mut upper = 0usize;
        for c in token.chars() {
            if c.is_uppercase() && c.is_alphabetic() {
                upper += 1;
            } else if !(c.is_ascii_digit() || c == '-') {
                return false;
            }
        }
        if (upper as f64) < self.min_upper_fraction * len as f64 {
            return false;
        }
        !self.stopwords.iter().any(|s| s == token)
    }
}

fn is_definitions_heading(heading: &str) -> bool {
    heading.to_lowercase().contains("abbreviation")
}

pub fn extract_abbreviations(document: &Document) -> Vec<AbbrevEntry> {
    extract_with_grammar(document, &AbbrevGrammar::default())
}

pub fn extract_with_grammar(document: &Document, grammar: &AbbrevGrammar) -> Vec<AbbrevEntry> {
    let mut out = Vec::new();
    for section in &document.sections {
        if section.is_front_matter || !is_definitions_heading(&section.heading) {
            continue;
        }
        for line in section.body.lines() {
            let line = line.trim();
            let Some(split) = line.find(char::is_whitespace) else {
                continue;
            };
            let (token, rest) = line.split_at(split);
            let expansion = rest.trim();
            if expansion.is_empty() || !grammar.matches(token) {
                continue;
            }
            out.push(AbbrevEntry {
                abbrev: token.to_string(),
                expansion: expansion.to_string(),
                source_doc: document.doc_id.clone(),
            });
        }
    }
    out
}

impl AbbrevDict {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, abbrev: &str) -> Option<&str> {
        self.entries.get(abbrev).map(|e| e.expansion.as_str())
    }

    /// Adds entries with first-seen-wins; differing later expansions go to
    /// the conflict log.
    pub fn merge_entries<'a>(&mut self, entries: impl IntoIterator<Item = &'a AbbrevEntry>) {
        for entry in entries {
            match self.entries.get(&entry.abbrev) {
                None => {
                    self.entries.insert(entry.abbrev.clone(), entry.clone());
                }
                Some(kept) if kept.expansion == entry.expansion => {}
                Some(kept) => self.conflict_log.push(Conflict {
                    abbrev: entry.abbrev.clone(),
                    kept: kept.expansion.clone(),
                    discarded: entry.expansion.clone(),
                    source_doc: entry.source_doc.clone(),
                }),
            }
        }
    }

    /// `{abbrev: expansion}` view used for persistence.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.expansion.clone()))
            .collect()
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Self {
        let entries = map
            .into_iter()
            .map(|(abbrev, expansion)| {
                let entry = AbbrevEntry {
                    abbrev: abbrev.clone(),
                    expansion,
                    source_doc: String::new(),
                };
                (abbrev, entry)
            })
            .collect();
        Self {
            entries,
            conflict_log: Vec::new(),
        }
    }

    pub fn save(&self, dict_path: &Path, conflicts_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_map())
            .map_err(|e| Error::json("abbreviation dictionary", e))?;
        fs::write(dict_path, json + "\n").map_err(|e| Error::io(dict_path, e))?;
        let mut buf = Vec::new();
        for conflict in &self.conflict_log {
            serde_json::to_writer(&mut buf, conflict).map_err(|e| Error::json("conflict", e))?;
            buf.write_all(b"\n").expect("write to vec");
        }
        fs::write(conflicts_path, buf).map_err(|e| Error::io(conflicts_path, e))
    }

    pub fn load(dict_path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(dict_path).map_err(|e| Error::io(dict_path, e))?;
        let map = serde_json::from_str(&raw)
            .map_err(|e| Error::json(dict_path.display().to_string(), e))?;
        Ok(Self::from_map(map))
    }
}

pub fn merge_dictionaries(entry_lists: &[Vec<AbbrevEntry>]) -> AbbrevDict {
    let mut dict = AbbrevDict::default();
    for list in entry_lists {
        dict.merge_entries(list);
    }
    dict
}

/// Splits text into candidate tokens: runs of alphanumerics and hyphens,
/// with outer hyphens trimmed. Yields `(token, char_start, char_end)`.
fn candidate_tokens(text: &str) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let flush = |current: &mut String, start: usize, out: &mut Vec<(String, usize, usize)>| {
        if current.is_empty() {
            return;
        }
        let lead = current.chars().take_while(|&c| c == '-').count();
        let trimmed = current.trim_matches('-');
        if !trimmed.is_empty() {
            let s = start + lead;
            out.push((trimmed.to_string(), s, s + trimmed.chars().count()));
        }
        current.clear();
    };
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() || c == '-' {
            if current.is_empty() {
                start = i;
            }
            current.push(c);
        } else {
            flush(&mut current, start, &mut out);
        }
    }
    flush(&mut current, start, &mut out);
    out
}

pub fn detect_abbreviations(text: &str, dict: &AbbrevDict) -> Vec<Detection> {
    detect_with_grammar(text, dict, &AbbrevGrammar::default())
}

/// One detection per distinct abbreviation token, in order of first
/// occurrence.
pub fn detect_with_grammar(
    text: &str,
    dict: &AbbrevDict,
    grammar: &AbbrevGrammar,
) -> Vec<Detection> {
    let mut seen = HashSet::new();
    candidate_tokens(text)
        .into_iter()
        .filter(|(token, _, _)| grammar.matches(token))
        .filter(|(token, _, _)| seen.insert(token.clone()))
        .map(|(token, start, end)| Detection {
            expansion: dict.get(&token).map(str::to_string),
            token,
            span: (start, end),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitRate {
    /// Distinct detected tokens that have an expansion.
    pub covered: usize,
    /// Distinct detected tokens over all questions.
    pub detected: usize,
    pub rate: f64,
}

pub fn hit_rate_stats<S: AsRef<str>>(questions: &[S], dict: &AbbrevDict) -> HitRate {
    let grammar = AbbrevGrammar::default();
    let mut tokens = HashSet::new();
    for q in questions {
        for (token, _, _) in candidate_tokens(q.as_ref()) {
            if grammar.matches(&token) {
                tokens.insert(token);
            }
        }
    }
    let detected = tokens.len();
    let covered = tokens.iter().filter(|t| dict.get(t).is_some()).count();
    let rate = if detected == 0 {
        1.0
    } else {
        covered as f64 / detected as f64
    };
    HitRate {
        covered,
        detected,
        rate,
    }
}

/// Fraction of distinct detected abbreviation tokens that the dictionary
/// expands; 1.0 when nothing is detected.
pub fn hit_rate<S: AsRef<str>>(questions: &[S], dict: &AbbrevDict) -> f64 {
    hit_rate_stats(questions, dict).rate
}
