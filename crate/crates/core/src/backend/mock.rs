//! Deterministic scriptable backends for tests and desk-scale experiments.
//!
//! Rule file syntax, one directive per line (`#` starts a comment):
//!
//! ```text
//! exact <sha256-hex of prompt> => <response>
//! contains <needle> => <response>
//! truth <needle> => <gold option text>
//! accuracy <p>
//! bias-slot <n>
//! always-slot <n>
//! default <response>
//! ```
//!
//! A prompt is answered by the first matching `exact` rule, then the first
//! matching `contains`/`truth` rule in file order, then `always-slot`, then
//! `default`. A `truth` rule answers `option <i>` for the listed slot showing
//! the gold text, or the gold text itself when the prompt lists no options.
//! With `accuracy p` below 1, each truth answer is correct with probability
//! `p` (a coin keyed by the prompt and request seed) and otherwise names
//! `bias-slot` (default 1). Responses may use `\n` for newlines.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{CallResult, CompletionBackend, CompletionRequest, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::seed::sha256_hex;

pub const DEFAULT_MOCK_DIM: usize = 256;
const FALLBACK_RESPONSE: &str = "I am not sure.";

#[derive(Debug, Clone, PartialEq)]
pub enum MockRule {
    Contains { needle: String, response: String },
    Truth { needle: String, gold: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockScript {
    pub exact: Vec<(String, String)>,
    pub rules: Vec<MockRule>,
    pub accuracy: f64,
    /// 1-based slot named by wrong truth answers.
    pub bias_slot: usize,
    pub always_slot: Option<usize>,
    pub default: String,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            exact: Vec::new(),
            rules: Vec::new(),
            accuracy: 1.0,
            bias_slot: 1,
            always_slot: None,
            default: FALLBACK_RESPONSE.to_string(),
        }
    }
}

fn unescape(s: &str) -> String {
    s.replace("\\n", "\n")
}

fn split_arrow(rest: &str, line: usize) -> Result<(String, String)> {
    let (lhs, rhs) = rest.split_once("=>").ok_or_else(|| Error::MockScript {
        line,
        message: "expected `<pattern> => <response>`".into(),
    })?;
    let lhs = lhs.trim();
    if lhs.is_empty() {
        return Err(Error::MockScript {
            line,
            message: "empty pattern".into(),
        });
    }
    Ok((unescape(lhs), unescape(rhs.trim())))
}

fn parse_slot(arg: &str, line: usize) -> Result<usize> {
    match arg.trim().parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(Error::MockScript {
            line,
            message: format!("expected a 1-based slot, got {arg:?}"),
        }),
    }
}

impl MockScript {
    pub fn parse(text: &str) -> Result<Self> {
        let mut script = MockScript::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (directive, rest) = trimmed
                .split_once(char::is_whitespace)
                .unwrap_or((trimmed, ""));
            let rest = rest.trim();
            match directive {
                "exact" => {
                    let (hash, response) = split_arrow(rest, line)?;
                    if hash.len() != 64 || !hash.chars().all(|c| c.is_ascii_hexdigit()) {
                        return Err(Error::MockScript {
                            line,
                            message: "exact rules take a sha256 hex digest".into(),
                        });
                    }
                    script.exact.push((hash.to_ascii_lowercase(), response));
                }
                "contains" => {
                    let (needle, response) = split_arrow(rest, line)?;
                    script.rules.push(MockRule::Contains { needle, response });
                }
                "truth" => {
                    let (needle, gold) = split_arrow(rest, line)?;
                    script.rules.push(MockRule::Truth { needle, gold });
                }
                "accuracy" => {
                    script.accuracy = match rest.parse::<f64>() {
                        Ok(p) if (0.0..=1.0).contains(&p) => p,
                        _ => {
                            return Err(Error::MockScript {
                                line,
                                message: format!("accuracy must be in [0, 1], got {rest:?}"),
                            })
                        }
                    }
                }
                "bias-slot" => script.bias_slot = parse_slot(rest, line)?,
                "always-slot" => script.always_slot = Some(parse_slot(rest, line)?),
                "default" => script.default = unescape(rest),
                other => {
                    return Err(Error::MockScript {
                        line,
                        message: format!("unknown directive {other:?}"),
                    })
                }
            }
        }
        Ok(script)
    }

    /// Convenience for building a rule file programmatically.
    pub fn to_text(&self) -> String {
        let esc = |s: &str| s.replace('\n', "\\n");
        let mut out = String::new();
        for (hash, response) in &self.exact {
            out.push_str(&format!("exact {hash} => {}\n", esc(response)));
        }
        for rule in &self.rules {
            match rule {
                MockRule::Contains { needle, response } => {
                    out.push_str(&format!("contains {} => {}\n", esc(needle), esc(response)))
                }
                MockRule::Truth { needle, gold } => {
                    out.push_str(&format!("truth {} => {}\n", esc(needle), esc(gold)))
                }
            }
        }
        out.push_str(&format!("accuracy {}\n", self.accuracy));
        out.push_str(&format!("bias-slot {}\n", self.bias_slot));
        if let Some(slot) = self.always_slot {
            out.push_str(&format!("always-slot {slot}\n"));
        }
        out.push_str(&format!("default {}\n", esc(&self.default)));
        out
    }
}

pub fn mock_script_load(path: &Path) -> Result<MockScript> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MockScript::parse(&text)
}

/// `option <i>: <text>` lines of a rendered prompt, as (slot, text).
fn listed_options(prompt: &str) -> Vec<(usize, &str)> {
    prompt
        .lines()
        .filter_map(|line| {
            let rest = line.strip_prefix("option ")?;
            let (num, text) = rest.split_once(": ")?;
            Some((num.parse().ok()?, text))
        })
        .collect()
}

fn unit_coin(prompt: &str, seed: Option<u64>) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.unwrap_or(0).to_le_bytes());
    hasher.update(prompt.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug)]
pub struct MockCompletion {
    id: String,
    script: MockScript,
    batches: Mutex<Vec<usize>>,
}

impl MockCompletion {
    pub fn new(id: &str, script: MockScript) -> Self {
        Self {
            id: id.to_string(),
            script,
            batches: Mutex::new(Vec::new()),
        }
    }

    /// Sizes of every batch received so far.
    pub fn batch_sizes(&self) -> Vec<usize> {
        self.batches.lock().expect("mock lock").clone()
    }

    fn truth_answer(&self, prompt: &str, gold: &str, seed: Option<u64>) -> String {
        let options = listed_options(prompt);
        let correct = self.script.accuracy >= 1.0 || unit_coin(prompt, seed) < self.script.accuracy;
        if options.is_empty() {
            return if correct {
                gold.to_string()
            } else {
                self.script.default.clone()
            };
        }
        let Some(&(slot, _)) = options.iter().find(|(_, text)| *text == gold) else {
            return self.script.default.clone();
        };
        if correct {
            format!("option {slot}")
        } else {
            format!("option {}", self.script.bias_slot)
        }
    }

    pub fn respond(&self, prompt: &str, seed: Option<u64>) -> String {
        if !self.script.exact.is_empty() {
            let hash = sha256_hex(prompt.as_bytes());
            if let Some((_, response)) = self.script.exact.iter().find(|(h, _)| *h == hash) {
                return response.clone();
            }
        }
        for rule in &self.script.rules {
            match rule {
                MockRule::Contains { needle, response } if prompt.contains(needle.as_str()) => {
                    return response.clone();
                }
                MockRule::Truth { needle, gold } if prompt.contains(needle.as_str()) => {
                    return self.truth_answer(prompt, gold, seed);
                }
                _ => {}
            }
        }
        match self.script.always_slot {
            Some(slot) => format!("option {slot}"),
            None => self.script.default.clone(),
        }
    }
}

impl CompletionBackend for MockCompletion {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> CallResult<Vec<String>> {
        self.batches
            .lock()
            .expect("mock lock")
            .push(req.prompts.len());
        Ok(req
            .prompts
            .iter()
            .map(|p| self.respond(p, req.seed))
            .collect())
    }
}

/// Hashed bag-of-words embedder: lowercase alphanumeric tokens are hashed
/// into `dim` buckets and the count vector is L2-normalized. Empty text
/// gives the zero vector.
#[derive(Debug)]
pub struct MockEmbedder {
    id: String,
    dim: usize,
    batches: Mutex<Vec<usize>>,
}

impl MockEmbedder {
    pub fn new(id: &str, dim: usize) -> Self {
        assert!(dim > 0, "mock embedder needs a positive dimension");
        Self {
            id: id.to_string(),
            dim,
            batches: Mutex::new(Vec::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn batch_sizes(&self) -> Vec<usize> {
        self.batches.lock().expect("mock lock").clone()
    }

    pub fn bucket(&self, token: &str) -> usize {
        let digest = Sha256::digest(token.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(bytes) % self.dim as u64) as usize
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            v[self.bucket(&token.to_lowercase())] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingBackend for MockEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> CallResult<Vec<Vec<f32>>> {
        self.batches.lock().expect("mock lock").push(texts.len());
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
