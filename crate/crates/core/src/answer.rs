//! Turning a model completion into an option choice.

use std::sync::OnceLock;

use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{embed_batch, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMethod {
    LabelParse,
    ShuffleVote,
    Similarity,
    RandomFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub slot: Option<usize>,
    pub method: AnswerMethod,
    pub raw: String,
}

fn label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\boption\s*(\d+)|\((\d+)\)|\A\s*(\d+)\b").expect("valid label regex")
    })
}

/// First `option <d>`, `(<d>)` or leading bare digit with `1 <= d <= n`,
/// as a 0-based slot.
pub fn parse_option_label(completion: &str, n: usize) -> Option<usize> {
    label_regex().captures_iter(completion).find_map(|caps| {
        let digits = caps
            .get(1)
            .or_else(|| caps.get(2))
            .or_else(|| caps.get(3))?;
        let d: usize = digits.as_str().parse().ok()?;
        (1..=n).contains(&d).then(|| d - 1)
    })
}

/// Cosine similarity; zero-magnitude vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Index of the highest score; earlier index wins ties.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Option whose embedding is most cosine-similar to the free-text answer.
pub fn select_by_similarity(
    free_text: &str,
    options: &[String],
    backend: &dyn EmbeddingBackend,
) -> Result<usize> {
    if options.is_empty() {
        return Err(Error::NoOptions);
    }
    let mut texts = Vec::with_capacity(options.len() + 1);
    texts.push(free_text.to_string());
    texts.extend(options.iter().cloned());
    let vectors = embed_batch(&texts, backend)?;
    let scores: Vec<f64> = vectors[1..]
        .iter()
        .map(|v| cosine(&vectors[0], v))
        .collect();
    Ok(argmax(&scores).expect("options non-empty"))
}

/// Uniform slot, fixed by `(seed, question_id)`.
pub fn fallback_random(n: usize, seed: u64, question_id: &str) -> usize {
    assert!(n >= 1, "fallback needs at least one option");
    rng_for(seed, "fallback", question_id).random_range(0..n)
}
