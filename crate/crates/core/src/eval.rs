//! Dataset loading, pipeline variants and accuracy reports.
//!
//! A [`PipelineConfig`] selects one ablation variant: retrieval on or off,
//! options listed in the prompt or not, and shuffle-vote width. Every
//! question is answered independently with seeds derived from the global
//! seed and its id, so parallel and sequential runs give identical reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::abbrev::{detect_abbreviations, AbbrevDict, Detection};
use crate::answer::{fallback_random, parse_option_label, select_by_similarity, AnswerMethod};
use crate::backend::{complete_batch, CompletionBackend, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::prompt::{build_falcon_prompt, build_phi2_prompt, PromptText};
use crate::retrieval::{ChunkIndex, Context, DEFAULT_PER_RETRIEVER_K};
use crate::seed::sha256_hex;
use crate::shuffle::{
    map_back, shuffle_vote, GenerationParams, Permutation, ShuffleContext, ShuffleDiagnostics,
};

pub use crate::prompt::McqQuestion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub rag_enabled: bool,
    /// List options in the prompt (label parsing) or hide them (similarity).
    pub include_options: bool,
    /// Shuffled prompts per question; 0 disables shuffle voting.
    pub shuffle_k: usize,
    pub per_retriever_k: usize,
    pub seed: u64,
    pub max_new_tokens: u32,
    pub temperature: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            rag_enabled: true,
            include_options: true,
            shuffle_k: crate::shuffle::DEFAULT_SHUFFLE_K,
            per_retriever_k: DEFAULT_PER_RETRIEVER_K,
            seed: 0,
            max_new_tokens: 32,
            temperature: 0.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shuffle_k > 0 && !self.include_options {
            return Err(Error::Config(
                "shuffle_k > 0 requires include_options".into(),
            ));
        }
        if self.rag_enabled && self.per_retriever_k == 0 {
            return Err(Error::Config(
                "per_retriever_k must be positive when retrieval is enabled".into(),
            ));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }
}

/// Backends bound to their pipeline roles.
#[derive(Clone, Copy)]
pub struct Backends<'a> {
    pub generation: &'a dyn CompletionBackend,
    pub retrieval: &'a [&'a dyn EmbeddingBackend],
    pub answer_embedding: Option<&'a dyn EmbeddingBackend>,
}

/// Built artifacts the pipeline reads.
#[derive(Clone, Copy, Default)]
pub struct Resources<'a> {
    pub index: Option<&'a ChunkIndex>,
    pub abbrevs: Option<&'a AbbrevDict>,
}

fn answer_label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*option\s*(\d+)").expect("valid regex"))
}

fn option_number(key: &str) -> Option<usize> {
    key.strip_prefix("option ")?.trim().parse().ok()
}

fn parse_entry(id: &str, entry: &Value) -> Result<McqQuestion> {
    let err = |message: String| Error::Question {
        question_id: id.to_string(),
        message,
    };
    let obj = entry
        .as_object()
        .ok_or_else(|| err("entry is not an object".into()))?;
    let text = obj
        .get("question")
        .and_then(Value::as_str)
        .ok_or_else(|| err("missing question text".into()))?;

    let mut numbered: Vec<(usize, String)> = Vec::new();
    for (key, value) in obj {
        if let Some(n) = option_number(key) {
            let text = value
                .as_str()
                .ok_or_else(|| err(format!("{key} is not a string")))?;
            numbered.push((n, text.to_string()));
        }
    }
    numbered.sort_by_key(|(n, _)| *n);
    for (i, (n, _)) in numbered.iter().enumerate() {
        if *n != i + 1 {
            return Err(err(format!(
                "option labels are not contiguous from 1 (found option {n})"
            )));
        }
    }
    let options: Vec<String> = numbered.into_iter().map(|(_, t)| t).collect();

    let gold = match obj.get("answer").and_then(Value::as_str) {
        None => None,
        Some(answer) => {
            let caps = answer_label_regex()
                .captures(answer)
                .ok_or_else(|| err(format!("unparsable answer label {answer:?}")))?;
            let n: usize = caps[1]
                .parse()
                .map_err(|_| err(format!("bad answer label {answer:?}")))?;
            if n == 0 || n > options.len() {
                return Err(err(format!("answer {answer:?} names a missing option")));
            }
            Some(n - 1)
        }
    };
    let q = McqQuestion {
        question_id: id.to_string(),
        text: text.to_string(),
        options,
        gold,
        category: obj
            .get("category")
            .and_then(Value::as_str)
            .unwrap_or("")
            .to_string(),
    };
    q.validate()?;
    Ok(q)
}

/// Parses a `{id: {question, "option 1".., answer, category}}` JSON map,
/// keeping file order.
pub fn parse_dataset(json: &str) -> Result<Vec<McqQuestion>> {
    let value: Value = serde_json::from_str(json).map_err(|e| Error::json("dataset", e))?;
    let map = value.as_object().ok_or_else(|| {
        Error::Invalid("dataset must be a JSON object keyed by question id".into())
    })?;
    map.iter()
        .map(|(id, entry)| parse_entry(id, entry))
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<McqQuestion>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&raw)
}

/// Inverse of [`parse_dataset`].
pub fn dataset_to_json(questions: &[McqQuestion]) -> Value {
    let mut map = serde_json::Map::new();
    for q in questions {
        let mut obj = serde_json::Map::new();
        obj.insert("question".into(), Value::from(q.text.clone()));
        for (i, o) in q.options.iter().enumerate() {
            obj.insert(format!("option {}", i + 1), Value::from(o.clone()));
        }
        if let Some(g) = q.gold {
            obj.insert(
                "answer".into(),
                Value::from(format!("option {}: {}", g + 1, q.options[g])),
            );
        }
        obj.insert("category".into(), Value::from(q.category.clone()));
        map.insert(q.question_id.clone(), Value::Object(obj));
    }
    Value::Object(map)
}

/// Percentage of predictions equal to their gold label.
pub fn accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    if predictions.len() != golds.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p == g)
        .count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: String,
    pub category: String,
    pub gold: Option<usize>,
    pub prediction: usize,
    pub correct: bool,
    pub method: AnswerMethod,
    /// The extraction path failed and the seeded random choice was used.
    pub fallback: bool,
    pub context_ids: Vec<String>,
    pub abbreviations: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shuffle: Option<ShuffleDiagnostics>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub config: PipelineConfig,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub fallbacks: usize,
    pub per_category: BTreeMap<String, CategoryStats>,
    pub records: Vec<QuestionRecord>,
}

fn pct(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

impl EvalReport {
    pub fn from_records(
        config_hash: String,
        config: PipelineConfig,
        records: Vec<QuestionRecord>,
    ) -> Self {
        let mut per_category: BTreeMap<String, CategoryStats> = BTreeMap::new();
        for r in &records {
            let stats = per_category.entry(r.category.clone()).or_default();
            stats.total += 1;
            stats.correct += usize::from(r.correct);
        }
        for stats in per_category.values_mut() {
            stats.accuracy = pct(stats.correct, stats.total);
        }
        let correct = records.iter().filter(|r| r.correct).count();
        Self {
            config_hash,
            config,
            total: records.len(),
            correct,
            accuracy: pct(correct, records.len()),
            fallbacks: records.iter().filter(|r| r.fallback).count(),
            per_category,
            records,
        }
    }

    /// Plain-text summary table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<40} {:>7} {:>7} {:>9}\n",
            "category", "correct", "total", "accuracy"
        );
        for (cat, s) in &self.per_category {
            let name = if cat.is_empty() { "(none)" } else { cat };
            out.push_str(&format!(
                "{:<40} {:>7} {:>7} {:>8.2}%\n",
                name, s.correct, s.total, s.accuracy
            ));
        }
        out.push_str(&format!(
            "{:<40} {:>7} {:>7} {:>8.2}%\n",
            "overall", self.correct, self.total, self.accuracy
        ));
        out
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{error} ({} of {} questions answered before the failure)", partial.total, expected)]
pub struct PipelineFailure {
    pub error: Error,
    pub partial: Box<EvalReport>,
    pub expected: usize,
}

fn config_hash(cfg: &PipelineConfig, backends: &Backends<'_>) -> String {
    let ids = serde_json::json!({
        "config": cfg,
        "generation": backends.generation.id(),
        "retrieval": backends.retrieval.iter().map(|b| b.id()).collect::<Vec<_>>(),
        "answer_embedding": backends.answer_embedding.map(|b| b.id()),
    });
    sha256_hex(ids.to_string().as_bytes())
}

fn params(cfg: &PipelineConfig, backends: &Backends<'_>) -> GenerationParams {
    GenerationParams {
        model: backends.generation.id().to_string(),
        max_new_tokens: cfg.max_new_tokens,
        temperature: cfg.temperature,
        seed: Some(cfg.seed),
    }
}

/// Abbreviation detections and retrieved context for a question.
pub fn gather_evidence(
    cfg: &PipelineConfig,
    q: &McqQuestion,
    retrieval: &[&dyn EmbeddingBackend],
    resources: &Resources<'_>,
) -> Result<(Vec<Detection>, Context)> {
    let empty = AbbrevDict::default();
    let detections = detect_abbreviations(&q.text, resources.abbrevs.unwrap_or(&empty));
    let context = if cfg.rag_enabled {
        let index = resources.index.ok_or_else(|| {
            Error::Config("retrieval is enabled but no index was provided".into())
        })?;
        index.retrieve(&q.text, retrieval, cfg.per_retriever_k)?
    } else {
        Context::default()
    };
    Ok((detections, context))
}

/// The prompt the configured variant would send first for this question.
pub fn render_question_prompt(
    cfg: &PipelineConfig,
    q: &McqQuestion,
    detections: &[Detection],
    context: &Context,
) -> Result<PromptText> {
    if cfg.include_options {
        build_phi2_prompt(
            q,
            &Permutation::identity(q.options.len()),
            detections,
            context,
        )
    } else {
        Ok(build_falcon_prompt(q, detections, context))
    }
}

/// Answers one question under `cfg`.
pub fn answer_question(
    cfg: &PipelineConfig,
    q: &McqQuestion,
    backends: &Backends<'_>,
    resources: &Resources<'_>,
) -> Result<QuestionRecord> {
    q.validate()?;
    let n = q.options.len();
    let (detections, context) = gather_evidence(cfg, q, backends.retrieval, resources)?;
    let params = params(cfg, backends);

    let mut completion = None;
    let mut shuffle = None;
    let (slot, method) = if cfg.include_options && cfg.shuffle_k > 0 {
        let ctx = ShuffleContext {
            backend: backends.generation,
            abbrevs: &detections,
            contexts: &context,
            params: &params,
        };
        let diagnostics = shuffle_vote(q, cfg.shuffle_k, cfg.seed, &ctx)?;
        let winner = diagnostics.tally.as_ref().map(|t| t.winner);
        shuffle = Some(diagnostics);
        (winner, AnswerMethod::ShuffleVote)
    } else if cfg.include_options {
        let identity = Permutation::identity(n);
        let prompt = build_phi2_prompt(q, &identity, &detections, &context)?;
        let out = complete_batch(&params.request(vec![prompt.rendered]), backends.generation)?;
        let slot = parse_option_label(&out[0], n)
            .map(|s| map_back(&identity, s))
            .transpose()?;
        completion = Some(out[0].clone());
        (slot, AnswerMethod::LabelParse)
    } else {
        let embedder = backends.answer_embedding.ok_or_else(|| {
            Error::Config("free-answer mode needs an answer_embedding backend".into())
        })?;
        let prompt = build_falcon_prompt(q, &detections, &context);
        let out = complete_batch(&params.request(vec![prompt.rendered]), backends.generation)?;
        let text = out[0].trim();
        let slot = if text.is_empty() {
            None
        } else {
            Some(select_by_similarity(text, &q.options, embedder)?)
        };
        completion = Some(out[0].clone());
        (slot, AnswerMethod::Similarity)
    };

    let (prediction, method, fallback) = match slot {
        Some(s) => (s, method, false),
        None => (
            fallback_random(n, cfg.seed, &q.question_id),
            AnswerMethod::RandomFallback,
            true,
        ),
    };
    Ok(QuestionRecord {
        question_id: q.question_id.clone(),
        category: q.category.clone(),
        gold: q.gold,
        prediction,
        correct: q.gold == Some(prediction),
        method,
        fallback,
        context_ids: context.entries.iter().map(|e| e.chunk_id.clone()).collect(),
        abbreviations: detections.iter().map(|d| d.token.clone()).collect(),
        completion,
        shuffle,
    })
}

/// Answers every question (in parallel) and aggregates accuracy.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    questions: &[McqQuestion],
    backends: &Backends<'_>,
    resources: &Resources<'_>,
) -> std::result::Result<EvalReport, PipelineFailure> {
    let hash = config_hash(cfg, backends);
    let fail = |error: Error, records: Vec<QuestionRecord>| PipelineFailure {
        error,
        partial: Box::new(EvalReport::from_records(hash.clone(), cfg.clone(), records)),
        expected: questions.len(),
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, Vec::new()));
    }
    if let Some(q) = questions.iter().find(|q| q.gold.is_none()) {
        let e = Error::Question {
            question_id: q.question_id.clone(),
            message: "evaluation needs a gold answer".into(),
        };
        return Err(fail(e, Vec::new()));
    }

    let results: Vec<Result<QuestionRecord>> = questions
        .par_iter()
        .map(|q| answer_question(cfg, q, backends, resources))
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut first_error = None;
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) if first_error.is_none() => first_error = Some(e),
            Err(_) => {}
        }
    }
    match first_error {
        Some(e) => Err(fail(e, records)),
        None => Ok(EvalReport::from_records(hash, cfg.clone(), records)),
    }
}
