//! Question-masked cross-entropy and fine-tuning record emission.
//!
//! For a sequence of `T` tokens whose first `Q` tokens are the prompt, the
//! mask is `m_t = 0` for `t <= Q` and `1` afterwards, and the loss is
//! `-sum_t m_t * ln p_t(y_t)`. The primitives here compute the plain sum;
//! emitted manifests recommend that trainers divide by the number of
//! unmasked tokens.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abbrev::Detection;
use crate::error::{Error, Result};
use crate::prompt::{build_phi2_prompt, McqQuestion, ANSWER_CUE};
use crate::retrieval::Context;
use crate::shuffle::{epoch_shuffle, Permutation};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVector {
    pub m: Vec<u8>,
}

impl MaskVector {
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Ones where this mask has zeros.
    pub fn complement(&self) -> Self {
        Self {
            m: self.m.iter().map(|&x| 1 - x).collect(),
        }
    }

    pub fn ones(&self) -> usize {
        self.m.iter().filter(|&&x| x == 1).count()
    }
}

/// Zeros for the `q` prompt positions, ones for the remaining `t - q`.
pub fn mask_vector(t: usize, q: usize) -> Result<MaskVector> {
    if q > t {
        return Err(Error::BoundaryOutOfRange {
            boundary: q,
            len: t,
        });
    }
    let mut m = vec![0u8; q];
    m.resize(t, 1);
    Ok(MaskVector { m })
}

/// Per-position predicted distributions and the true next tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    probs: Vec<Vec<f64>>,
    targets: Vec<usize>,
}

impl PredictionTable {
    pub fn new(probs: Vec<Vec<f64>>, targets: Vec<usize>) -> Result<Self> {
        if probs.len() != targets.len() {
            return Err(Error::PredictionTable(format!(
                "{} rows but {} targets",
                probs.len(),
                targets.len()
            )));
        }
        let vocab = probs.first().map_or(0, Vec::len);
        for (t, (row, &target)) in probs.iter().zip(&targets).enumerate() {
            if row.len() != vocab {
                return Err(Error::PredictionTable(format!(
                    "row {t} has {} entries, expected {vocab}",
                    row.len()
                )));
            }
            if target >= vocab {
                return Err(Error::PredictionTable(format!(
                    "target {target} at row {t} outside vocabulary"
                )));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::PredictionTable(format!(
                    "row {t} has a probability outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::PredictionTable(format!("row {t} sums to {sum}")));
            }
        }
        Ok(Self { probs, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    /// Probability assigned to the true token at position `t` (0-based).
    pub fn true_prob(&self, t: usize) -> f64 {
        self.probs[t][self.targets[t]]
    }
}

pub fn masked_cross_entropy(preds: &PredictionTable, mask: &MaskVector) -> Result<f64> {
    if mask.len() != preds.len() {
        return Err(Error::PredictionTable(format!(
            "mask length {} does not match {} positions",
            mask.len(),
            preds.len()
        )));
    }
    let mut loss = 0.0;
    for (t, &m) in mask.m.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let p = preds.true_prob(t);
        if p <= 0.0 {
            return Err(Error::ZeroProbability { position: t });
        }
        loss -= p.ln();
    }
    Ok(loss)
}

pub fn full_cross_entropy(preds: &PredictionTable) -> Result<f64> {
    masked_cross_entropy(preds, &mask_vector(preds.len(), 0)?)
}

/// Loss restricted to the `q` prompt positions: the part the masked
/// objective drops.
pub fn prompt_cross_entropy(preds: &PredictionTable, q: usize) -> Result<f64> {
    masked_cross_entropy(preds, &mask_vector(preds.len(), q)?.complement())
}

/// Number of prompt tokens: the end of the first occurrence of `cue`.
pub fn find_answer_boundary<T: PartialEq>(tokens: &[T], cue: &[T]) -> Result<usize> {
    if cue.is_empty() {
        return Err(Error::Invalid("answer cue must be non-empty".into()));
    }
    tokens
        .windows(cue.len())
        .position(|w| w == cue)
        .map(|start| start + cue.len())
        .ok_or(Error::CueNotFound)
}

/// External tokenizer identity used to express record boundaries.
pub trait Tokenizer: Send + Sync {
    fn id(&self) -> &str;
    fn encode(&self, text: &str) -> Vec<u32>;
}

/// One token per UTF-8 byte.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn id(&self) -> &str {
        "utf8-bytes"
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }
}

/// Adapter hyperparameters recorded alongside emitted training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub lora_dropout: f64,
    pub adapter_targets: Vec<String>,
    pub quantized: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lora_rank: 64,
            lora_alpha: 16,
            lora_dropout: 0.05,
            adapter_targets: ["query", "key", "value", "feed_forward"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            quantized: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub question_id: String,
    pub epoch: usize,
    pub prompt: String,
    pub answer: String,
    /// Prompt length in tokens of `tokenizer_id`; loss covers tokens after it.
    pub boundary: usize,
    pub option_order: Permutation,
    pub tokenizer_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossDeclaration {
    pub objective: String,
    pub primitive_reduction: String,
    pub recommended_normalization: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub tokenizer_id: String,
    pub epochs: usize,
    pub seed: u64,
    pub questions: usize,
    pub records: usize,
    pub answer_cue: String,
    pub loss: LossDeclaration,
    pub training_config: TrainingConfig,
}

impl TrainingManifest {
    pub fn new(
        records: &[TrainingRecord],
        questions: usize,
        epochs: usize,
        seed: u64,
        tokenizer: &dyn Tokenizer,
        training_config: TrainingConfig,
    ) -> Self {
        Self {
            tokenizer_id: tokenizer.id().to_string(),
            epochs,
            seed,
            questions,
            records: records.len(),
            answer_cue: ANSWER_CUE.to_string(),
            loss: LossDeclaration {
                objective: "question_masked_cross_entropy".into(),
                primitive_reduction: "sum".into(),
                recommended_normalization: "mean_over_unmasked_tokens".into(),
            },
            training_config,
        }
    }
}

/// Abbreviations and retrieved context shown with a question.
pub type Evidence = (Vec<Detection>, Context);

/// Records for every question in every epoch, options reshuffled per epoch.
/// `evidence` supplies the abbreviations and context for each question.
pub fn emit_training_set<F>(
    questions: &[McqQuestion],
    evidence: F,
    epochs: usize,
    seed: u64,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<TrainingRecord>>
where
    F: Fn(&McqQuestion) -> Result<Evidence> + Sync,
{
    for q in questions {
        if q.gold.is_none() {
            return Err(Error::Question {
                question_id: q.question_id.clone(),
                message: "missing gold answer".into(),
            });
        }
        q.validate()?;
    }
    let evidence: Vec<Evidence> = questions.par_iter().map(&evidence).collect::<Result<_>>()?;
    let cue = tokenizer.encode(ANSWER_CUE);

    let mut records = Vec::with_capacity(questions.len() * epochs);
    for epoch in 0..epochs {
        let shuffled = epoch_shuffle(questions, epoch, seed);
        let batch: Vec<TrainingRecord> = shuffled
            .par_iter()
            .zip(&evidence)
            .map(|(s, (abbrevs, context))| {
                let q = &s.question;
                let identity = Permutation::identity(q.options.len());
                let prompt = build_phi2_prompt(q, &identity, abbrevs, context)?.rendered;
                let gold = q.gold.expect("checked above");
                let answer = format!(" option {}: {}", gold + 1, q.options[gold]);
                let tokens = tokenizer.encode(&format!("{prompt}{answer}"));
                let boundary = find_answer_boundary(&tokens, &cue)?;
                if boundary != tokenizer.encode(&prompt).len() {
                    return Err(Error::Question {
                        question_id: q.question_id.clone(),
                        message: "answer cue occurs before the end of the prompt".into(),
                    });
                }
                Ok(TrainingRecord {
                    question_id: q.question_id.clone(),
                    epoch,
                    prompt,
                    answer,
                    boundary,
                    option_order: s.order.clone(),
                    tokenizer_id: tokenizer.id().to_string(),
                })
            })
            .collect::<Result<_>>()?;
        records.extend(batch);
    }
    Ok(records)
}

pub fn write_training_set(path: &Path, records: &[TrainingRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::json("training record", e))?;
        buf.write_all(b"\n").expect("write to vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
