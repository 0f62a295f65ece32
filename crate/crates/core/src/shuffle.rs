//! Option batch-shuffle voting.
//!
//! A question is asked `k` times, each time with a different option order
//! drawn without replacement from the `n!` possible orders. Every parsed
//! answer slot is mapped back to its canonical option and the most frequent
//! canonical option wins (ties go to the lowest index). Training data gets
//! one fresh order per question per epoch instead.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::abbrev::Detection;
use crate::answer::parse_option_label;
use crate::backend::{complete_batch, CompletionBackend, CompletionRequest};
use crate::error::{Error, Result};
use crate::prompt::{build_phi2_prompt, McqQuestion};
use crate::retrieval::Context;
use crate::seed::{derive_seed, rng_for};

pub const DEFAULT_SHUFFLE_K: usize = 20;

/// Orders up to this many are sampled by enumerating them all.
const ENUMERATION_LIMIT: u64 = 720;

/// `mapping[j]` is the canonical option displayed at slot `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(mapping: Vec<usize>) -> Result<Self> {
        Self::new(mapping)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.mapping
    }
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Invalid(format!("{mapping:?} is not a permutation")));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    /// Slot at which canonical option `canonical` is displayed.
    pub fn slot_of(&self, canonical: usize) -> Option<usize> {
        self.mapping.iter().position(|&m| m == canonical)
    }

    /// Items in display order.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.mapping.iter().map(|&m| items[m].clone()).collect()
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }
}

/// Canonical option shown at `selected_slot`.
pub fn map_back(perm: &Permutation, selected_slot: usize) -> Result<usize> {
    perm.mapping
        .get(selected_slot)
        .copied()
        .ok_or(Error::SlotOutOfRange {
            slot: selected_slot,
            n: perm.len(),
        })
}

/// `n!`, saturating at `u64::MAX`.
pub fn factorial(n: usize) -> u64 {
    (1..=n as u64)
        .try_fold(1u64, |acc, x| acc.checked_mul(x))
        .unwrap_or(u64::MAX)
}

/// Every permutation of `0..n` in lexicographic order.
pub fn all_permutations(n: usize) -> Vec<Permutation> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![Permutation {
        mapping: current.clone(),
    }];
    // classic next-permutation step
    loop {
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..n)
            .rev()
            .find(|&j| current[j] > current[i - 1])
            .expect("pivot exists");
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(Permutation {
            mapping: current.clone(),
        });
    }
}

/// `min(k, n!)` distinct permutations sampled uniformly without replacement.
/// When `k >= n!` all of them are returned in lexicographic order.
pub fn sample_permutations(n: usize, k: usize, seed: u64) -> Vec<Permutation> {
    let total = factorial(n);
    if k == 0 {
        return Vec::new();
    }
    if total <= ENUMERATION_LIMIT {
        let all = all_permutations(n);
        if k as u64 >= total {
            return all;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        return index::sample(&mut rng, all.len(), k)
            .into_iter()
            .map(|i| all[i].clone())
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let p = Permutation::random(n, &mut rng);
        if seen.insert(p.clone()) {
            out.push(p);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    /// Votes per canonical option.
    pub counts: Vec<usize>,
    /// Prompts issued; at least the number of votes.
    pub k: usize,
    pub winner: usize,
    /// Whether the winner shared the top count with another option.
    pub tie: bool,
}

impl VoteTally {
    pub fn votes(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Most frequent canonical option; ties go to the lowest index.
pub fn majority_vote(votes: &[usize], n: usize) -> Result<VoteTally> {
    if votes.is_empty() {
        return Err(Error::NoParsableAnswers);
    }
    let mut counts = vec![0usize; n];
    for &v in votes {
        *counts
            .get_mut(v)
            .ok_or(Error::SlotOutOfRange { slot: v, n })? += 1;
    }
    let best = *counts.iter().max().expect("n > 0 when votes exist");
    let winner = counts.iter().position(|&c| c == best).expect("max present");
    let tie = counts.iter().filter(|&&c| c == best).count() > 1;
    Ok(VoteTally {
        counts,
        k: votes.len(),
        winner,
        tie,
    })
}

/// Decoding settings shared by every generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub model: String,
    pub max_new_tokens: u32,
    pub temperature: f32,
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            model: String::new(),
            max_new_tokens: 32,
            temperature: 0.0,
            seed: None,
        }
    }
}

impl GenerationParams {
    pub fn request(&self, prompts: Vec<String>) -> CompletionRequest {
        CompletionRequest {
            prompts,
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            seed: self.seed,
            model: self.model.clone(),
        }
    }
}

/// Everything besides the question needed to fan out shuffled prompts.
pub struct ShuffleContext<'a> {
    pub backend: &'a dyn CompletionBackend,
    pub abbrevs: &'a [Detection],
    pub contexts: &'a Context,
    pub params: &'a GenerationParams,
}

/// Audit record of one shuffle-vote run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuffleDiagnostics {
    pub question_id: String,
    pub permutations: Vec<Permutation>,
    pub completions: Vec<String>,
    pub parsed_slots: Vec<Option<usize>>,
    pub votes: Vec<usize>,
    pub tally: Option<VoteTally>,
}

/// Runs the k-prompt batch and tallies; `tally` is `None` when no
/// completion could be parsed.
pub fn shuffle_vote(
    q: &McqQuestion,
    k: usize,
    seed: u64,
    ctx: &ShuffleContext<'_>,
) -> Result<ShuffleDiagnostics> {
    let n = q.options.len();
    if n == 0 {
        return Err(Error::NoOptions);
    }
    let perm_seed = derive_seed(seed, "shuffle", &q.question_id);
    let permutations = sample_permutations(n, k.max(1), perm_seed);
    let prompts = permutations
        .iter()
        .map(|p| build_phi2_prompt(q, p, ctx.abbrevs, ctx.contexts).map(|t| t.rendered))
        .collect::<Result<Vec<_>>>()?;
    let completions = complete_batch(&ctx.params.request(prompts), ctx.backend)?;

    let parsed_slots: Vec<Option<usize>> = completions
        .iter()
        .map(|c| parse_option_label(c, n))
        .collect();
    let votes: Vec<usize> = permutations
        .iter()
        .zip(&parsed_slots)
        .filter_map(|(p, slot)| slot.map(|s| map_back(p, s)))
        .collect::<Result<_>>()?;
    let tally = match majority_vote(&votes, n) {
        Ok(mut t) => {
            t.k = permutations.len();
            Some(t)
        }
        Err(Error::NoParsableAnswers) => None,
        Err(e) => return Err(e),
    };
    Ok(ShuffleDiagnostics {
        question_id: q.question_id.clone(),
        permutations,
        completions,
        parsed_slots,
        votes,
        tally,
    })
}

pub fn answer_with_shuffle(
    q: &McqQuestion,
    k: usize,
    seed: u64,
    ctx: &ShuffleContext<'_>,
) -> Result<VoteTally> {
    shuffle_vote(q, k, seed, ctx)?
        .tally
        .ok_or(Error::NoParsableAnswers)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShuffledQuestion {
    /// Options in training order, gold remapped.
    pub question: McqQuestion,
    pub order: Permutation,
}

/// One permutation per question, drawn from `(seed, epoch, question_id)`.
pub fn epoch_shuffle(questions: &[McqQuestion], epoch: usize, seed: u64) -> Vec<ShuffledQuestion> {
    questions
        .iter()
        .map(|q| {
            let mut rng = rng_for(seed, "epoch", &format!("{epoch}:{}", q.question_id));
            let order = Permutation::random(q.options.len(), &mut rng);
            let question = McqQuestion {
                options: order.apply(&q.options),
                gold: q.gold.and_then(|g| order.slot_of(g)),
                ..q.clone()
            };
            ShuffledQuestion { question, order }
        })
        .collect()
}
