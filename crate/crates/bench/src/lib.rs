//! Shared fixtures for the criterion benches in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdqa_core::McqQuestion;

const WORDS: &[&str] = &[
    "paging",
    "bearer",
    "handover",
    "cell",
    "idle",
    "session",
    "anchor",
    "timer",
    "report",
    "measurement",
    "carrier",
    "beam",
    "slot",
    "frame",
    "uplink",
    "downlink",
    "grant",
    "policy",
    "charging",
    "registration",
];

/// `n` pseudo-random rows of dimension `dim`.
pub fn random_rows(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

/// `n` texts of `words` words drawn from a small technical vocabulary.
pub fn random_texts(n: usize, words: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..words)
                .map(|_| WORDS[rng.random_range(0..WORDS.len())])
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Four-option questions tagged `[bNNNN]` with gold cycling over slots.
pub fn questions(n: usize) -> Vec<McqQuestion> {
    (0..n)
        .map(|i| McqQuestion {
            question_id: format!("b{i:04}"),
            text: format!("[b{i:04}] which procedure handles paging in idle mode?"),
            options: (0..4)
                .map(|j| format!("procedure {j} of b{i:04}"))
                .collect(),
            gold: Some(i % 4),
            category: "bench".into(),
        })
        .collect()
}
