//! Prompt templates.
//!
//! Two layouts are supported. The option-listing layout (`phi2_mcq`) asks
//! the model to pick a numbered option after an `Output :` cue. The free
//! answer layout (`falcon_free`) never shows the options; the answer is
//! mapped back to an option by embedding similarity. Both repeat the
//! question before and after the retrieved contexts.

use serde::{Deserialize, Serialize};

use crate::abbrev::Detection;
use crate::error::{Error, Result};
use crate::retrieval::Context;
use crate::shuffle::Permutation;

pub const ANSWER_CUE: &str = "Output :";
pub const CONTEXT_HEADER: &str = "Considering the following retrieved contexts";
pub const ABBREV_HEADER: &str = "Abbreviations:";
pub const EXPERT_PREAMBLE: &str =
    "Youre a Telecommunication standards expert. Please answer the question first consider the given context for the answer.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqQuestion {
    pub question_id: String,
    pub text: String,
    pub options: Vec<String>,
    /// Index of the correct option, when known.
    pub gold: Option<usize>,
    pub category: String,
}

impl McqQuestion {
    pub const MIN_OPTIONS: usize = 2;
    pub const MAX_OPTIONS: usize = 5;

    pub fn validate(&self) -> Result<()> {
        let n = self.options.len();
        if !(Self::MIN_OPTIONS..=Self::MAX_OPTIONS).contains(&n) {
            return Err(Error::Question {
                question_id: self.question_id.clone(),
                message: format!("expected 2 to 5 options, found {n}"),
            });
        }
        if let Some(g) = self.gold {
            if g >= n {
                return Err(Error::Question {
                    question_id: self.question_id.clone(),
                    message: format!("gold index {g} out of range"),
                });
            }
        }
        Ok(())
    }

    pub fn gold_text(&self) -> Option<&str> {
        self.gold.map(|g| self.options[g].as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Phi2Mcq,
    FalconFree,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub rendered: String,
    pub style: PromptStyle,
    /// `option_order[j]` is the canonical option shown at slot `j`.
    pub option_order: Vec<usize>,
}

/// `token: expansion` lines for expanded detections, in input order.
pub fn render_abbrev_block(detections: &[Detection]) -> String {
    detections
        .iter()
        .filter_map(|d| d.expansion.as_ref().map(|e| format!("{}: {e}", d.token)))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Shared middle part: abbreviations (if any), context header, contexts.
/// Trailing whitespace of a chunk is dropped so blocks stay one blank line apart.
fn push_evidence(blocks: &mut Vec<String>, abbrevs: &[Detection], contexts: &Context) {
    let abbrev_lines = render_abbrev_block(abbrevs);
    if !abbrev_lines.is_empty() {
        blocks.push(format!("{ABBREV_HEADER}\n{abbrev_lines}"));
    }
    blocks.push(CONTEXT_HEADER.to_string());
    for (i, text) in contexts.texts().enumerate() {
        blocks.push(format!("context {}: {}", i + 1, text.trim_end()));
    }
}

pub fn build_phi2_prompt(
    q: &McqQuestion,
    order: &Permutation,
    abbrevs: &[Detection],
    contexts: &Context,
) -> Result<PromptText> {
    if q.options.is_empty() {
        return Err(Error::NoOptions);
    }
    if order.len() != q.options.len() {
        return Err(Error::Invalid(format!(
            "option order has {} slots for {} options",
            order.len(),
            q.options.len()
        )));
    }
    let mut blocks = vec![format!("Instruct: {}", q.text)];
    push_evidence(&mut blocks, abbrevs, contexts);
    blocks.push(q.text.clone());
    blocks.push(
        order
            .mapping()
            .iter()
            .enumerate()
            .map(|(slot, &canonical)| format!("option {}: {}", slot + 1, q.options[canonical]))
            .collect::<Vec<_>>()
            .join("\n"),
    );
    blocks.push(ANSWER_CUE.to_string());
    Ok(PromptText {
        rendered: blocks.join("\n\n"),
        style: PromptStyle::Phi2Mcq,
        option_order: order.mapping().to_vec(),
    })
}

pub fn build_falcon_prompt(
    q: &McqQuestion,
    abbrevs: &[Detection],
    contexts: &Context,
) -> PromptText {
    let mut blocks = vec![EXPERT_PREAMBLE.to_string(), q.text.clone()];
    push_evidence(&mut blocks, abbrevs, contexts);
    blocks.push(q.text.clone());
    PromptText {
        rendered: blocks.join("\n\n"),
        style: PromptStyle::FalconFree,
        option_order: (0..q.options.len()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::ContextEntry;

    pub(crate) fn question() -> McqQuestion {
        McqQuestion {
            question_id: "q1".into(),
            text: "Which entity pages the UE in RRC_IDLE?".into(),
            options: vec!["AMF".into(), "gNB".into(), "SMF".into(), "UPF".into()],
            gold: Some(0),
            category: "Standards specifications".into(),
        }
    }

    fn det(token: &str, exp: Option<&str>) -> Detection {
        Detection {
            token: token.into(),
            expansion: exp.map(str::to_string),
            span: (0, 0),
        }
    }

    fn ctx(n: usize) -> Context {
        Context {
            entries: (0..n)
                .map(|i| ContextEntry {
                    chunk_id: format!("c{i}"),
                    text: format!("5.3 Paging\nbody {i}"),
                    retriever_id: "m".into(),
                    score: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn abbrev_block_lines() {
        assert_eq!(
            render_abbrev_block(&[det("UE", Some("User Equipment"))]),
            "UE: User Equipment"
        );
        assert_eq!(render_abbrev_block(&[det("NR", None), det("XX", None)]), "");
        let three = [
            det("A1", Some("a")),
            det("B2", None),
            det("C3", Some("c")),
            det("D4", Some("d")),
        ];
        assert_eq!(render_abbrev_block(&three), "A1: a\nC3: c\nD4: d");
    }

    #[test]
    fn phi2_layout() {
        let q = question();
        let p = build_phi2_prompt(
            &q,
            &Permutation::identity(4),
            &[det("UE", Some("User Equipment"))],
            &ctx(2),
        )
        .unwrap();
        assert_eq!(p.rendered.matches(&q.text).count(), 2);
        assert!(p.rendered.starts_with("Instruct: Which entity"));
        assert!(p.rendered.ends_with("option 4: UPF\n\nOutput :"));
        assert!(p
            .rendered
            .contains("Abbreviations:\nUE: User Equipment\n\nConsidering"));
        assert!(p.rendered.contains("context 2: 5.3 Paging\nbody 1"));
    }

    #[test]
    fn phi2_without_detections_omits_block() {
        let p = build_phi2_prompt(
            &question(),
            &Permutation::identity(4),
            &[det("NR", None)],
            &ctx(1),
        )
        .unwrap();
        assert!(!p.rendered.contains(ABBREV_HEADER));
    }

    #[test]
    fn shuffled_order_only_changes_option_block() {
        let q = question();
        let a = build_phi2_prompt(&q, &Permutation::identity(4), &[], &ctx(2)).unwrap();
        let b = build_phi2_prompt(
            &q,
            &Permutation::new(vec![2, 0, 3, 1]).unwrap(),
            &[],
            &ctx(2),
        )
        .unwrap();
        let head = |s: &str| s[..s.find("option 1:").unwrap()].to_string();
        let tail = |s: &str| s[s.rfind("\n\n").unwrap()..].to_string();
        assert_eq!(head(&a.rendered), head(&b.rendered));
        assert_eq!(tail(&a.rendered), tail(&b.rendered));
        assert_ne!(a.rendered, b.rendered);
        assert!(b
            .rendered
            .contains("option 1: SMF\noption 2: AMF\noption 3: UPF\noption 4: gNB"));
        assert_eq!(b.option_order, [2, 0, 3, 1]);
    }

    #[test]
    fn phi2_rejects_bad_order_and_empty_options() {
        let mut q = question();
        assert!(build_phi2_prompt(&q, &Permutation::identity(3), &[], &ctx(0)).is_err());
        q.options.clear();
        assert!(matches!(
            build_phi2_prompt(&q, &Permutation::identity(0), &[], &ctx(0)),
            Err(Error::NoOptions)
        ));
    }

    #[test]
    fn falcon_hides_options() {
        let q = question();
        let p = build_falcon_prompt(&q, &[det("UE", Some("User Equipment"))], &ctx(2));
        for o in &q.options {
            assert!(!p.rendered.contains(o.as_str()), "{o}");
        }
        assert!(!p.rendered.contains(ANSWER_CUE));
        assert_eq!(p.rendered.matches(&q.text).count(), 2);
        assert_eq!(
            p,
            build_falcon_prompt(&q, &[det("UE", Some("User Equipment"))], &ctx(2))
        );
    }

    #[test]
    fn chunk_trailing_newlines_trimmed() {
        let mut c = ctx(2);
        c.entries[0].text.push_str("\n\n");
        let p = build_phi2_prompt(&question(), &Permutation::identity(4), &[], &c).unwrap();
        assert!(p.rendered.contains("body 0\n\ncontext 2:"));
        assert!(!p.rendered.contains("\n\n\n"));
    }

    #[test]
    fn falcon_zero_contexts_keeps_header() {
        let p = build_falcon_prompt(&question(), &[], &Context::default());
        assert!(p.rendered.contains(CONTEXT_HEADER));
        assert!(!p.rendered.contains("context 1:"));
    }
}
