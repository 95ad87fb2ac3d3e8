use serde::{Deserialize, Serialize};

use super::DialogueCase;
use crate::error::{Error, Result};
use crate::span_model::unigram_f1;

/// Cascade rules, named by their position in the collection pipeline. The
/// paragraph-tag rule (2) applies to web extraction and has no counterpart
/// here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FilterRule {
    #[serde(rename = "rule-1")]
    ResponseLength,
    #[serde(rename = "rule-3")]
    KnowledgeLength,
    #[serde(rename = "rule-4")]
    Similarity,
}

impl std::fmt::Display for FilterRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterRule::ResponseLength => "rule-1",
            FilterRule::KnowledgeLength => "rule-3",
            FilterRule::Similarity => "rule-4",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    /// Responses need at least this many tokens.
    pub min_response_tokens: usize,
    /// Knowledge sentences need strictly more than this many tokens.
    pub knowledge_tokens_over: usize,
    pub min_similarity: f64,
    pub min_responses: usize,
    pub min_sentences: usize,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self { min_response_tokens: 6, knowledge_tokens_over: 15, min_similarity: 0.1, min_responses: 2, min_sentences: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub passed: bool,
    pub rejection: Option<FilterRule>,
}

impl FilterVerdict {
    fn pass() -> Self {
        Self { passed: true, rejection: None }
    }

    fn reject(rule: FilterRule) -> Self {
        Self { passed: false, rejection: Some(rule) }
    }
}

pub fn passes_general_filter(case: &DialogueCase) -> FilterVerdict {
    general_filter_with(case, &FilterThresholds::default())
}

pub(crate) fn general_filter_with(case: &DialogueCase, t: &FilterThresholds) -> FilterVerdict {
    if case.responses.iter().any(|r| r.len() < t.min_response_tokens) {
        return FilterVerdict::reject(FilterRule::ResponseLength);
    }
    if case.knowledge.iter().any(|k| k.len() <= t.knowledge_tokens_over) {
        return FilterVerdict::reject(FilterRule::KnowledgeLength);
    }
    if case.responses.len() < t.min_responses || case.knowledge.len() < t.min_sentences {
        return FilterVerdict::reject(FilterRule::Similarity);
    }
    let best = case.responses.iter().flat_map(|r| case.knowledge.iter().map(move |k| unigram_f1(r, k))).fold(0.0, f64::max);
    if best < t.min_similarity {
        return FilterVerdict::reject(FilterRule::Similarity);
    }
    FilterVerdict::pass()
}

/// Index of the most similar knowledge sentence; ties go to the lowest index.
pub(crate) fn most_similar_sentence(case: &DialogueCase, response: &[String]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (j, k) in case.knowledge.iter().enumerate() {
        let f = unigram_f1(response, k);
        if f > best.0 {
            best = (f, j);
        }
    }
    best.1
}

/// True iff every response is most similar to the same knowledge sentence.
/// Only defined for cases that pass the general filter.
pub fn passes_focused_filter(case: &DialogueCase) -> Result<bool> {
    if let Some(rule) = passes_general_filter(case).rejection {
        return Err(Error::Precondition(format!("focused filter applied to case `{}` which fails {rule}", case.case_id)));
    }
    let mut targets = case.responses.iter().map(|r| most_similar_sentence(case, r));
    let first = targets.next().expect("validated case has responses");
    Ok(targets.all(|j| j == first))
}
