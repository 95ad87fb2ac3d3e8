//! Multi-reference knowledge-grounded corpora: case types, tokenisation,
//! message-tree extraction, the length/similarity filter cascade, synthetic
//! generation and deterministic splitting.

mod filter;
mod io;
mod split;
mod synth;
mod tokenize;
mod tree;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span_model::Span;

pub use filter::{passes_focused_filter, passes_general_filter, FilterRule, FilterThresholds, FilterVerdict};
pub use io::{read_corpus, read_manifest, write_corpus, write_manifest, SplitManifest};
pub use split::{split_corpus, CorpusSplit, SplitRatios};
pub use synth::{synth_corpus, SynthConfig};
pub use tokenize::tokenize;
pub use tree::{extract_cases, MessageTree, TreeNode};

pub type Tokens = Vec<String>;

/// Ground truth recorded by the synthetic generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSpan {
    pub response_index: usize,
    pub sentence_index: usize,
    /// Inclusive token range in the concatenated knowledge.
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseMeta {
    #[serde(default)]
    pub planted_spans: Vec<PlantedSpan>,
    /// Marks a synthetic fixture whose context is a single empty utterance.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_opening: bool,
}

/// One multi-reference example: context, knowledge sentences, responses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueCase {
    pub case_id: String,
    pub context: Vec<Tokens>,
    pub knowledge: Vec<Tokens>,
    pub responses: Vec<Tokens>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<CaseMeta>,
}

impl DialogueCase {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Corpus(format!("case `{}`: {what}", self.case_id)));
        if self.case_id.is_empty() {
            return bad("empty case_id");
        }
        if self.context.is_empty() {
            return bad("no context utterances");
        }
        let empty_opening = self.meta.as_ref().is_some_and(|m| m.empty_opening);
        let context_ok =
            if empty_opening { self.context.len() == 1 && self.context[0].is_empty() } else { self.context.iter().all(|u| !u.is_empty()) };
        if !context_ok {
            return bad("empty context utterance");
        }
        if self.knowledge.is_empty() || self.knowledge.iter().any(Vec::is_empty) {
            return bad("missing or empty knowledge sentence");
        }
        if self.responses.is_empty() || self.responses.iter().any(Vec::is_empty) {
            return bad("missing or empty response");
        }
        if let Some(meta) = &self.meta {
            let bounds = self.sentence_bounds();
            for p in &meta.planted_spans {
                let Some(&(lo, hi)) = bounds.get(p.sentence_index) else {
                    return bad("planted span names a missing sentence");
                };
                if p.response_index >= self.responses.len() || p.start > p.end || p.start < lo || p.end >= hi {
                    return bad("planted span outside its sentence");
                }
            }
        }
        Ok(())
    }

    /// Concatenated knowledge `K`.
    pub fn knowledge_tokens(&self) -> Tokens {
        self.knowledge.concat()
    }

    pub fn knowledge_len(&self) -> usize {
        self.knowledge.iter().map(Vec::len).sum()
    }

    /// Half-open `[start, end)` token range of each sentence within `K`.
    pub fn sentence_bounds(&self) -> Vec<(usize, usize)> {
        let mut offset = 0;
        self.knowledge
            .iter()
            .map(|s| {
                let b = (offset, offset + s.len());
                offset += s.len();
                b
            })
            .collect()
    }

    /// Sentence containing knowledge token `pos`.
    pub fn sentence_of(&self, pos: usize) -> Option<usize> {
        self.sentence_bounds().iter().position(|&(lo, hi)| pos >= lo && pos < hi)
    }

    /// The whole sentence `idx` as a span of `K`.
    pub fn sentence_span(&self, idx: usize) -> Option<Span> {
        self.sentence_bounds().get(idx).map(|&(lo, hi)| Span { start: lo, end: hi - 1 })
    }

    /// Context utterances flattened into one token sequence.
    pub fn context_tokens(&self) -> Tokens {
        self.context.concat()
    }
}

pub fn check_unique_ids(cases: &[DialogueCase]) -> Result<()> {
    let mut seen = HashSet::new();
    for c in cases {
        if !seen.insert(c.case_id.as_str()) {
            return Err(Error::Corpus(format!("duplicate case_id `{}`", c.case_id)));
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn toks(s: &str) -> Tokens {
        s.split_whitespace().map(str::to_string).collect()
    }

    /// `n` distinct filler tokens with a prefix.
    pub fn filler(prefix: &str, n: usize) -> Tokens {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    pub fn case(id: &str, knowledge: Vec<Tokens>, responses: Vec<Tokens>) -> DialogueCase {
        DialogueCase { case_id: id.into(), context: vec![toks("hello there")], knowledge, responses, meta: None }
    }
}
