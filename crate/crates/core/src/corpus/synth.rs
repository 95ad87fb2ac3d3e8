//! Synthetic multi-reference corpora with planted groundings.
//!
//! Each response copies a contiguous stretch of one knowledge sentence and
//! wraps it in carrier text, so the grounding span of every response is known.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaseMeta, DialogueCase, PlantedSpan, Tokens};
use crate::error::{Error, Result};

const OPENERS: &[&[&str]] =
    &[&["i", "think"], &["did", "you", "know"], &["apparently"], &["well", ","], &["fun", "fact", ":"], &["i", "read", "that"]];

const CLOSERS: &[&[&str]] = &[&["."], &["!"], &["is", "wild", "."], &["right", "?"], &["indeed", "."]];

const QUESTION: &[&str] = &["what", "about"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub cases: usize,
    /// Number of distinct content words in knowledge text.
    pub vocab_size: usize,
    pub seed: u64,
    pub min_responses: usize,
    pub max_responses: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub min_span_len: usize,
    pub max_span_len: usize,
    /// Probability that all responses of a case ground in one sentence.
    pub focus_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cases: 200,
            vocab_size: 200,
            seed: 0,
            min_responses: 2,
            max_responses: 5,
            min_sentences: 3,
            max_sentences: 8,
            min_sentence_len: 16,
            max_sentence_len: 20,
            min_span_len: 3,
            max_span_len: 6,
            focus_prob: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.vocab_size < 20 {
            return fail("vocab_size must be at least 20");
        }
        if self.cases == 0 {
            return fail("cases must be at least 1");
        }
        if self.min_responses < 2 || self.min_responses > self.max_responses {
            return fail("response count range must satisfy 2 <= min <= max");
        }
        if self.min_sentences < 3 || self.min_sentences > self.max_sentences {
            return fail("sentence count range must satisfy 3 <= min <= max");
        }
        if self.min_sentence_len <= 15 || self.min_sentence_len > self.max_sentence_len {
            return fail("sentence length range must satisfy 15 < min <= max");
        }
        if self.min_span_len < 3 || self.min_span_len > self.max_span_len || self.max_span_len > self.min_sentence_len {
            return fail("span length range must satisfy 3 <= min <= max <= min_sentence_len");
        }
        if !(0.0..=1.0).contains(&self.focus_prob) {
            return fail("focus_prob must lie in [0, 1]");
        }
        Ok(())
    }
}

fn words(parts: &[&str]) -> Tokens {
    parts.iter().map(|s| s.to_string()).collect()
}

pub fn synth_corpus(config: &SynthConfig) -> Result<Vec<DialogueCase>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let vocab: Vec<String> = (0..config.vocab_size).map(|i| format!("k{i}")).collect();
    let mut cases = Vec::with_capacity(config.cases);
    for idx in 0..config.cases {
        let m = rng.gen_range(config.min_sentences..=config.max_sentences);
        let knowledge: Vec<Tokens> = (0..m)
            .map(|_| {
                let len = rng.gen_range(config.min_sentence_len..=config.max_sentence_len);
                (0..len).map(|_| vocab.choose(&mut rng).unwrap().clone()).collect()
            })
            .collect();
        let mut offsets = Vec::with_capacity(m);
        let mut acc = 0;
        for s in &knowledge {
            offsets.push(acc);
            acc += s.len();
        }

        let topic = rng.gen_range(0..m);
        let mut opening = words(QUESTION);
        let cue_len = 3.min(knowledge[topic].len());
        let cue_start = rng.gen_range(0..=knowledge[topic].len() - cue_len);
        opening.extend_from_slice(&knowledge[topic][cue_start..cue_start + cue_len]);
        opening.push("?".into());

        let n = rng.gen_range(config.min_responses..=config.max_responses);
        let focused = rng.gen_bool(config.focus_prob);
        let shared_sentence = rng.gen_range(0..m);
        let mut responses = Vec::with_capacity(n);
        let mut planted = Vec::with_capacity(n);
        for r in 0..n {
            let sent = if focused { shared_sentence } else { rng.gen_range(0..m) };
            let sentence = &knowledge[sent];
            let span_len = rng.gen_range(config.min_span_len..=config.max_span_len).min(sentence.len());
            let local = rng.gen_range(0..=sentence.len() - span_len);
            let mut resp = words(OPENERS.choose(&mut rng).unwrap());
            resp.extend_from_slice(&sentence[local..local + span_len]);
            resp.extend(words(CLOSERS.choose(&mut rng).unwrap()));
            while resp.len() < 6 {
                resp.insert(0, "so".into());
            }
            responses.push(resp);
            planted.push(PlantedSpan {
                response_index: r,
                sentence_index: sent,
                start: offsets[sent] + local,
                end: offsets[sent] + local + span_len - 1,
            });
        }
        cases.push(DialogueCase {
            case_id: format!("synth-{}-{idx:05}", config.seed),
            context: vec![opening],
            knowledge,
            responses,
            meta: Some(CaseMeta { planted_spans: planted, empty_opening: false }),
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::super::passes_general_filter;
    use super::*;

    fn small(seed: u64, cases: usize) -> SynthConfig {
        SynthConfig { cases, seed, ..Default::default() }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(synth_corpus(&small(4, 5)).unwrap(), synth_corpus(&small(4, 5)).unwrap());
        assert_ne!(synth_corpus(&small(4, 5)).unwrap(), synth_corpus(&small(5, 5)).unwrap());
    }

    #[test]
    fn generated_cases_pass_general_filter() {
        let cases = synth_corpus(&small(1, 10)).unwrap();
        assert_eq!(cases.len(), 10);
        for c in &cases {
            assert!(passes_general_filter(c).passed, "{}", c.case_id);
            assert!((2..=5).contains(&c.responses.len()));
            assert!((3..=8).contains(&c.knowledge.len()));
        }
    }

    #[test]
    fn planted_spans_lie_in_their_sentence() {
        for c in synth_corpus(&small(2, 50)).unwrap() {
            c.validate().unwrap();
            let k = c.knowledge_tokens();
            let bounds = c.sentence_bounds();
            for p in &c.meta.as_ref().unwrap().planted_spans {
                let (lo, hi) = bounds[p.sentence_index];
                assert!(p.start >= lo && p.end < hi);
                let copied = &k[p.start..=p.end];
                let resp = &c.responses[p.response_index];
                assert!(resp.windows(copied.len()).any(|w| w == copied));
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(synth_corpus(&SynthConfig { vocab_size: 19, ..Default::default() }).is_err());
        assert!(synth_corpus(&SynthConfig { cases: 0, ..Default::default() }).is_err());
        assert!(synth_corpus(&SynthConfig { min_responses: 1, ..Default::default() }).is_err());
        assert!(synth_corpus(&SynthConfig { min_sentence_len: 15, ..Default::default() }).is_err());
    }
}
