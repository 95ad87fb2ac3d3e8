//! Repeated response generation from the prior reader.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DialogueCase;
use crate::error::{Error, Result};
use crate::metrics::{CaseGenerations, GenerationLog, Grounding, Repetition};
use crate::neural::{DecodeConfig, ModelParams};
use crate::span_model::{sample_span, softmax_distribution, Span, SpanDistribution};
use crate::training::EncodedCase;

/// How the grounding of each repetition is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingMode {
    /// A span drawn from the prior joint.
    Span,
    /// The whole knowledge sentence containing a start position drawn from
    /// the prior start marginal.
    Sentence,
}

impl FromStr for GroundingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "span" => Ok(Self::Span),
            "sentence" => Ok(Self::Sentence),
            other => Err(Error::Config(format!("mode: expected span or sentence, got {other:?}"))),
        }
    }
}

impl fmt::Display for GroundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Span => "span",
            Self::Sentence => "sentence",
        })
    }
}

fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn generate_case(
    model: &ModelParams,
    case: &EncodedCase,
    mode: GroundingMode,
    repetitions: usize,
    decode: &DecodeConfig,
    rng: &mut impl Rng,
) -> Result<CaseGenerations> {
    let fail = |e: Error| Error::Decode { case_id: case.case_id.clone(), reason: e.to_string() };
    let prior = model.prior_read_ids(&case.context, &case.knowledge).map_err(fail)?;
    let mut reps = Vec::with_capacity(repetitions);
    match mode {
        GroundingMode::Span => {
            let dist = SpanDistribution::prior_from_logits(&prior.start_logits, &prior.end_logits).map_err(fail)?;
            for _ in 0..repetitions {
                let span = sample_span(&dist.joint, rng).map_err(fail)?;
                let ids = model.generator_decode_ids(&case.context, case.span_tokens(span), decode).map_err(fail)?;
                reps.push(Repetition { grounding: Grounding::Span { start: span.start, end: span.end }, tokens: model.vocab.decode(&ids) });
            }
        }
        GroundingMode::Sentence => {
            let starts = softmax_distribution(&prior.start_logits).map_err(fail)?;
            for _ in 0..repetitions {
                let idx = case.sentence_of(draw(&starts, rng));
                let (lo, hi) = case.sentence_bounds[idx];
                let span = Span { start: lo, end: hi - 1 };
                let ids = model.generator_decode_ids(&case.context, case.span_tokens(span), decode).map_err(fail)?;
                reps.push(Repetition { grounding: Grounding::Sentence { sentence_index: idx }, tokens: model.vocab.decode(&ids) });
            }
        }
    }
    Ok(CaseGenerations { case_id: case.case_id.clone(), repetitions: reps })
}

/// `repetitions` generations for every case, in input order, from one seeded stream.
pub fn generate_log(
    model: &ModelParams,
    cases: &[DialogueCase],
    mode: GroundingMode,
    repetitions: usize,
    decode: &DecodeConfig,
    seed: u64,
) -> Result<GenerationLog> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions: must be at least 1".into()));
    }
    decode.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = cases
        .iter()
        .map(|c| generate_case(model, &EncodedCase::new(c, &model.vocab), mode, repetitions, decode, &mut rng))
        .collect::<Result<_>>()?;
    Ok(GenerationLog { cases: out })
}
