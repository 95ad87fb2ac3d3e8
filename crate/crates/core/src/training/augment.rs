use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EncodedCase;
use crate::error::{Error, Result};
use crate::neural::{DecodeConfig, ModelParams};
use crate::span_model::{sample_span, SpanDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Observed,
    Augmented,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedEntry {
    pub response: Vec<usize>,
    pub origin: Origin,
    /// Raw discriminator score `d_π(R)`.
    pub disc_score: f64,
    /// Sampling probability `d(R)` of the entry within the set.
    pub prior_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedResponseSet {
    pub case_ref: String,
    pub entries: Vec<AugmentedEntry>,
}

impl AugmentedResponseSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.entries.iter().filter(|e| e.origin == origin).count()
    }

    /// Discriminator scores normalised to a distribution over the set.
    pub fn normalized_disc_weights(&self) -> Vec<f64> {
        let total: f64 = self.entries.iter().map(|e| e.disc_score).sum();
        if total > 0.0 && total.is_finite() {
            self.entries.iter().map(|e| e.disc_score / total).collect()
        } else {
            vec![1.0 / self.len() as f64; self.len()]
        }
    }

    pub fn prior_weights(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.prior_weight).collect()
    }

    /// Re-scores every entry with the current discriminator.
    pub fn rescore(&mut self, model: &ModelParams) -> Result<()> {
        for e in &mut self.entries {
            e.disc_score = model.discriminator_score_ids(&e.response)?;
        }
        Ok(())
    }
}

/// The observed responses alone, each with discriminator weight 1. Used when
/// training without a discriminator.
pub fn observed_set(case: &EncodedCase) -> AugmentedResponseSet {
    let w = 1.0 / case.responses.len() as f64;
    AugmentedResponseSet {
        case_ref: case.case_id.clone(),
        entries: case
            .responses
            .iter()
            .map(|r| AugmentedEntry { response: r.clone(), origin: Origin::Observed, disc_score: 1.0, prior_weight: w })
            .collect(),
    }
}

/// Observed responses plus `lambda` generated ones. Each generated response
/// decodes a span drawn from the posterior of a uniformly chosen observed
/// response.
pub fn augment_responses(
    case: &EncodedCase,
    lambda: usize,
    model: &ModelParams,
    decode: &DecodeConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedResponseSet> {
    let fail = |e: Error| Error::Decode { case_id: case.case_id.clone(), reason: e.to_string() };
    let mut entries: Vec<AugmentedEntry> = case
        .responses
        .iter()
        .map(|r| AugmentedEntry { response: r.clone(), origin: Origin::Observed, disc_score: 0.0, prior_weight: 0.0 })
        .collect();
    let mut posteriors: Vec<Option<SpanDistribution>> = vec![None; case.responses.len()];
    for _ in 0..lambda {
        let pick = rng.gen_range(0..case.responses.len());
        if posteriors[pick].is_none() {
            let out = model.posterior_read_ids(&case.context, &case.responses[pick], &case.knowledge).map_err(fail)?;
            posteriors[pick] = Some(SpanDistribution::posterior_from_logits(&out.start_logits, &out.end_logits).map_err(fail)?);
        }
        let dist = posteriors[pick].as_ref().expect("posterior computed above");
        let span = sample_span(&dist.joint, rng).map_err(fail)?;
        let generated = model.generator_decode_ids(&case.context, case.span_tokens(span), decode).map_err(fail)?;
        entries.push(AugmentedEntry { response: generated, origin: Origin::Augmented, disc_score: 0.0, prior_weight: 0.0 });
    }
    let w = 1.0 / entries.len() as f64;
    for e in &mut entries {
        e.prior_weight = w;
        e.disc_score = model.discriminator_score_ids(&e.response)?;
    }
    Ok(AugmentedResponseSet { case_ref: case.case_id.clone(), entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{ModelConfig, Vocab};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelParams, EncodedCase) {
        let words: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let m = ModelParams::new(ModelConfig { d: 8, heads: 2, max_len: 64, ..Default::default() }, Vocab::from_tokens(&words)).unwrap();
        let case = EncodedCase {
            case_id: "c".into(),
            context: vec![4, 5],
            knowledge: vec![6, 7, 8, 9, 10, 11],
            responses: vec![vec![6, 7, 12], vec![9, 10, 13]],
            sentence_bounds: vec![(0, 3), (3, 6)],
        };
        (m, case)
    }

    fn decode() -> DecodeConfig {
        DecodeConfig { beam_width: 2, min_len: 2, max_len: 5, repetition_penalty: 2.0 }
    }

    #[test]
    fn cardinality_origins_and_uniform_prior() {
        let (m, case) = setup();
        let set = augment_responses(&case, 3, &m, &decode(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(set.len(), 5);
        assert_eq!(set.count(Origin::Observed), 2);
        assert_eq!(set.count(Origin::Augmented), 3);
        for e in &set.entries {
            assert_eq!(e.prior_weight, 0.2);
            assert!(e.disc_score > 0.0 && e.disc_score < 1.0);
        }
        assert!((set.normalized_disc_weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fixed_seed_gives_identical_augmentations() {
        let (m, case) = setup();
        let a = augment_responses(&case, 4, &m, &decode(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment_responses(&case, 4, &m, &decode(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_failures_name_the_case() {
        let (m, case) = setup();
        let bad = DecodeConfig { max_len: 100, ..decode() };
        let err = augment_responses(&case, 1, &m, &bad, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("case c:"), "{err}");
    }
}
