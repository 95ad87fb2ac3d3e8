//! Learning algorithms: the ELBO, response augmentation, rewards, the
//! score-function estimator, and the alternating sleep/wake loop.

mod augment;
mod config;
mod elbo;
mod reinforce;
mod rewards;
mod run;
mod steps;

pub use augment::{augment_responses, observed_set, AugmentedEntry, AugmentedResponseSet, Origin};
pub use config::TrainConfig;
pub use elbo::{compute_elbo, elbo_from_tables, exact_log_marginal, true_posterior, ElboSettings, ElboTerms};
pub use reinforce::{exact_reward_gradient, reinforce_estimate, reinforce_logit_estimate, Baseline, LogitEstimate, PosteriorMarginals};
pub use rewards::{
    grounding_margin_loss, hinge_loss, margin_from_scores, reconstruction_reward, span_ids, total_reward, total_reward_value,
    MarginOutcome, RewardSwitches,
};
pub use run::{evaluate_validation, pretrain_grounding, run_training, warmup_posterior, EpochRecord, TrainOutcome, ValidationMetrics};
pub use steps::{extended_kl, sleep_step, wake_step, SleepReport, TrainState, WakeReport};

use crate::corpus::DialogueCase;
use crate::neural::model::flatten_context;
use crate::neural::Vocab;
use crate::span_model::Span;

/// A case mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCase {
    pub case_id: String,
    pub context: Vec<usize>,
    pub knowledge: Vec<usize>,
    pub responses: Vec<Vec<usize>>,
    /// Half-open token ranges of the knowledge sentences.
    pub sentence_bounds: Vec<(usize, usize)>,
}

impl EncodedCase {
    pub fn new(case: &DialogueCase, vocab: &Vocab) -> Self {
        Self {
            case_id: case.case_id.clone(),
            context: vocab.encode(&flatten_context(&case.context)),
            knowledge: vocab.encode(&case.knowledge_tokens()),
            responses: case.responses.iter().map(|r| vocab.encode(r)).collect(),
            sentence_bounds: case.sentence_bounds(),
        }
    }

    pub fn span_tokens(&self, span: Span) -> &[usize] {
        &self.knowledge[span.start..=span.end]
    }

    pub fn sentence_of(&self, pos: usize) -> usize {
        self.sentence_bounds.iter().position(|&(lo, hi)| pos >= lo && pos < hi).unwrap_or(0)
    }
}
