use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of augmented responses per case.
    pub lambda: usize,
    /// Weight of the reconstruction reward.
    pub alpha: f64,
    /// Margin of the grounding objective.
    pub mu: f64,
    pub lr: f64,
    pub sleep_lr: f64,
    pub grounding_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Sleep steps run before each wake step.
    pub sleep_steps: usize,
    pub wake_steps: usize,
    pub exact_kl_max_len: usize,
    /// Knowledge length up to which the expected log-likelihood is enumerated.
    pub exact_likelihood_max_len: usize,
    pub elbo_samples: usize,
    /// Span samples per observed-or-augmented response for the generator loss.
    pub generator_samples: usize,
    pub reinforce_samples: usize,
    pub baseline: bool,
    pub baseline_decay: f64,
    pub seed: u64,
    pub no_discriminator: bool,
    pub no_rec_reward: bool,
    pub no_ground_reward: bool,
    pub grounding_epochs: usize,
    pub pseudo_span_windows: Vec<usize>,
    /// Epochs of pseudo-span likelihood training for the posterior reader.
    pub posterior_warmup_epochs: usize,
    pub warmup_windows: Vec<usize>,
    pub clip_norm: f64,
    pub cosine_decay: bool,
    pub validation_cases: usize,
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 3,
            alpha: 1.0,
            mu: 1.0,
            lr: 1e-3,
            sleep_lr: 1e-3,
            grounding_lr: 1e-3,
            batch_size: 32,
            epochs: 5,
            sleep_steps: 1,
            wake_steps: 1,
            exact_kl_max_len: 256,
            exact_likelihood_max_len: 16,
            elbo_samples: 4,
            generator_samples: 1,
            reinforce_samples: 4,
            baseline: true,
            baseline_decay: 0.95,
            seed: 0,
            no_discriminator: false,
            no_rec_reward: false,
            no_ground_reward: false,
            grounding_epochs: 2,
            pseudo_span_windows: vec![5, 10, 15],
            posterior_warmup_epochs: 2,
            warmup_windows: (1..=15).collect(),
            clip_norm: 2.0,
            cosine_decay: true,
            validation_cases: 50,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: &str| Err(Error::Config(format!("train.{key}: {why}")));
        if self.lambda < 1 {
            return fail("lambda", "must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail("alpha", "must be positive");
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return fail("mu", "must be positive");
        }
        for (key, v) in [("lr", self.lr), ("sleep_lr", self.sleep_lr), ("grounding_lr", self.grounding_lr), ("clip_norm", self.clip_norm)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(key, "must be positive");
            }
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("elbo_samples", self.elbo_samples),
            ("generator_samples", self.generator_samples),
            ("reinforce_samples", self.reinforce_samples),
            ("wake_steps", self.wake_steps),
        ] {
            if v == 0 {
                return fail(key, "must be at least 1");
            }
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return fail("baseline_decay", "must lie in [0, 1)");
        }
        for (key, w) in [("pseudo_span_windows", &self.pseudo_span_windows), ("warmup_windows", &self.warmup_windows)] {
            if w.is_empty() || w.contains(&0) {
                return fail(key, "must be a non-empty list of positive lengths");
            }
        }
        Ok(())
    }
}
