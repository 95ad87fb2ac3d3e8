use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reinforce::{reinforce_logit_estimate, Baseline, PosteriorMarginals, RolloutReward};
use super::rewards::RewardSwitches;
use super::{AugmentedResponseSet, EncodedCase, Origin, TrainConfig};
use crate::error::{Error, Result};
use crate::neural::{Adam, AdamConfig, DecodeConfig, GradBundle, Graph, ModelParams, Tensor, Trainable};
use crate::span_model::{joint_posterior, kl_clamped_posterior_prior, sample_cell, softmax_distribution};

pub const WAKE_PREFIXES: [&str; 4] = ["embed.", "prior.", "post.", "gen."];

/// Optimizers, baseline and random stream carried across steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub wake_opt: Adam,
    pub sleep_opt: Adam,
    pub baseline: Option<Baseline>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// `total_wake_steps` and `total_sleep_steps` size the cosine schedules.
    pub fn new(config: &TrainConfig, total_wake_steps: usize, total_sleep_steps: usize) -> Self {
        let adam = |lr: f64, total: usize| {
            Adam::new(AdamConfig {
                lr,
                clip_norm: Some(config.clip_norm),
                cosine_total_steps: config.cosine_decay.then_some(total),
                ..Default::default()
            })
        };
        Self {
            wake_opt: adam(config.lr, total_wake_steps),
            sleep_opt: adam(config.sleep_lr, total_sleep_steps),
            baseline: config.baseline.then(|| Baseline::new(config.baseline_decay)),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SleepReport {
    /// Mean binary cross-entropy before the update.
    pub bce: f64,
    pub grad_norm: f64,
}

/// One discriminator update: observed responses are labelled 1, augmented 0.
pub fn sleep_step(model: &mut ModelParams, sets: &[AugmentedResponseSet], opt: &mut Adam) -> Result<SleepReport> {
    for set in sets {
        if set.count(Origin::Observed) == 0 || set.count(Origin::Augmented) == 0 {
            return Err(Error::Precondition(format!("response set of case {} lacks one of the two origins", set.case_ref)));
        }
    }
    let mut g = Graph::with_trainable(&model.params, Trainable::prefixes(["disc."]));
    let mut parts = Vec::new();
    for set in sets {
        for e in &set.entries {
            let logit = model.discriminator_logit_graph(&mut g, &e.response)?;
            let signed = if e.origin == Origin::Observed { logit } else { g.scale(logit, -1.0) };
            parts.push(g.log_sigmoid(signed));
        }
    }
    if parts.is_empty() {
        return Err(Error::Empty("sleep batch"));
    }
    let n = parts.len() as f64;
    let total = g.add_all(&parts);
    let loss = g.scale(total, -1.0 / n);
    let bce = g.value(loss).item();
    if !bce.is_finite() {
        return Err(Error::NonFiniteLoss(format!("sleep BCE is {bce}")));
    }
    g.backward(loss);
    let grads = GradBundle::from_pairs(g.param_grads());
    drop(g);
    let grad_norm = opt.step(&mut model.params, &grads);
    Ok(SleepReport { bce, grad_norm })
}

/// `KL(w ‖ d) + Σ_R w(R)·KL_R`: the KL over the joint of response and span
/// when responses are weighted by `w` in the posterior and by `d` in the prior.
pub fn extended_kl(weights: &[f64], prior_weights: &[f64], span_kls: &[f64]) -> f64 {
    weights.iter().zip(prior_weights).zip(span_kls).map(|((&w, &d), &kl)| if w > 0.0 { w * ((w / d).ln() + kl) } else { 0.0 }).sum()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WakeReport {
    /// Discriminator-weighted ELBO, averaged over the batch.
    pub objective: f64,
    pub expected_log_likelihood: f64,
    pub kl: f64,
    pub mean_reward: f64,
    pub grad_norm: f64,
}

struct CaseGrads {
    grads: GradBundle,
    report: WakeReport,
}

fn wake_case(
    model: &ModelParams,
    case: &EncodedCase,
    set: &AugmentedResponseSet,
    config: &TrainConfig,
    decode: &DecodeConfig,
    baseline: Option<&mut Baseline>,
    rng: &mut ChaCha8Rng,
) -> Result<CaseGrads> {
    let fail = |what: String| Error::NonFiniteLoss(format!("case {}: {what}", case.case_id));
    let weights = if config.no_discriminator { set.prior_weights() } else { set.normalized_disc_weights() };
    let prior_weights = set.prior_weights();

    let mut g = Graph::with_trainable(&model.params, Trainable::prefixes(WAKE_PREFIXES));
    let prior = model.prior_graph(&mut g, &case.context, &case.knowledge)?;
    let ps = softmax_distribution(&g.value(prior.start_logits).data)?;
    let pe = softmax_distribution(&g.value(prior.end_logits).data)?;
    let n = ps.len();
    let mut prior_start_grad = vec![0.0; n];
    let mut prior_end_grad = vec![0.0; n];

    let mut readers = Vec::with_capacity(set.len());
    let mut marginals = Vec::with_capacity(set.len());
    let mut span_kls = Vec::with_capacity(set.len());
    let mut kl_grads = Vec::with_capacity(set.len());
    let mut parts = Vec::new();
    let mut expected_ll = 0.0;
    for (k, entry) in set.entries.iter().enumerate() {
        let post = model.posterior_graph(&mut g, &case.context, &entry.response, &case.knowledge)?;
        let qs = softmax_distribution(&g.value(post.start_logits).data)?;
        let qe = softmax_distribution(&g.value(post.end_logits).data)?;
        let kg = kl_clamped_posterior_prior(&ps, &pe, &qs, &qe)?;
        if !kg.kl.is_finite() {
            return Err(fail(format!("KL of entry {k} is {}", kg.kl)));
        }
        let w = weights[k];
        for i in 0..n {
            prior_start_grad[i] += w * kg.prior_start[i];
            prior_end_grad[i] += w * kg.prior_end[i];
        }
        span_kls.push(kg.kl);

        if w > 0.0 {
            let joint = joint_posterior(&qs, &qe)?;
            let m = config.generator_samples;
            for _ in 0..m {
                let (s, e) = sample_cell(&joint, rng)?;
                let span = crate::span_model::Span { start: s, end: e.max(s) };
                let nll = model.generator_nll_graph(&mut g, &case.context, case.span_tokens(span), &entry.response)?;
                expected_ll -= w * g.value(nll).item() / m as f64;
                parts.push(g.scale(nll, w / m as f64));
            }
        }
        kl_grads.push((w, kg.post_start, kg.post_end));
        marginals.push(PosteriorMarginals { start: qs, end: qe });
        readers.push(post);
    }

    let switches = RewardSwitches { alpha: config.alpha, reconstruction: !config.no_rec_reward, grounding: !config.no_ground_reward };
    let mut rollout = RolloutReward { model, case, set, decode, switches, cache: HashMap::new() };
    let est = reinforce_logit_estimate(&marginals, config.reinforce_samples, baseline, |r, sp| rollout.reward(r, sp), rng)?;

    parts.push(g.weighted_sum(prior.start_logits, Tensor::row_vector(prior_start_grad)));
    parts.push(g.weighted_sum(prior.end_logits, Tensor::row_vector(prior_end_grad)));
    for (k, (post, (w, gs, ge))) in readers.iter().zip(kl_grads).enumerate() {
        let start: Vec<f64> = gs.iter().zip(&est.start[k]).map(|(a, r)| w * a - r).collect();
        let end: Vec<f64> = ge.iter().zip(&est.end[k]).map(|(a, r)| w * a - r).collect();
        parts.push(g.weighted_sum(post.start_logits, Tensor::row_vector(start)));
        parts.push(g.weighted_sum(post.end_logits, Tensor::row_vector(end)));
    }
    let surrogate = g.add_all(&parts);
    g.backward(surrogate);
    let grads = GradBundle::from_pairs(g.param_grads());

    let kl = extended_kl(&weights, &prior_weights, &span_kls);
    let objective = expected_ll - kl;
    if !objective.is_finite() || !grads.is_finite() {
        return Err(fail(format!("objective {objective}, finite gradients: {}", grads.is_finite())));
    }
    Ok(CaseGrads {
        grads,
        report: WakeReport { objective, expected_log_likelihood: expected_ll, kl, mean_reward: est.mean_reward, grad_norm: 0.0 },
    })
}

/// One update of the readers and the generator on a batch of cases with
/// their response sets. The discriminator and grounding scorer are read only.
pub fn wake_step(
    model: &mut ModelParams,
    batch: &[(&EncodedCase, &AugmentedResponseSet)],
    config: &TrainConfig,
    decode: &DecodeConfig,
    state: &mut TrainState,
) -> Result<WakeReport> {
    if batch.is_empty() {
        return Err(Error::Empty("wake batch"));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by(|&a, &b| batch[a].0.case_id.cmp(&batch[b].0.case_id));
    let mut total = GradBundle::default();
    let mut report = WakeReport::default();
    let scale = 1.0 / batch.len() as f64;
    for i in order {
        let (case, set) = batch[i];
        let out = wake_case(model, case, set, config, decode, state.baseline.as_mut(), &mut state.rng)?;
        total.merge_scaled(&out.grads, scale);
        report.objective += scale * out.report.objective;
        report.expected_log_likelihood += scale * out.report.expected_log_likelihood;
        report.kl += scale * out.report.kl;
        report.mean_reward += scale * out.report.mean_reward;
    }
    report.grad_norm = state.wake_opt.step(&mut model.params, &total);
    if !model.params.all_finite() {
        return Err(Error::NonFiniteLoss("parameters became non-finite after the wake update".into()));
    }
    Ok(report)
}
