//! Score-function gradient of the expected reward with respect to the
//! posterior logits.
//!
//! A rollout draws an entry `R` of the augmented set uniformly, a raw cell
//! `(s, e)` from `q(·|R)`, and scores the generation for the clamped span.
//! Because the posterior is mean-field, `∇ ln q(s, e)` is
//! `onehot(s) − q_s` on the start logits and `onehot(e) − q_e` on the end logits.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rewards::{total_reward, RewardSwitches};
use super::{AugmentedResponseSet, EncodedCase};
use crate::error::Result;
use crate::neural::{DecodeConfig, GradBundle, Graph, ModelParams, Tensor, Trainable};
use crate::span_model::{softmax_distribution, Span};

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorMarginals {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// Exponential moving average of past rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub decay: f64,
    pub value: Option<f64>,
}

impl Baseline {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None }
    }

    pub fn current(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    pub fn update(&mut self, reward: f64) {
        self.value = Some(match self.value {
            None => reward,
            Some(b) => self.decay * b + (1.0 - self.decay) * reward,
        });
    }
}

/// Monte Carlo estimate of `∇ E[Re]` per entry, with per-component standard errors.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitEstimate {
    pub start: Vec<Vec<f64>>,
    pub end: Vec<Vec<f64>>,
    pub start_se: Vec<Vec<f64>>,
    pub end_se: Vec<Vec<f64>>,
    pub mean_reward: f64,
    pub samples: usize,
}

impl LogitEstimate {
    /// Flattened estimate followed by flattened standard errors.
    pub fn flatten(&self) -> (Vec<f64>, Vec<f64>) {
        let est = self.start.iter().chain(&self.end).flatten().copied().collect();
        let se = self.start_se.iter().chain(&self.end_se).flatten().copied().collect();
        (est, se)
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

struct Moments {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self { sum: vec![0.0; n], sum_sq: vec![0.0; n] }
    }

    fn mean_and_se(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        let nf = n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / nf).collect();
        let se = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| if n > 1 { ((sq - nf * m * m).max(0.0) / (nf - 1.0) / nf).sqrt() } else { 0.0 })
            .collect();
        (mean, se)
    }
}

/// Averages `∇ ln q(s, e) · (Re − b)` over `n_samples` rollouts.
/// With `baseline = None`, `b = 0`. The baseline is read before and updated
/// after each rollout, so it never depends on the rollout it scales.
pub fn reinforce_logit_estimate(
    posteriors: &[PosteriorMarginals],
    n_samples: usize,
    mut baseline: Option<&mut Baseline>,
    mut reward: impl FnMut(usize, Span) -> Result<f64>,
    rng: &mut impl Rng,
) -> Result<LogitEstimate> {
    let k = posteriors.len();
    let mut start_m: Vec<Moments> = posteriors.iter().map(|p| Moments::new(p.start.len())).collect();
    let mut end_m: Vec<Moments> = posteriors.iter().map(|p| Moments::new(p.end.len())).collect();
    let mut total_reward = 0.0;
    for _ in 0..n_samples {
        let r = rng.gen_range(0..k);
        let q = &posteriors[r];
        let s = draw(&q.start, rng);
        let e = draw(&q.end, rng);
        let re = reward(r, Span { start: s, end: e.max(s) })?;
        total_reward += re;
        let coef = re - baseline.as_ref().map_or(0.0, |b| b.current());
        if let Some(b) = baseline.as_mut() {
            b.update(re);
        }
        for (moments, probs, hit) in [(&mut start_m[r], &q.start, s), (&mut end_m[r], &q.end, e)] {
            for (i, p) in probs.iter().enumerate() {
                let g = coef * (if i == hit { 1.0 } else { 0.0 } - p);
                moments.sum[i] += g;
                moments.sum_sq[i] += g * g;
            }
        }
    }
    let n = n_samples.max(1);
    let (start, start_se): (Vec<_>, Vec<_>) = start_m.iter().map(|m| m.mean_and_se(n)).unzip();
    let (end, end_se): (Vec<_>, Vec<_>) = end_m.iter().map(|m| m.mean_and_se(n)).unzip();
    Ok(LogitEstimate { start, end, start_se, end_se, mean_reward: total_reward / n as f64, samples: n_samples })
}

/// `∇ (1/|R^A|) Σ_R Σ_{(s,e)} q(s,e|R) Re(R, clamp(s,e))` by enumeration.
pub fn exact_reward_gradient(
    posteriors: &[PosteriorMarginals],
    mut reward: impl FnMut(usize, Span) -> Result<f64>,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let k = posteriors.len() as f64;
    let mut starts = Vec::new();
    let mut ends = Vec::new();
    for (r, q) in posteriors.iter().enumerate() {
        let n = q.start.len();
        let mut table = vec![0.0; n * n];
        for s in 0..n {
            for e in 0..n {
                table[s * n + e] = reward(r, Span { start: s, end: e.max(s) })?;
            }
        }
        let row: Vec<f64> = (0..n).map(|s| (0..n).map(|e| q.end[e] * table[s * n + e]).sum()).collect();
        let col: Vec<f64> = (0..n).map(|e| (0..n).map(|s| q.start[s] * table[s * n + e]).sum()).collect();
        let mean: f64 = (0..n).map(|s| q.start[s] * row[s]).sum();
        starts.push((0..n).map(|i| q.start[i] * (row[i] - mean) / k).collect());
        ends.push((0..n).map(|i| q.end[i] * (col[i] - mean) / k).collect());
    }
    Ok((starts, ends))
}

/// Decodes a response for each rollout span and scores it with the total
/// reward; identical `(entry, span)` rollouts are decoded once.
pub(crate) struct RolloutReward<'a> {
    pub model: &'a ModelParams,
    pub case: &'a EncodedCase,
    pub set: &'a AugmentedResponseSet,
    pub decode: &'a DecodeConfig,
    pub switches: RewardSwitches,
    pub cache: HashMap<(usize, Span), f64>,
}

impl RolloutReward<'_> {
    pub fn reward(&mut self, r: usize, span: Span) -> Result<f64> {
        if let Some(&v) = self.cache.get(&(r, span)) {
            return Ok(v);
        }
        let tokens = self.case.span_tokens(span);
        let generated = self.model.generator_decode_ids(&self.case.context, tokens, self.decode)?;
        let v = total_reward(&generated, self.set, r, tokens, self.switches, self.model)?;
        self.cache.insert((r, span), v);
        Ok(v)
    }
}

/// Estimate of `∇_φ E[Re]` for one case, as a bundle over posterior-reader
/// parameters, together with the logit-level estimate it was built from.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_estimate(
    model: &ModelParams,
    case: &EncodedCase,
    set: &AugmentedResponseSet,
    n_samples: usize,
    switches: RewardSwitches,
    decode: &DecodeConfig,
    baseline: Option<&mut Baseline>,
    rng: &mut impl Rng,
) -> Result<(GradBundle, LogitEstimate)> {
    let mut g = Graph::with_trainable(&model.params, Trainable::prefixes(["post."]));
    let mut readers = Vec::with_capacity(set.len());
    let mut marginals = Vec::with_capacity(set.len());
    for e in &set.entries {
        let v = model.posterior_graph(&mut g, &case.context, &e.response, &case.knowledge)?;
        marginals.push(PosteriorMarginals {
            start: softmax_distribution(&g.value(v.start_logits).data)?,
            end: softmax_distribution(&g.value(v.end_logits).data)?,
        });
        readers.push(v);
    }
    let mut rollout = RolloutReward { model, case, set, decode, switches, cache: HashMap::new() };
    let est = reinforce_logit_estimate(&marginals, n_samples, baseline, |r, sp| rollout.reward(r, sp), rng)?;
    let mut parts = Vec::new();
    for (i, v) in readers.iter().enumerate() {
        let n = est.start[i].len();
        parts.push(g.weighted_sum(v.start_logits, Tensor::from_vec(1, n, est.start[i].clone())));
        parts.push(g.weighted_sum(v.end_logits, Tensor::from_vec(1, n, est.end[i].clone())));
    }
    let surrogate = g.add_all(&parts);
    g.backward(surrogate);
    Ok((GradBundle::from_pairs(g.param_grads()), est))
}
