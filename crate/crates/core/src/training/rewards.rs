use std::hash::Hash;

use rand::Rng;

use super::AugmentedResponseSet;
use crate::error::Result;
use crate::neural::{Graph, ModelParams, Var};
use crate::span_model::{unigram_f1_ratio, Span};

/// `(1/|R^A|) Σ_i [y_i s(R_gen, R_i) + (1 − y_i)(1 − s(R_gen, R_i))]` with
/// `y_i = 1` only for the response the span was drawn for.
/// The sum is accumulated as a reduced fraction and divided once, falling
/// back to a float sum if the fraction outgrows exact `f64` integers.
pub fn reconstruction_reward<T: Eq + Hash, R: AsRef<[T]>>(generated: &[T], set: &[R], sampled_index: usize) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let terms: Vec<(u64, u64)> = set
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (num, den) = unigram_f1_ratio(generated, r.as_ref());
            if i == sampled_index {
                (num, den)
            } else {
                (den - num, den)
            }
        })
        .collect();
    exact_mean(&terms).unwrap_or_else(|| terms.iter().map(|&(n, d)| n as f64 / d as f64).sum::<f64>() / set.len() as f64)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of the fractions, correctly rounded, when every intermediate stays exact.
fn exact_mean(terms: &[(u64, u64)]) -> Option<f64> {
    const EXACT: u128 = 1 << 53;
    let (mut num, mut den) = (0u128, 1u128);
    for &(n, d) in terms {
        let (n, d) = (n as u128, d as u128);
        num = num.checked_mul(d)?.checked_add(n.checked_mul(den)?)?;
        den = den.checked_mul(d)?;
        let g = gcd(num, den).max(1);
        (num, den) = (num / g, den / g);
    }
    den = den.checked_mul(terms.len() as u128)?;
    let g = gcd(num, den).max(1);
    (num, den) = (num / g, den / g);
    (num <= EXACT && den <= EXACT).then(|| num as f64 / den as f64)
}

/// Which reward components are active.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardSwitches {
    pub alpha: f64,
    pub reconstruction: bool,
    pub grounding: bool,
}

/// `d_π(R) · (α Rec + Gnd)` from already computed parts.
pub fn total_reward_value(disc: f64, rec: f64, gnd: f64, switches: RewardSwitches) -> f64 {
    let rec = if switches.reconstruction { switches.alpha * rec } else { 0.0 };
    let gnd = if switches.grounding { gnd } else { 0.0 };
    disc * (rec + gnd)
}

/// Reward of a generated response for the span drawn from the posterior of
/// `set.entries[sampled_index]`, using the raw discriminator score of that entry.
pub fn total_reward(
    generated: &[usize],
    set: &AugmentedResponseSet,
    sampled_index: usize,
    span_tokens: &[usize],
    switches: RewardSwitches,
    model: &ModelParams,
) -> Result<f64> {
    let responses: Vec<&[usize]> = set.entries.iter().map(|e| e.response.as_slice()).collect();
    let rec = if switches.reconstruction { reconstruction_reward(generated, &responses, sampled_index) } else { 0.0 };
    let gnd = if switches.grounding && !generated.is_empty() { model.grounding_score_ids(span_tokens, generated)? } else { 0.0 };
    Ok(total_reward_value(set.entries[sampled_index].disc_score, rec, gnd, switches))
}

/// `max{0, μ + mismatched − matched}`.
pub fn hinge_loss(matched: f64, mismatched: f64, mu: f64) -> f64 {
    (mu - (matched - mismatched)).max(0.0)
}

pub enum MarginOutcome {
    /// Fewer than two responses; the case contributes nothing.
    Skipped,
    /// The loss value and a graph node whose gradient equals the loss gradient.
    Loss { value: f64, var: Var },
}

/// Margin objective of the grounding scorer for one case, built into `g`.
/// Each response is paired with the pseudo span of a uniformly drawn other response.
pub fn grounding_margin_loss(
    g: &mut Graph,
    model: &ModelParams,
    responses: &[Vec<usize>],
    pseudo_spans: &[Vec<usize>],
    mu: f64,
    rng: &mut impl Rng,
) -> Result<MarginOutcome> {
    let n = responses.len();
    if n < 2 {
        return Ok(MarginOutcome::Skipped);
    }
    let mut parts = Vec::with_capacity(n);
    let mut value = 0.0;
    for i in 0..n {
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let own = model.grounding_logit_graph(g, &pseudo_spans[i], &responses[i])?;
        let own = g.sigmoid(own);
        let other = model.grounding_logit_graph(g, &pseudo_spans[j], &responses[i])?;
        let other = g.sigmoid(other);
        let (a, b) = (g.value(own).item(), g.value(other).item());
        let h = hinge_loss(a, b, mu);
        value += h;
        if h > 0.0 {
            let neg = g.scale(own, -1.0);
            let diff = g.add(other, neg);
            parts.push(diff);
        }
    }
    let scale = 1.0 / n as f64;
    let var = if parts.is_empty() {
        g.constant(crate::neural::Tensor::scalar(0.0))
    } else {
        let s = g.add_all(&parts);
        g.scale(s, scale)
    };
    Ok(MarginOutcome::Loss { value: value * scale, var })
}

/// The hinge averaged over given score pairs.
pub fn margin_from_scores(pairs: &[(f64, f64)], mu: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|&(a, b)| hinge_loss(a, b, mu)).sum::<f64>() / pairs.len() as f64
}

/// Tokens of a span, for callers that hold the knowledge as ids.
pub fn span_ids(knowledge: &[usize], span: Span) -> Vec<usize> {
    knowledge[span.start..=span.end].to_vec()
}
