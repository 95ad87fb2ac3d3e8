//! Evidence lower bound over the span latent.
//!
//! The posterior is mean-field over the full square, so it places mass on
//! cells with `end < start` where the prior has none. Spans handed to the
//! generator are clamped, and the bound is taken over the clamped posterior
//! `q̃`. With that choice `ln p(R) − ELBO = KL(q̃ ‖ p(·|R))` exactly.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EncodedCase;
use crate::error::Result;
use crate::neural::tensor::log_sum_exp;
use crate::neural::ModelParams;
use crate::span_model::{clamp_joint, joint_posterior, joint_prior, kl_joint, sample_cell, softmax_distribution, JointMatrix, Span};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub elbo: f64,
    pub expected_log_likelihood: f64,
    pub kl: f64,
    /// Standard error of the Monte Carlo part; `None` for exact evaluation.
    pub std_error: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboSettings {
    pub exact_kl_max_len: usize,
    pub exact_likelihood_max_len: usize,
    pub samples: usize,
}

impl ElboSettings {
    pub fn exact() -> Self {
        Self { exact_kl_max_len: usize::MAX, exact_likelihood_max_len: usize::MAX, samples: 1 }
    }

    pub fn monte_carlo(samples: usize) -> Self {
        Self { exact_kl_max_len: usize::MAX, exact_likelihood_max_len: 0, samples }
    }
}

/// `E_q[ln p(R|S)] − KL(q ‖ p)` for a clamped posterior and a prior joint,
/// enumerating every span in the support of `q`.
pub fn elbo_from_tables(q: &JointMatrix, prior: &JointMatrix, mut log_lik: impl FnMut(Span) -> Result<f64>) -> Result<ElboTerms> {
    let kl = kl_joint(q, prior)?;
    let mut expected = 0.0;
    for ((s, e), w) in q.support() {
        expected += w * log_lik(Span { start: s, end: e })?;
    }
    let elbo = if kl.is_infinite() { f64::NEG_INFINITY } else { expected - kl };
    Ok(ElboTerms { elbo, expected_log_likelihood: expected, kl, std_error: None })
}

/// `ln Σ_{(s,e)} p(s,e) p(R|s,e)` by enumeration.
pub fn exact_log_marginal(prior: &JointMatrix, mut log_lik: impl FnMut(Span) -> Result<f64>) -> Result<f64> {
    let mut terms = Vec::new();
    for ((s, e), p) in prior.support() {
        terms.push(p.ln() + log_lik(Span { start: s, end: e })?);
    }
    Ok(log_sum_exp(&terms))
}

/// `p(s,e | R) ∝ p(s,e) p(R|s,e)`.
pub fn true_posterior(prior: &JointMatrix, mut log_lik: impl FnMut(Span) -> Result<f64>) -> Result<JointMatrix> {
    let n = prior.size();
    let z = exact_log_marginal(prior, &mut log_lik)?;
    let mut probs = vec![0.0; n * n];
    for ((s, e), p) in prior.support() {
        probs[s * n + e] = (p.ln() + log_lik(Span { start: s, end: e })? - z).exp();
    }
    JointMatrix::from_vec(n, probs)
}

/// `ln q̃(s,e) − ln p(s,e)` without materialising either joint.
struct LogRatio {
    qs: Vec<f64>,
    qe: Vec<f64>,
    qe_prefix: Vec<f64>,
    ps: Vec<f64>,
    pe: Vec<f64>,
    tail: Vec<f64>,
}

impl LogRatio {
    fn new(ps: Vec<f64>, pe: Vec<f64>, qs: Vec<f64>, qe: Vec<f64>) -> Self {
        let n = ps.len();
        let mut tail = vec![0.0; n + 1];
        for s in (0..n).rev() {
            tail[s] = tail[s + 1] + pe[s];
        }
        let mut qe_prefix = vec![0.0; n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += qe[j];
            qe_prefix[j] = acc;
        }
        Self { qs, qe, qe_prefix, ps, pe, tail }
    }

    fn eval(&self, s: usize, e: usize) -> f64 {
        let q = if e == s { self.qs[s] * self.qe_prefix[s] } else { self.qs[s] * self.qe[e] };
        let p = if self.tail[s] > 0.0 { self.ps[s] * self.pe[e] / self.tail[s] } else { self.ps[s] / (self.ps.len() - s) as f64 };
        q.ln() - p.ln()
    }
}

/// ELBO of one response under the model. The KL term is enumerated when
/// `l_K ≤ exact_kl_max_len`; the expected log-likelihood is enumerated when
/// `l_K ≤ exact_likelihood_max_len`. Otherwise both use `samples` draws
/// from the clamped posterior.
pub fn compute_elbo(
    model: &ModelParams,
    case: &EncodedCase,
    response: &[usize],
    settings: ElboSettings,
    rng: &mut impl Rng,
) -> Result<ElboTerms> {
    let n = case.knowledge.len();
    let prior = model.prior_read_ids(&case.context, &case.knowledge)?;
    let post = model.posterior_read_ids(&case.context, response, &case.knowledge)?;
    let ps = softmax_distribution(&prior.start_logits)?;
    let pe = softmax_distribution(&prior.end_logits)?;
    let qs = softmax_distribution(&post.start_logits)?;
    let qe = softmax_distribution(&post.end_logits)?;
    let q_raw = joint_posterior(&qs, &qe)?;

    let mut cache: HashMap<Span, f64> = HashMap::new();
    let mut log_lik = |span: Span| -> Result<f64> {
        if let Some(&v) = cache.get(&span) {
            return Ok(v);
        }
        let v = -model.generator_nll_ids(&case.context, case.span_tokens(span), response)?;
        cache.insert(span, v);
        Ok(v)
    };

    if n <= settings.exact_likelihood_max_len && n <= settings.exact_kl_max_len {
        let p = joint_prior(&ps, &pe)?;
        return elbo_from_tables(&clamp_joint(&q_raw), &p, log_lik);
    }

    let draws: Vec<Span> = (0..settings.samples.max(1))
        .map(|_| sample_cell(&q_raw, rng).map(|(s, e)| Span { start: s, end: e.max(s) }))
        .collect::<Result<_>>()?;
    let kl = if n <= settings.exact_kl_max_len {
        kl_joint(&clamp_joint(&q_raw), &joint_prior(&ps, &pe)?)?
    } else {
        let ratio = LogRatio::new(ps, pe, qs, qe);
        draws.iter().map(|sp| ratio.eval(sp.start, sp.end)).sum::<f64>() / draws.len() as f64
    };
    let mut values = Vec::with_capacity(draws.len());
    for &sp in &draws {
        values.push(log_lik(sp)?);
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
    let elbo = if kl.is_infinite() { f64::NEG_INFINITY } else { mean - kl };
    Ok(ElboTerms { elbo, expected_log_likelihood: mean, kl, std_error: Some((var / m).sqrt()) })
}
