//! Probability math over knowledge spans.
//!
//! The prior joint over `(start, end)` is built from independent start/end
//! marginals by restricting the end distribution to the tail at or after the
//! start. The posterior joint is the plain outer product of its marginals
//! (mean field), so it also carries mass on `end < start`; any span sampled
//! from it is clamped to `end := max(start, end)`. [`clamp_joint`] is the
//! matching pushforward and is what gets compared against the prior.

use std::collections::HashMap;
use std::hash::Hash;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DIST_TOL: f64 = 1e-9;

/// Inclusive token range `[start, end]` into the concatenated knowledge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize, knowledge_len: usize) -> Result<Self> {
        if end >= knowledge_len {
            return Err(Error::OutOfRange { index: end, len: knowledge_len });
        }
        if start > end {
            return Err(Error::Precondition(format!("span start {start} after end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens<'a, T>(&self, knowledge: &'a [T]) -> &'a [T] {
        &knowledge[self.start..=self.end]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpanKind {
    Prior,
    Posterior,
}

/// Dense `n × n` probability table indexed `[start][end]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointMatrix {
    n: usize,
    probs: Vec<f64>,
}

impl JointMatrix {
    pub fn from_vec(n: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n * n {
            return Err(Error::ShapeMismatch(format!("{} cells for a {n}x{n} joint", probs.len())));
        }
        Ok(Self { n, probs })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, s: usize, e: usize) -> f64 {
        self.probs[s * self.n + e]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn row_sum(&self, s: usize) -> f64 {
        self.probs[s * self.n..(s + 1) * self.n].iter().sum()
    }

    /// Non-zero cells as `((start, end), p)` in row-major order.
    pub fn support(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(move |(i, &p)| ((i / self.n, i % self.n), p))
    }
}

/// Start/end marginals together with the derived joint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanDistribution {
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
    pub joint: JointMatrix,
    pub kind: SpanKind,
}

impl SpanDistribution {
    pub fn prior_from_logits(start_logits: &[f64], end_logits: &[f64]) -> Result<Self> {
        let start_probs = softmax_distribution(start_logits)?;
        let end_probs = softmax_distribution(end_logits)?;
        let joint = joint_prior(&start_probs, &end_probs)?;
        Ok(Self { start_probs, end_probs, joint, kind: SpanKind::Prior })
    }

    pub fn posterior_from_logits(start_logits: &[f64], end_logits: &[f64]) -> Result<Self> {
        let start_probs = softmax_distribution(start_logits)?;
        let end_probs = softmax_distribution(end_logits)?;
        let joint = joint_posterior(&start_probs, &end_probs)?;
        Ok(Self { start_probs, end_probs, joint, kind: SpanKind::Posterior })
    }

    pub fn len(&self) -> usize {
        self.start_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start_probs.is_empty()
    }

    /// Joint over valid spans: the prior joint as is, the posterior pushed
    /// through the `end := max(start, end)` clamp.
    pub fn valid_joint(&self) -> JointMatrix {
        match self.kind {
            SpanKind::Prior => self.joint.clone(),
            SpanKind::Posterior => clamp_joint(&self.joint),
        }
    }
}

pub fn softmax_distribution(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("softmax scores"));
    }
    let mut out = scores.to_vec();
    crate::neural::tensor::softmax_in_place(&mut out);
    Ok(out)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidDistribution(format!("{what} is empty")));
    }
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidDistribution(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(Error::InvalidDistribution(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// End distribution conditioned on `end >= z_s`.
pub fn constrained_end_distribution(end_probs: &[f64], z_s: usize) -> Result<Vec<f64>> {
    check_distribution(end_probs, "end distribution")?;
    if z_s >= end_probs.len() {
        return Err(Error::OutOfRange { index: z_s, len: end_probs.len() });
    }
    let tail: f64 = end_probs[z_s..].iter().sum();
    if tail <= 0.0 {
        return Err(Error::DegenerateMass { start: z_s });
    }
    Ok(end_probs.iter().enumerate().map(|(i, &p)| if i < z_s { 0.0 } else { p / tail }).collect())
}

/// Like [`constrained_end_distribution`], but an all-zero tail (floating
/// point underflow) falls back to uniform over the valid positions.
fn constrained_end_or_uniform(end_probs: &[f64], z_s: usize) -> Vec<f64> {
    let n = end_probs.len();
    let tail: f64 = end_probs[z_s..].iter().sum();
    if tail > 0.0 {
        end_probs.iter().enumerate().map(|(i, &p)| if i < z_s { 0.0 } else { p / tail }).collect()
    } else {
        let u = 1.0 / (n - z_s) as f64;
        (0..n).map(|i| if i < z_s { 0.0 } else { u }).collect()
    }
}

/// `p(s, e) = p(s) · p̂(e | s)`, upper triangular.
pub fn joint_prior(start_probs: &[f64], end_probs: &[f64]) -> Result<JointMatrix> {
    check_distribution(start_probs, "start distribution")?;
    check_distribution(end_probs, "end distribution")?;
    let n = start_probs.len();
    if end_probs.len() != n {
        return Err(Error::ShapeMismatch(format!("start has {n} positions, end has {}", end_probs.len())));
    }
    let mut probs = vec![0.0; n * n];
    for (s, &ps) in start_probs.iter().enumerate() {
        if ps == 0.0 {
            continue;
        }
        let cond = constrained_end_or_uniform(end_probs, s);
        for e in s..n {
            probs[s * n + e] = ps * cond[e];
        }
    }
    JointMatrix::from_vec(n, probs)
}

/// Mean-field posterior joint `q(s) · q(e)` over the full square.
pub fn joint_posterior(q_start: &[f64], q_end: &[f64]) -> Result<JointMatrix> {
    check_distribution(q_start, "posterior start distribution")?;
    check_distribution(q_end, "posterior end distribution")?;
    let n = q_start.len();
    if q_end.len() != n {
        return Err(Error::ShapeMismatch(format!("start has {n} positions, end has {}", q_end.len())));
    }
    let mut probs = vec![0.0; n * n];
    for s in 0..n {
        for e in 0..n {
            probs[s * n + e] = q_start[s] * q_end[e];
        }
    }
    JointMatrix::from_vec(n, probs)
}

/// Pushforward of a joint through `end := max(start, end)`.
pub fn clamp_joint(joint: &JointMatrix) -> JointMatrix {
    let n = joint.n;
    let mut probs = vec![0.0; n * n];
    for s in 0..n {
        for e in 0..n {
            let p = joint.get(s, e);
            let e2 = e.max(s);
            probs[s * n + e2] += p;
        }
    }
    JointMatrix { n, probs }
}

/// Draws a raw `(start, end)` cell, which may have `end < start` for
/// posterior joints.
pub fn sample_cell(joint: &JointMatrix, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let total = joint.sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::InvalidDistribution("joint has no mass".into()));
    }
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &p) in joint.probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = Some(i);
        if u < acc {
            return Ok((i / joint.n, i % joint.n));
        }
    }
    let i = last.expect("joint with positive mass has a support cell");
    Ok((i / joint.n, i % joint.n))
}

/// Samples a valid span, clamping `end < start` cells to `end = start`.
pub fn sample_span(joint: &JointMatrix, rng: &mut impl Rng) -> Result<Span> {
    let (s, e) = sample_cell(joint, rng)?;
    Ok(Span { start: s, end: e.max(s) })
}

/// `Σ q ln(q / p)` in nats; `+∞` when `q` has mass where `p` has none.
pub fn kl_joint(q: &JointMatrix, p: &JointMatrix) -> Result<f64> {
    if q.n != p.n {
        return Err(Error::ShapeMismatch(format!("KL between {}x{0} and {}x{1} joints", q.n, p.n)));
    }
    let mut kl = 0.0;
    for (&qv, &pv) in q.probs.iter().zip(&p.probs) {
        if qv <= 0.0 {
            continue;
        }
        if pv <= 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += qv * (qv / pv).ln();
    }
    Ok(kl.max(0.0))
}

/// Unigram F1 with clipped (multiset) overlap.
pub fn unigram_f1<T: Eq + Hash>(a: &[T], b: &[T]) -> f64 {
    let (num, den) = unigram_f1_ratio(a, b);
    num as f64 / den as f64
}

/// Unigram F1 as the integer ratio `2·overlap / (|a| + |b|)`, `0/1` when
/// either side is empty.
pub(crate) fn unigram_f1_ratio<T: Eq + Hash>(a: &[T], b: &[T]) -> (u64, u64) {
    if a.is_empty() || b.is_empty() {
        return (0, 1);
    }
    let mut counts: HashMap<&T, usize> = HashMap::new();
    for t in b {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0u64;
    for t in a {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    (2 * overlap, (a.len() + b.len()) as u64)
}

/// Candidate windows: every full window of each size, or all of `K` when a
/// window is longer than the knowledge.
pub fn candidate_windows(knowledge_len: usize, window_sizes: &[usize]) -> Vec<Span> {
    let mut out = Vec::new();
    for &w in window_sizes {
        if w == 0 || knowledge_len == 0 {
            continue;
        }
        if w >= knowledge_len {
            out.push(Span { start: 0, end: knowledge_len - 1 });
        } else {
            out.extend((0..=knowledge_len - w).map(|s| Span { start: s, end: s + w - 1 }));
        }
    }
    out
}

/// Sliding-window span with maximal unigram F1 against the response; ties go
/// to the shorter span, then the earlier start.
pub fn pseudo_span_tag<T: Eq + Hash>(response: &[T], knowledge: &[T], window_sizes: &[usize]) -> Result<Span> {
    if knowledge.is_empty() {
        return Err(Error::Empty("knowledge"));
    }
    if window_sizes.is_empty() || window_sizes.contains(&0) {
        return Err(Error::Config("window sizes must be a non-empty set of positive lengths".into()));
    }
    let mut best: Option<(f64, Span)> = None;
    for span in candidate_windows(knowledge.len(), window_sizes) {
        let f1 = unigram_f1(span.tokens(knowledge), response);
        let better = match best {
            None => true,
            Some((bf, bs)) => f1 > bf || (f1 == bf && (span.len(), span.start) < (bs.len(), bs.start)),
        };
        if better {
            best = Some((f1, span));
        }
    }
    Ok(best.expect("at least one candidate window").1)
}

/// `KL(clamp(q_s ⊗ q_e) ‖ prior(p_s, p_e))` and its gradient with respect to
/// the four logit vectors that produced the marginals.
#[derive(Clone, Debug, PartialEq)]
pub struct KlWithGrads {
    pub kl: f64,
    pub prior_start: Vec<f64>,
    pub prior_end: Vec<f64>,
    pub post_start: Vec<f64>,
    pub post_end: Vec<f64>,
}

pub fn kl_clamped_posterior_prior(ps: &[f64], pe: &[f64], qs: &[f64], qe: &[f64]) -> Result<KlWithGrads> {
    let n = ps.len();
    if pe.len() != n || qs.len() != n || qe.len() != n {
        return Err(Error::ShapeMismatch("KL marginals must share one length".into()));
    }
    let prior = joint_prior(ps, pe)?;
    let post = clamp_joint(&joint_posterior(qs, qe)?);

    // tail[s] = Σ_{j≥s} pe[j]; le[s] = Σ_{e≤s} qe[e]
    let mut tail = vec![0.0; n + 1];
    for s in (0..n).rev() {
        tail[s] = tail[s + 1] + pe[s];
    }
    let mut le = vec![0.0; n];
    let mut acc = 0.0;
    for s in 0..n {
        acc += qe[s];
        le[s] = acc;
    }

    let mut kl = 0.0;
    // c[s][e] = ∂KL/∂q̃(s,e) = ln q̃ − ln p + 1
    let mut c = vec![0.0; n * n];
    for s in 0..n {
        for e in s..n {
            let q = post.get(s, e);
            let p = prior.get(s, e);
            if q > 0.0 {
                if p <= 0.0 {
                    return Ok(KlWithGrads {
                        kl: f64::INFINITY,
                        prior_start: vec![0.0; n],
                        prior_end: vec![0.0; n],
                        post_start: vec![0.0; n],
                        post_end: vec![0.0; n],
                    });
                }
                let lr = (q / p).ln();
                kl += q * lr;
                c[s * n + e] = lr + 1.0;
            } else if p > 0.0 {
                c[s * n + e] = 1.0 - p.ln();
            }
        }
    }

    let prior_start: Vec<f64> = (0..n).map(|s| ps[s] - qs[s]).collect();

    // A[j] = Σ_{s≤j} qs[s] / tail[s]
    let mut prior_end = vec![0.0; n];
    let mut a = 0.0;
    for j in 0..n {
        if tail[j] > 0.0 {
            a += qs[j] / tail[j];
        }
        let col: f64 = (0..=j).map(|s| post.get(s, j)).sum();
        prior_end[j] = pe[j] * a - col;
    }

    let g_qs: Vec<f64> = (0..n).map(|s| c[s * n + s] * le[s] + ((s + 1)..n).map(|e| c[s * n + e] * qe[e]).sum::<f64>()).collect();
    let g_qe: Vec<f64> = (0..n)
        .map(|j| {
            let before: f64 = (0..j).map(|s| c[s * n + j] * qs[s]).sum();
            let diag: f64 = (j..n).map(|s| c[s * n + s] * qs[s]).sum();
            before + diag
        })
        .collect();
    let to_logits = |g: &[f64], p: &[f64]| -> Vec<f64> {
        let mean: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
        g.iter().zip(p).map(|(gv, pv)| pv * (gv - mean)).collect()
    };
    Ok(KlWithGrads { kl: kl.max(0.0), prior_start, prior_end, post_start: to_logits(&g_qs, qs), post_end: to_logits(&g_qe, qe) })
}
