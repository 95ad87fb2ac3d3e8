use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
}

fn counts<T: Eq + std::hash::Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    for g in seq.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Clipped matches and total hypothesis n-grams.
fn clipped<T: Eq + std::hash::Hash, R: AsRef<[T]>>(hyp: &[T], refs: &[R], n: usize) -> (usize, usize) {
    let h = counts(hyp, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (g, c) in counts(r.as_ref(), n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = h.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn closest_ref_len<T, R: AsRef<[T]>>(hyp_len: usize, refs: &[R]) -> usize {
    refs.iter().map(|r| r.as_ref().len()).min_by_key(|&l| (l.abs_diff(hyp_len), l)).unwrap_or(0)
}

/// Corpus-level BLEU-1 and BLEU-2 over `(hypothesis, references)` pairs.
pub fn corpus_bleu<T: Eq + std::hash::Hash, R: AsRef<[T]>>(pairs: &[(&[T], &[R])]) -> (f64, f64) {
    let (mut m1, mut t1, mut m2, mut t2, mut c, mut r) = (0, 0, 0, 0, 0, 0);
    for (hyp, refs) in pairs {
        let (a, b) = clipped(hyp, refs, 1);
        let (x, y) = clipped(hyp, refs, 2);
        m1 += a;
        t1 += b;
        m2 += x;
        t2 += y;
        c += hyp.len();
        r += closest_ref_len(hyp.len(), refs);
    }
    if c == 0 || t1 == 0 {
        return (0.0, 0.0);
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let p1 = m1 as f64 / t1 as f64;
    let p2 = if t2 == 0 { 0.0 } else { m2 as f64 / t2 as f64 };
    (bp * p1, bp * (p1 * p2).sqrt())
}

fn rouge_n<T: Eq + std::hash::Hash>(hyp: &[T], reference: &[T], n: usize) -> f64 {
    let h = counts(hyp, n);
    let r = counts(reference, n);
    let overlap: usize = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    let (th, tr) = (hyp.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1));
    if th == 0 || tr == 0 {
        return 0.0;
    }
    f1(overlap as f64 / th as f64, overlap as f64 / tr as f64)
}

fn lcs<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(hyp, reference) as f64;
    f1(l / hyp.len() as f64, l / reference.len() as f64)
}

/// Sentence-level BLEU with clipped multi-reference counts, and ROUGE taking
/// the best reference.
pub fn reference_overlap<T: Eq + std::hash::Hash, R: AsRef<[T]>>(hypothesis: &[T], references: &[R]) -> Result<Overlap> {
    if references.is_empty() {
        return Err(Error::Empty("references"));
    }
    if hypothesis.is_empty() {
        return Ok(Overlap { bleu_1: 0.0, bleu_2: 0.0, rouge_1: 0.0, rouge_2: 0.0, rouge_l: 0.0 });
    }
    let (bleu_1, bleu_2) = corpus_bleu(&[(hypothesis, references)]);
    let best = |f: &dyn Fn(&[T]) -> f64| references.iter().map(|r| f(r.as_ref())).fold(0.0, f64::max);
    Ok(Overlap {
        bleu_1,
        bleu_2,
        rouge_1: best(&|r| rouge_n(hypothesis, r, 1)),
        rouge_2: best(&|r| rouge_n(hypothesis, r, 2)),
        rouge_l: best(&|r| rouge_l(hypothesis, r)),
    })
}
