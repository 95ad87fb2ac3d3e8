//! Automatic evaluation: n-gram diversity, reference overlap and the
//! one-to-many ratios over repeated generations.

mod log;
mod overlap;

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use log::{read_generation_log, write_generation_log, CaseGenerations, GenerationLog, Grounding, Repetition};
pub use overlap::{corpus_bleu, reference_overlap, Overlap};

fn ngrams<T>(seq: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    seq.windows(n.max(1)).filter(move |_| n > 0)
}

/// Unique n-grams over total n-grams, pooled across `responses`.
pub fn distinct_n<T: Eq + Hash, R: AsRef<[T]>>(responses: &[R], n: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r.as_ref(), n) {
            seen.insert(g);
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

/// Natural-log Shannon entropy of the pooled n-gram frequencies.
pub fn entropy_n<T: Eq + Hash, R: AsRef<[T]>>(responses: &[R], n: usize) -> f64 {
    let mut counts: HashMap<&[T], usize> = HashMap::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r.as_ref(), n) {
            *counts.entry(g).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let mut freqs: Vec<f64> = counts.values().map(|&c| c as f64 / t).collect();
    freqs.sort_by(f64::total_cmp);
    (-freqs.iter().map(|f| f * f.ln()).sum::<f64>()).max(0.0)
}

/// A metric value, or the reason it could not be computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metric {
    Value(f64),
    Absent { absent: String },
}

impl Metric {
    pub fn absent(reason: impl Into<String>) -> Self {
        Metric::Absent { absent: reason.into() }
    }

    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Absent { .. } => None,
        }
    }
}

/// `(intra, inter)`: the mean per-case distinct-n of the repetitions, and
/// distinct-n over every generation in the log.
pub fn intra_inter_dist(log: &GenerationLog, n: usize) -> Result<(Metric, f64)> {
    let reps = log.repetition_count()?;
    let pooled: Vec<&Vec<String>> = log.all_generations().collect();
    let inter = distinct_n(&pooled, n);
    if reps < 2 {
        return Ok((Metric::absent("intra-dist needs at least 2 repetitions per case"), inter));
    }
    let intra = log
        .cases
        .iter()
        .map(|c| {
            let rs: Vec<&Vec<String>> = c.repetitions.iter().map(|r| &r.tokens).collect();
            distinct_n(&rs, n)
        })
        .sum::<f64>()
        / log.cases.len() as f64;
    Ok((Metric::Value(intra), inter))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct One2ManyRatios {
    pub unique_grounding_ratio: f64,
    pub unique_generation_ratio: f64,
    /// Unique generation ratio over unique grounding ratio.
    pub effect_of_grounding: f64,
}

pub fn one2many_ratios(log: &GenerationLog) -> Result<One2ManyRatios> {
    let reps = log.repetition_count()?;
    if reps < 2 {
        return Err(Error::Precondition("one-to-many ratios need at least 2 repetitions per case".into()));
    }
    // every case has `reps` repetitions, so the mean of per-case ratios is a ratio of totals
    let (mut grounding, mut generation) = (0usize, 0usize);
    for c in &log.cases {
        grounding += c.repetitions.iter().map(|r| &r.grounding).collect::<HashSet<_>>().len();
        generation += c.repetitions.iter().map(|r| &r.tokens).collect::<HashSet<_>>().len();
    }
    let total = (log.cases.len() * reps) as f64;
    Ok(One2ManyRatios {
        unique_grounding_ratio: grounding as f64 / total,
        unique_generation_ratio: generation as f64 / total,
        effect_of_grounding: generation as f64 / grounding as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub bleu_1: Metric,
    pub bleu_2: Metric,
    pub rouge_1: Metric,
    pub rouge_2: Metric,
    pub rouge_l: Metric,
    pub entropy_1: Metric,
    pub entropy_2: Metric,
    pub intra_dist_1: Metric,
    pub intra_dist_2: Metric,
    pub inter_dist_1: Metric,
    pub inter_dist_2: Metric,
    pub unique_grounding_ratio: Metric,
    pub unique_generation_ratio: Metric,
    pub effect_of_grounding: Metric,
}

/// Every metric over a log. `references` maps case ids to their observed
/// responses; without it the overlap metrics are absent.
pub fn evaluate_log(log: &GenerationLog, references: Option<&HashMap<String, Vec<Vec<String>>>>) -> Result<MetricsReport> {
    let reps = log.repetition_count()?;
    let pooled: Vec<&Vec<String>> = log.all_generations().collect();
    let (intra_1, inter_1) = intra_inter_dist(log, 1)?;
    let (intra_2, inter_2) = intra_inter_dist(log, 2)?;

    let overlap: [Metric; 5] = match references {
        None => std::array::from_fn(|_| Metric::absent("no references supplied")),
        Some(refs) => {
            let mut pairs = Vec::with_capacity(pooled.len());
            for c in &log.cases {
                let r = refs
                    .get(&c.case_id)
                    .filter(|r| !r.is_empty())
                    .ok_or_else(|| Error::Precondition(format!("no references for case {}", c.case_id)))?;
                for rep in &c.repetitions {
                    pairs.push((rep.tokens.as_slice(), r.as_slice()));
                }
            }
            let (b1, b2) = corpus_bleu(&pairs);
            let n = pairs.len() as f64;
            let mut sums = [0.0; 3];
            for (h, r) in &pairs {
                let o = reference_overlap(h, r)?;
                sums[0] += o.rouge_1;
                sums[1] += o.rouge_2;
                sums[2] += o.rouge_l;
            }
            [Metric::Value(b1), Metric::Value(b2), Metric::Value(sums[0] / n), Metric::Value(sums[1] / n), Metric::Value(sums[2] / n)]
        }
    };
    let [bleu_1, bleu_2, rouge_1, rouge_2, rouge_l] = overlap;

    let (ug, ugen, eff) = if reps >= 2 {
        let r = one2many_ratios(log)?;
        (Metric::Value(r.unique_grounding_ratio), Metric::Value(r.unique_generation_ratio), Metric::Value(r.effect_of_grounding))
    } else {
        let why = "one-to-many ratios need at least 2 repetitions per case";
        (Metric::absent(why), Metric::absent(why), Metric::absent(why))
    };

    Ok(MetricsReport {
        bleu_1,
        bleu_2,
        rouge_1,
        rouge_2,
        rouge_l,
        entropy_1: Metric::Value(entropy_n(&pooled, 1)),
        entropy_2: Metric::Value(entropy_n(&pooled, 2)),
        intra_dist_1: intra_1,
        intra_dist_2: intra_2,
        inter_dist_1: Metric::Value(inter_1),
        inter_dist_2: Metric::Value(inter_2),
        unique_grounding_ratio: ug,
        unique_generation_ratio: ugen,
        effect_of_grounding: eff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn log_of(cases: &[&[(Grounding, &str)]]) -> GenerationLog {
        GenerationLog {
            cases: cases
                .iter()
                .enumerate()
                .map(|(i, reps)| CaseGenerations {
                    case_id: format!("c{i}"),
                    repetitions: reps.iter().map(|(g, t)| Repetition { grounding: *g, tokens: w(t) }).collect(),
                })
                .collect(),
        }
    }

    fn span(s: usize) -> Grounding {
        Grounding::Span { start: s, end: s + 1 }
    }

    #[test]
    fn distinct_hand_counts() {
        assert!((distinct_n(&[w("a a b")], 1) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct_n(&[w("a b c"), w("a b c")], 1), 0.5);
        assert_eq!(distinct_n(&[w("a b"), w("c d")], 1), 1.0);
        assert_eq!(distinct_n(&[w("a")], 2), 0.0);
    }

    #[test]
    fn entropy_hand_values() {
        assert_eq!(entropy_n(&[w("a a a")], 1), 0.0);
        assert!((entropy_n(&[w("a b c d")], 1) - 4f64.ln()).abs() < 1e-12);
        assert!((entropy_n(&[w("a a b c")], 1) - 1.0397207708399179).abs() < 1e-12);
        assert_eq!(entropy_n::<String, Vec<String>>(&[], 1), 0.0);
    }

    #[test]
    fn intra_and_inter_on_a_two_case_fixture() {
        let log = log_of(&[&[(span(0), "a b"), (span(0), "a b")], &[(span(0), "c d"), (span(0), "c d")]]);
        let (intra, inter) = intra_inter_dist(&log, 1).unwrap();
        assert_eq!(intra.value(), Some(0.5));
        assert_eq!(inter, 0.5);
        let one = log_of(&[&[(span(0), "x"), (span(1), "y")]]);
        let (intra, inter) = intra_inter_dist(&one, 1).unwrap();
        assert_eq!(intra.value(), Some(inter));
        let same = log_of(&[&[(span(0), "z"), (span(0), "z")], &[(span(0), "z"), (span(0), "z")]]);
        assert_eq!(intra_inter_dist(&same, 1).unwrap().1, 0.25);
        let single = log_of(&[&[(span(0), "z")]]);
        assert!(intra_inter_dist(&single, 1).unwrap().0.value().is_none());
    }

    #[test]
    fn two_unique_groundings_in_five_is_forty_percent() {
        let log = log_of(&[&[(span(0), "a"), (span(0), "b"), (span(3), "c"), (span(3), "c"), (span(0), "c")]]);
        let r = one2many_ratios(&log).unwrap();
        assert!((r.unique_grounding_ratio - 0.4).abs() < 1e-15);
        assert!((r.unique_generation_ratio - 0.6).abs() < 1e-15);
    }

    #[test]
    fn identical_repetitions_give_unit_effect() {
        let log = log_of(&[&[(span(2), "a b"); 4]]);
        let r = one2many_ratios(&log).unwrap();
        assert_eq!(r.unique_grounding_ratio, 0.25);
        assert_eq!(r.unique_generation_ratio, 0.25);
        assert_eq!(r.effect_of_grounding, 1.0);
    }

    #[test]
    fn report_marks_missing_metrics_with_reasons() {
        let log = log_of(&[&[(span(0), "a b")]]);
        let report = evaluate_log(&log, None).unwrap();
        let v = serde_json::to_value(&report).unwrap();
        assert_eq!(v.as_object().unwrap().len(), 14);
        assert!(v["bleu_1"]["absent"].is_string());
        assert!(v["unique_grounding_ratio"]["absent"].is_string());
        assert!(v["inter_dist_1"].is_number());
        let refs = HashMap::from([("c0".to_string(), vec![w("a b")])]);
        let report = evaluate_log(&log, Some(&refs)).unwrap();
        assert_eq!(report.bleu_1.value(), Some(1.0));
        assert_eq!(report.rouge_l.value(), Some(1.0));
    }

    fn arb_log() -> impl Strategy<Value = GenerationLog> {
        (1usize..4, 1usize..5).prop_flat_map(|(cases, reps)| {
            proptest::collection::vec(
                proptest::collection::vec(((0usize..3), proptest::collection::vec(0u8..4, 0..5)), reps..=reps),
                cases..=cases,
            )
            .prop_map(|cs| GenerationLog {
                cases: cs
                    .into_iter()
                    .enumerate()
                    .map(|(i, reps)| CaseGenerations {
                        case_id: format!("p{i}"),
                        repetitions: reps
                            .into_iter()
                            .map(|(g, t)| Repetition { grounding: span(g), tokens: t.iter().map(|x| format!("t{x}")).collect() })
                            .collect(),
                    })
                    .collect(),
            })
        })
    }

    proptest! {
        #[test]
        fn metrics_stay_in_range_and_ignore_order(log in arb_log()) {
            let report = evaluate_log(&log, None).unwrap();
            for m in [&report.intra_dist_1, &report.intra_dist_2, &report.inter_dist_1, &report.inter_dist_2,
                      &report.unique_grounding_ratio, &report.unique_generation_ratio] {
                if let Some(v) = m.value() { prop_assert!((0.0..=1.0).contains(&v)); }
            }
            prop_assert!(report.entropy_1.value().unwrap() >= 0.0);
            prop_assert!(report.entropy_2.value().unwrap() >= 0.0);

            let mut shuffled = log.clone();
            shuffled.cases.reverse();
            for c in &mut shuffled.cases { c.repetitions.reverse(); }
            let again = evaluate_log(&shuffled, None).unwrap();
            let close = |a: &Metric, b: &Metric| match (a.value(), b.value()) {
                (Some(x), Some(y)) => (x - y).abs() < 1e-12,
                (None, None) => true,
                _ => false,
            };
            prop_assert!(close(&report.intra_dist_1, &again.intra_dist_1));
            prop_assert!(close(&report.inter_dist_2, &again.inter_dist_2));
            prop_assert!(close(&report.entropy_2, &again.entropy_2));
            prop_assert!(close(&report.unique_grounding_ratio, &again.unique_grounding_ratio));
            prop_assert!(close(&report.effect_of_grounding, &again.effect_of_grounding));
        }
    }
}
