//! Beam search with repetition penalty and length bounds.

use serde::{Deserialize, Serialize};

use super::model::{GenState, ModelParams};
use super::tensor::log_softmax;
use super::vocab::EOS;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Minimum number of generated tokens before the end token is allowed.
    pub min_len: usize,
    /// The end token is forced once this many tokens have been generated.
    pub max_len: usize,
    pub repetition_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_width: 2, min_len: 10, max_len: 30, repetition_penalty: 2.0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("decode.beam_width must be at least 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "decode length bounds must satisfy 0 < min_len <= max_len, got [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if !(self.repetition_penalty >= 1.0) || !self.repetition_penalty.is_finite() {
            return Err(Error::Config("decode.repetition_penalty must be finite and >= 1".into()));
        }
        Ok(())
    }
}

/// An autoregressive scorer that can be advanced one token at a time.
pub trait StepModel {
    type State: Clone;

    /// State after the conditioning prefix, with logits for the first token.
    fn start(&self) -> Result<(Self::State, Vec<f64>)>;

    /// Consumes `token` and returns logits for the following position.
    fn advance(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;

    fn eos(&self) -> usize;
}

/// Adjusts raw logits for the penalty and length bounds at step `t`.
/// Positive logits of already generated tokens are divided by the penalty and
/// negative ones multiplied.
pub fn constrained_log_probs(logits: &[f64], generated: &[usize], t: usize, eos: usize, config: &DecodeConfig) -> Vec<f64> {
    let mut l = logits.to_vec();
    if config.repetition_penalty != 1.0 {
        let mut seen = vec![false; l.len()];
        for &tok in generated {
            if tok < l.len() && !seen[tok] {
                seen[tok] = true;
                let v = l[tok];
                l[tok] = if v > 0.0 { v / config.repetition_penalty } else { v * config.repetition_penalty };
            }
        }
    }
    if t >= config.max_len {
        for (i, v) in l.iter_mut().enumerate() {
            if i != eos {
                *v = f64::NEG_INFINITY;
            }
        }
        l[eos] = 0.0;
    } else if t < config.min_len {
        l[eos] = f64::NEG_INFINITY;
    }
    log_softmax(&l)
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<usize>,
    score: f64,
    state: S,
    logits: Vec<f64>,
}

/// A finished hypothesis: generated tokens (without the end token) and its
/// cumulative constrained log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub score: f64,
}

/// Beam search returning the highest-scoring finished hypothesis.
///
/// At each step every live beam is expanded by every allowed token and the
/// best `beam_width` candidates survive; candidates ending in the end token
/// are moved to the finished list. Ties are broken by the token sequence.
pub fn beam_search<M: StepModel>(model: &M, config: &DecodeConfig) -> Result<Decoded> {
    config.validate()?;
    let eos = model.eos();
    let (state, logits) = model.start()?;
    let mut live = vec![Hyp { tokens: Vec::new(), score: 0.0, state, logits }];
    let mut finished: Vec<Decoded> = Vec::new();
    for t in 0..=config.max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            if hyp.logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("decoder logits"));
            }
            let lp = constrained_log_probs(&hyp.logits, &hyp.tokens, t, eos, config);
            for (tok, &v) in lp.iter().enumerate() {
                if v > f64::NEG_INFINITY {
                    cands.push((hyp.score + v, b, tok));
                }
            }
        }
        cands.sort_by(|x, y| {
            y.0.total_cmp(&x.0).then_with(|| {
                let mut a = live[x.1].tokens.clone();
                a.push(x.2);
                let mut c = live[y.1].tokens.clone();
                c.push(y.2);
                a.cmp(&c)
            })
        });
        cands.truncate(config.beam_width);
        let mut next = Vec::with_capacity(cands.len());
        for (score, b, tok) in cands {
            let parent = &live[b];
            if tok == eos {
                finished.push(Decoded { tokens: parent.tokens.clone(), score });
                continue;
            }
            let mut state = parent.state.clone();
            let logits = model.advance(&mut state, tok)?;
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            next.push(Hyp { tokens, score, state, logits });
        }
        live = next;
        let best_finished = finished.iter().map(|d| d.score).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || best_finished > best_live {
            break;
        }
    }
    finished
        .into_iter()
        .min_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens)))
        .ok_or(Error::NonFinite("beam search finished no hypothesis"))
}

/// The generator conditioned on one `(context, span)` pair.
pub struct GeneratorStep<'a> {
    pub model: &'a ModelParams,
    pub context: &'a [usize],
    pub span: &'a [usize],
}

impl StepModel for GeneratorStep<'_> {
    type State = GenState;

    fn start(&self) -> Result<(GenState, Vec<f64>)> {
        self.model.generator_session(self.context, self.span)
    }

    fn advance(&self, state: &mut GenState, token: usize) -> Result<Vec<f64>> {
        self.model.generator_advance(state, token)
    }

    fn eos(&self) -> usize {
        EOS
    }
}

impl ModelParams {
    /// Decodes a response for `(context, span)` given as token ids.
    pub fn generator_decode_ids(&self, context: &[usize], span: &[usize], config: &DecodeConfig) -> Result<Vec<usize>> {
        config.validate()?;
        let prefix = context.len() + span.len() + 2;
        if prefix + config.max_len > self.config.max_len {
            return Err(Error::LengthBound { len: prefix + config.max_len, max: self.config.max_len });
        }
        Ok(beam_search(&GeneratorStep { model: self, context, span }, config)?.tokens)
    }

    pub fn generator_decode(
        &self,
        context: &[crate::corpus::Tokens],
        span: &[String],
        config: &DecodeConfig,
    ) -> Result<crate::corpus::Tokens> {
        let c = self.encode(&super::model::flatten_context(context));
        let ids = self.generator_decode_ids(&c, &self.encode(span), config)?;
        Ok(self.vocab.decode(&ids))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::model::ModelConfig;
    use crate::neural::vocab::Vocab;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    /// Logits are a fixed random function of the whole prefix.
    struct Table {
        vocab: usize,
        seed: u64,
    }

    impl StepModel for Table {
        type State = Vec<usize>;

        fn start(&self) -> Result<(Vec<usize>, Vec<f64>)> {
            Ok((Vec::new(), self.logits(&[])))
        }

        fn advance(&self, state: &mut Vec<usize>, token: usize) -> Result<Vec<f64>> {
            state.push(token);
            Ok(self.logits(state))
        }

        fn eos(&self) -> usize {
            0
        }
    }

    impl Table {
        fn logits(&self, prefix: &[usize]) -> Vec<f64> {
            let mut h = self.seed;
            for &t in prefix {
                h = h.wrapping_mul(6364136223846793005).wrapping_add(t as u64 + 1);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect()
        }
    }

    /// Every admissible complete sequence with its score.
    fn enumerate(m: &Table, config: &DecodeConfig) -> Vec<Decoded> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::new(), 0.0)];
        while let Some((prefix, score)) = stack.pop() {
            let mut s = Vec::new();
            let mut logits = m.start().unwrap().1;
            for &t in &prefix {
                logits = m.advance(&mut s, t).unwrap();
            }
            let lp = constrained_log_probs(&logits, &prefix, prefix.len(), 0, config);
            for (tok, &v) in lp.iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                if tok == 0 {
                    out.push(Decoded { tokens: prefix.clone(), score: score + v });
                } else {
                    let mut p = prefix.clone();
                    p.push(tok);
                    stack.push((p, score + v));
                }
            }
        }
        out
    }

    /// Level-wise top-k selection over the enumerated prefix tree.
    fn levelwise_oracle(m: &Table, config: &DecodeConfig) -> Decoded {
        let all_prefix_scores = {
            let mut map: HashMap<Vec<usize>, f64> = HashMap::new();
            let mut stack = vec![(Vec::<usize>::new(), 0.0)];
            while let Some((p, sc)) = stack.pop() {
                map.insert(p.clone(), sc);
                if p.len() >= config.max_len {
                    continue;
                }
                let mut s = Vec::new();
                let mut logits = m.start().unwrap().1;
                for &t in &p {
                    logits = m.advance(&mut s, t).unwrap();
                }
                let lp = constrained_log_probs(&logits, &p, p.len(), 0, config);
                for tok in 1..lp.len() {
                    if lp[tok] > f64::NEG_INFINITY {
                        let mut q = p.clone();
                        q.push(tok);
                        stack.push((q, sc + lp[tok]));
                    }
                }
            }
            map
        };
        let complete: HashMap<Vec<usize>, f64> = enumerate(m, config).into_iter().map(|d| (d.tokens, d.score)).collect();
        let mut kept: Vec<Vec<usize>> = vec![Vec::new()];
        let mut finished: Vec<Decoded> = Vec::new();
        for _ in 0..=config.max_len {
            let mut cands: Vec<(f64, Vec<usize>, bool)> = Vec::new();
            for p in &kept {
                if let Some(&s) = complete.get(p) {
                    cands.push((s, p.clone(), true));
                }
                for (q, &s) in &all_prefix_scores {
                    if q.len() == p.len() + 1 && q.starts_with(p) {
                        cands.push((s, q.clone(), false));
                    }
                }
            }
            cands.sort_by(|a, b| {
                let mut ka = a.1.clone();
                if a.2 {
                    ka.push(0);
                }
                let mut kb = b.1.clone();
                if b.2 {
                    kb.push(0);
                }
                b.0.total_cmp(&a.0).then(ka.cmp(&kb))
            });
            cands.truncate(config.beam_width);
            kept = Vec::new();
            for (s, p, done) in cands {
                if done {
                    finished.push(Decoded { tokens: p, score: s });
                } else {
                    kept.push(p);
                }
            }
            if kept.is_empty() {
                break;
            }
        }
        finished.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.tokens.cmp(&b.tokens)));
        finished.remove(0)
    }

    fn cfg(beam: usize, min: usize, max: usize, pen: f64) -> DecodeConfig {
        DecodeConfig { beam_width: beam, min_len: min, max_len: max, repetition_penalty: pen }
    }

    #[test]
    fn defaults_and_validation() {
        let d = DecodeConfig::default();
        assert_eq!((d.beam_width, d.min_len, d.max_len, d.repetition_penalty), (2, 10, 30, 2.0));
        assert!(cfg(0, 1, 2, 1.0).validate().is_err());
        assert!(cfg(1, 0, 2, 1.0).validate().is_err());
        assert!(cfg(1, 3, 2, 1.0).validate().is_err());
        assert!(cfg(1, 1, 2, 0.5).validate().is_err());
    }

    #[test]
    fn greedy_on_constant_argmax_repeats_until_forced_end() {
        struct Constant;
        impl StepModel for Constant {
            type State = ();
            fn start(&self) -> Result<((), Vec<f64>)> {
                Ok(((), vec![0.0, 0.0, 5.0, 1.0]))
            }
            fn advance(&self, _: &mut (), _: usize) -> Result<Vec<f64>> {
                Ok(vec![0.0, 0.0, 5.0, 1.0])
            }
            fn eos(&self) -> usize {
                0
            }
        }
        let out = beam_search(&Constant, &cfg(1, 2, 6, 1.0)).unwrap();
        assert_eq!(out.tokens, vec![2; 6]);
    }

    #[test]
    fn wide_beam_equals_exhaustive_argmax() {
        for seed in 0..20 {
            let m = Table { vocab: 5, seed };
            let c = cfg(5usize.pow(4), 1, 4, 1.0);
            let best = enumerate(&m, &c).into_iter().max_by(|a, b| a.score.total_cmp(&b.score)).unwrap();
            let got = beam_search(&m, &c).unwrap();
            assert_eq!(got.tokens, best.tokens, "seed {seed}");
            assert!((got.score - best.score).abs() < 1e-12);
        }
    }

    #[test]
    fn width_two_matches_levelwise_oracle_over_all_sequences() {
        for seed in 0..30 {
            for pen in [1.0, 2.0] {
                let m = Table { vocab: 5, seed };
                let c = cfg(2, 1, 4, pen);
                let got = beam_search(&m, &c).unwrap();
                let want = levelwise_oracle(&m, &c);
                assert_eq!(got.tokens, want.tokens, "seed {seed} penalty {pen}");
                let exhaustive_best = enumerate(&m, &c).into_iter().map(|d| d.score).fold(f64::NEG_INFINITY, f64::max);
                assert!(got.score <= exhaustive_best + 1e-12);
            }
        }
    }

    #[test]
    fn length_bounds_are_respected() {
        for seed in 0..10 {
            let m = Table { vocab: 5, seed };
            let out = beam_search(&m, &cfg(2, 3, 5, 2.0)).unwrap();
            assert!((3..=5).contains(&out.tokens.len()));
            assert!(!out.tokens.contains(&0));
        }
    }

    #[test]
    fn penalty_divides_positive_and_multiplies_negative_logits() {
        let lp = constrained_log_probs(&[0.0, 2.0, -1.0], &[1, 2, 1], 5, 0, &cfg(1, 1, 10, 2.0));
        let want = log_softmax(&[0.0, 1.0, -2.0]);
        for (a, b) in lp.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn tiny_model() -> ModelParams {
        let words: Vec<String> = "a b c d e f g".split(' ').map(String::from).collect();
        let config = ModelConfig { d: 8, heads: 2, ffn_mult: 2, max_len: 64, init_seed: 3, ..Default::default() };
        ModelParams::new(config, Vocab::from_tokens(&words)).unwrap()
    }

    #[test]
    fn greedy_decode_is_locally_optimal_under_nll() {
        let m = tiny_model();
        let (c, s) = (vec![4, 5], vec![6, 7]);
        let config = cfg(1, 1, 8, 1.0);
        let out = m.generator_decode_ids(&c, &s, &config).unwrap();
        let steps = m.stepwise_log_probs(&c, &s, &out).unwrap();
        for t in 0..out.len() {
            for alt in 0..m.vocab.len() {
                if alt == out[t] || alt == EOS {
                    continue;
                }
                let mut pert = out.clone();
                pert[t] = alt;
                let alt_steps = m.stepwise_log_probs(&c, &s, &pert).unwrap();
                assert!(-steps[t] <= -alt_steps[t] + 1e-12);
            }
        }
        assert_eq!(out, m.generator_decode_ids(&c, &s, &config).unwrap());
    }

    #[test]
    fn decoding_rejects_overlong_requests() {
        let m = tiny_model();
        assert!(matches!(m.generator_decode_ids(&[4; 40], &[5], &cfg(1, 1, 30, 1.0)), Err(Error::LengthBound { .. })));
    }
}
