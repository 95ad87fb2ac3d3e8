//! The five trainable components over a shared embedding table.
//!
//! Parameter names are grouped by prefix so that training phases can freeze
//! whole components: `embed.`, `prior.`, `post.`, `gen.`, `disc.`, `gnd.`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::layers::{block, block_step, init_block, init_norm, norm, norm_infer, BlockCache};
use super::params::ParamStore;
use super::tensor::{log_softmax, sigmoid, Tensor};
use super::vocab::{Vocab, CLS, EOS, SEP};
use crate::corpus::Tokens;
use crate::error::{Error, Result};

const SEG_CONTEXT: usize = 0;
const SEG_RESPONSE: usize = 1;
const SEG_KNOWLEDGE: usize = 2;
const SEG_SPAN: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub prior_layers: usize,
    pub posterior_layers: usize,
    pub generator_layers: usize,
    pub discriminator_layers: usize,
    pub grounding_layers: usize,
    /// Longest token sequence any component accepts.
    pub max_len: usize,
    /// Diagnostic switch; without positions every encoder is permutation-equivariant.
    pub positional: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 2,
            ffn_mult: 4,
            prior_layers: 2,
            posterior_layers: 3,
            generator_layers: 2,
            discriminator_layers: 2,
            grounding_layers: 2,
            max_len: 512,
            positional: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.ffn_mult == 0 || self.max_len < 8 {
            return fail("ffn_mult must be positive and max_len at least 8".into());
        }
        if [self.prior_layers, self.posterior_layers, self.generator_layers, self.discriminator_layers, self.grounding_layers].contains(&0)
        {
            return fail("every component needs at least one layer".into());
        }
        Ok(())
    }
}

/// Parameter groups, one per component plus the shared embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Embedding,
    Prior,
    Posterior,
    Generator,
    Discriminator,
    Grounding,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Embedding,
        Component::Prior,
        Component::Posterior,
        Component::Generator,
        Component::Discriminator,
        Component::Grounding,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            Component::Embedding => "embed.",
            Component::Prior => "prior.",
            Component::Posterior => "post.",
            Component::Generator => "gen.",
            Component::Discriminator => "disc.",
            Component::Grounding => "gnd.",
        }
    }
}

/// Reader outputs as nodes of a graph. Logits are `1 × l_K` rows.
#[derive(Clone, Copy, Debug)]
pub struct ReaderVars {
    pub context_summary: Var,
    pub knowledge_states: Var,
    pub start_logits: Var,
    pub end_logits: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EncoderOutput {
    pub context_summary: Vec<f64>,
    pub knowledge_states: Tensor,
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
}

/// Concatenated context utterances.
pub fn flatten_context(context: &[Tokens]) -> Tokens {
    context.iter().flatten().cloned().collect()
}

impl ModelParams {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let d = config.d;
        let ffn = d * config.ffn_mult;
        let v = vocab.len();
        let mut s = ParamStore::default();
        s.insert_random("embed.tok", v, d, 0.5, &mut rng);
        s.insert_random("embed.pos", config.max_len, d, 0.1, &mut rng);
        s.insert_random("embed.seg", 4, d, 0.1, &mut rng);

        let a = (1.0 / d as f64).sqrt();
        for (prefix, layers) in [("prior", config.prior_layers), ("post", config.posterior_layers)] {
            for i in 0..layers {
                init_block(&mut s, &format!("{prefix}.b{i}"), d, ffn, &mut rng);
            }
            init_norm(&mut s, &format!("{prefix}.ln_f"), d);
            for head in ["start", "end"] {
                s.insert_random(&format!("{prefix}.{head}.w1"), 2 * d, d, (0.5 / d as f64).sqrt(), &mut rng);
                s.insert_const(&format!("{prefix}.{head}.b1"), 1, d, 0.0);
                s.insert_random(&format!("{prefix}.{head}.w2"), 1, d, a, &mut rng);
            }
        }
        for i in 0..config.generator_layers {
            init_block(&mut s, &format!("gen.b{i}"), d, ffn, &mut rng);
        }
        init_norm(&mut s, "gen.ln_f", d);
        s.insert_random("gen.out.w", d, v, a, &mut rng);
        s.insert_const("gen.out.b", 1, v, 0.0);

        for i in 0..config.discriminator_layers {
            init_block(&mut s, &format!("disc.b{i}"), d, ffn, &mut rng);
        }
        init_norm(&mut s, "disc.ln_f", d);
        s.insert_random("disc.out.w", d, 1, a, &mut rng);
        s.insert_const("disc.out.b", 1, 1, 0.0);

        for i in 0..config.grounding_layers {
            init_block(&mut s, &format!("gnd.b{i}"), d, ffn, &mut rng);
        }
        init_norm(&mut s, "gnd.ln_f", d);
        s.insert_random("gnd.h.w", d, d, a, &mut rng);
        s.insert_const("gnd.h.b", 1, d, 0.0);
        s.insert_random("gnd.out.w", d, 1, a, &mut rng);
        s.insert_const("gnd.out.b", 1, 1, 0.0);

        Ok(Self { config, vocab, params: s })
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        self.vocab.encode(tokens)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::LengthBound { len, max: self.config.max_len });
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], segs: &[usize]) -> Var {
        let tok = g.param("embed.tok");
        let seg = g.param("embed.seg");
        let x = g.gather(tok, ids);
        let s = g.gather(seg, segs);
        let x = g.add(x, s);
        if self.config.positional {
            let pos = g.param("embed.pos");
            let positions: Vec<usize> = (0..ids.len()).collect();
            let p = g.gather(pos, &positions);
            g.add(x, p)
        } else {
            x
        }
    }

    fn embed_one(&self, id: usize, pos: usize, seg: usize) -> Vec<f64> {
        let s = &self.params;
        let mut x = s.get("embed.tok").row(id).to_vec();
        for (o, v) in x.iter_mut().zip(s.get("embed.seg").row(seg)) {
            *o += v;
        }
        if self.config.positional {
            for (o, v) in x.iter_mut().zip(s.get("embed.pos").row(pos)) {
                *o += v;
            }
        }
        x
    }

    fn encoder(&self, g: &mut Graph, ids: &[usize], segs: &[usize], prefix: &str, layers: usize, causal: bool) -> Var {
        let mut x = self.embed(g, ids, segs);
        for i in 0..layers {
            x = block(g, x, &format!("{prefix}.b{i}"), self.config.heads, causal);
        }
        norm(g, x, &format!("{prefix}.ln_f"))
    }

    fn span_scorer(g: &mut Graph, summary: Var, states: Var, prefix: &str) -> Var {
        let n = g.value(states).rows;
        let h = g.broadcast_rows(summary, n);
        let x = g.concat_cols(&[h, states]);
        let w1 = g.param(&format!("{prefix}.w1"));
        let b1 = g.param(&format!("{prefix}.b1"));
        let w2 = g.param(&format!("{prefix}.w2"));
        let z = g.matmul(x, w1);
        let z = g.add_row(z, b1);
        let z = g.tanh(z);
        g.matmul_t(w2, z)
    }

    /// Shared reader body: `lead` tokens are pooled into the summary and
    /// `knowledge` rows are scored.
    fn read(
        &self,
        g: &mut Graph,
        lead: &[(usize, usize)],
        pooled: usize,
        knowledge: &[usize],
        prefix: &str,
        layers: usize,
    ) -> Result<ReaderVars> {
        if knowledge.is_empty() {
            return Err(Error::Empty("knowledge"));
        }
        let mut ids: Vec<usize> = lead.iter().map(|p| p.0).collect();
        let mut segs: Vec<usize> = lead.iter().map(|p| p.1).collect();
        ids.extend_from_slice(knowledge);
        segs.extend(std::iter::repeat_n(SEG_KNOWLEDGE, knowledge.len()));
        self.check_len(ids.len())?;
        let h = self.encoder(g, &ids, &segs, prefix, layers, false);
        let pool = g.slice_rows(h, 0, pooled.max(1));
        let summary = g.mean_rows(pool);
        let k = g.slice_rows(h, lead.len(), knowledge.len());
        let start = Self::span_scorer(g, summary, k, &format!("{prefix}.start"));
        let end = Self::span_scorer(g, summary, k, &format!("{prefix}.end"));
        Ok(ReaderVars { context_summary: summary, knowledge_states: k, start_logits: start, end_logits: end })
    }

    /// Prior reader over `[context; SEP; knowledge]`, pooling the context rows.
    pub fn prior_graph(&self, g: &mut Graph, context: &[usize], knowledge: &[usize]) -> Result<ReaderVars> {
        let mut lead: Vec<(usize, usize)> = context.iter().map(|&t| (t, SEG_CONTEXT)).collect();
        lead.push((SEP, SEG_CONTEXT));
        self.read(g, &lead, context.len(), knowledge, "prior", self.config.prior_layers)
    }

    /// Posterior reader over `[context; SEP; response; knowledge]`, pooling
    /// the context and response rows.
    pub fn posterior_graph(&self, g: &mut Graph, context: &[usize], response: &[usize], knowledge: &[usize]) -> Result<ReaderVars> {
        if response.is_empty() {
            return Err(Error::Empty("response"));
        }
        let mut lead: Vec<(usize, usize)> = context.iter().map(|&t| (t, SEG_CONTEXT)).collect();
        lead.push((SEP, SEG_CONTEXT));
        lead.extend(response.iter().map(|&t| (t, SEG_RESPONSE)));
        self.read_pooling(g, &lead, context.len(), knowledge)
    }

    fn read_pooling(&self, g: &mut Graph, lead: &[(usize, usize)], context_len: usize, knowledge: &[usize]) -> Result<ReaderVars> {
        if knowledge.is_empty() {
            return Err(Error::Empty("knowledge"));
        }
        let mut ids: Vec<usize> = lead.iter().map(|p| p.0).collect();
        let mut segs: Vec<usize> = lead.iter().map(|p| p.1).collect();
        ids.extend_from_slice(knowledge);
        segs.extend(std::iter::repeat_n(SEG_KNOWLEDGE, knowledge.len()));
        self.check_len(ids.len())?;
        let layers = self.config.posterior_layers;
        let h = self.encoder(g, &ids, &segs, "post", layers, false);
        let ctx = g.slice_rows(h, 0, context_len.max(1));
        let resp = g.slice_rows(h, context_len + 1, lead.len() - context_len - 1);
        let pooled = if context_len == 0 { resp } else { g.concat_rows(&[ctx, resp]) };
        let summary = g.mean_rows(pooled);
        let k = g.slice_rows(h, lead.len(), knowledge.len());
        let start = Self::span_scorer(g, summary, k, "post.start");
        let end = Self::span_scorer(g, summary, k, "post.end");
        Ok(ReaderVars { context_summary: summary, knowledge_states: k, start_logits: start, end_logits: end })
    }

    fn generator_prefix(context: &[usize], span: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut ids = context.to_vec();
        let mut segs = vec![SEG_CONTEXT; context.len()];
        ids.push(SEP);
        segs.push(SEG_CONTEXT);
        ids.extend_from_slice(span);
        segs.extend(std::iter::repeat_n(SEG_SPAN, span.len()));
        ids.push(SEP);
        segs.push(SEG_SPAN);
        (ids, segs)
    }

    /// Teacher-forced `−Σ ln p(r_t | C, S, r_<t)` including the end token.
    pub fn generator_nll_graph(&self, g: &mut Graph, context: &[usize], span: &[usize], response: &[usize]) -> Result<Var> {
        if response.is_empty() {
            return Err(Error::Empty("response"));
        }
        let (mut ids, mut segs) = Self::generator_prefix(context, span);
        let p = ids.len();
        ids.extend_from_slice(response);
        segs.extend(std::iter::repeat_n(SEG_RESPONSE, response.len()));
        self.check_len(ids.len())?;
        let h = self.encoder(g, &ids, &segs, "gen", self.config.generator_layers, true);
        let rows = g.slice_rows(h, p - 1, response.len() + 1);
        let w = g.param("gen.out.w");
        let b = g.param("gen.out.b");
        let logits = g.matmul(rows, w);
        let logits = g.add_row(logits, b);
        let lp = g.log_softmax_rows(logits);
        let cells: Vec<(usize, usize)> = response.iter().chain(std::iter::once(&EOS)).enumerate().map(|(t, &id)| (t, id)).collect();
        let ll = g.pick_sum(lp, &cells);
        Ok(g.scale(ll, -1.0))
    }

    fn classifier_states(&self, g: &mut Graph, ids: &[usize], segs: &[usize], prefix: &str, layers: usize) -> Result<Var> {
        self.check_len(ids.len())?;
        let h = self.encoder(g, ids, segs, prefix, layers, false);
        Ok(g.slice_rows(h, 0, 1))
    }

    /// Pre-sigmoid discriminator output for `[CLS; response]`.
    pub fn discriminator_logit_graph(&self, g: &mut Graph, response: &[usize]) -> Result<Var> {
        let mut ids = vec![CLS];
        ids.extend_from_slice(response);
        let mut segs = vec![SEG_RESPONSE; ids.len()];
        segs[0] = SEG_CONTEXT;
        let cls = self.classifier_states(g, &ids, &segs, "disc", self.config.discriminator_layers)?;
        let w = g.param("disc.out.w");
        let b = g.param("disc.out.b");
        let z = g.matmul(cls, w);
        Ok(g.add(z, b))
    }

    /// Pre-sigmoid grounding score for `[CLS; response; SEP; span]`.
    pub fn grounding_logit_graph(&self, g: &mut Graph, span: &[usize], response: &[usize]) -> Result<Var> {
        let mut ids = vec![CLS];
        let mut segs = vec![SEG_CONTEXT];
        ids.extend_from_slice(response);
        segs.extend(std::iter::repeat_n(SEG_RESPONSE, response.len()));
        ids.push(SEP);
        segs.push(SEG_RESPONSE);
        ids.extend_from_slice(span);
        segs.extend(std::iter::repeat_n(SEG_SPAN, span.len()));
        let cls = self.classifier_states(g, &ids, &segs, "gnd", self.config.grounding_layers)?;
        let w = g.param("gnd.h.w");
        let b = g.param("gnd.h.b");
        let h = g.matmul(cls, w);
        let h = g.add_row(h, b);
        let h = g.tanh(h);
        let w = g.param("gnd.out.w");
        let b = g.param("gnd.out.b");
        let z = g.matmul(h, w);
        Ok(g.add(z, b))
    }

    fn reader_output(g: &Graph, v: ReaderVars) -> EncoderOutput {
        EncoderOutput {
            context_summary: g.value(v.context_summary).data.clone(),
            knowledge_states: g.value(v.knowledge_states).clone(),
            start_logits: g.value(v.start_logits).data.clone(),
            end_logits: g.value(v.end_logits).data.clone(),
        }
    }

    pub fn prior_read_ids(&self, context: &[usize], knowledge: &[usize]) -> Result<EncoderOutput> {
        let mut g = Graph::new(&self.params);
        let v = self.prior_graph(&mut g, context, knowledge)?;
        Ok(Self::reader_output(&g, v))
    }

    pub fn posterior_read_ids(&self, context: &[usize], response: &[usize], knowledge: &[usize]) -> Result<EncoderOutput> {
        let mut g = Graph::new(&self.params);
        let v = self.posterior_graph(&mut g, context, response, knowledge)?;
        Ok(Self::reader_output(&g, v))
    }

    pub fn generator_nll_ids(&self, context: &[usize], span: &[usize], response: &[usize]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let v = self.generator_nll_graph(&mut g, context, span, response)?;
        Ok(g.value(v).item())
    }

    pub fn discriminator_score_ids(&self, response: &[usize]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let v = self.discriminator_logit_graph(&mut g, response)?;
        Ok(sigmoid(g.value(v).item()))
    }

    pub fn grounding_score_ids(&self, span: &[usize], response: &[usize]) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let v = self.grounding_logit_graph(&mut g, span, response)?;
        Ok(sigmoid(g.value(v).item()))
    }

    pub fn prior_read(&self, context: &[Tokens], knowledge: &[String]) -> Result<EncoderOutput> {
        if context.iter().all(Vec::is_empty) {
            return Err(Error::Empty("context"));
        }
        self.prior_read_ids(&self.encode(&flatten_context(context)), &self.encode(knowledge))
    }

    pub fn posterior_read(&self, context: &[Tokens], response: &[String], knowledge: &[String]) -> Result<EncoderOutput> {
        if context.iter().all(Vec::is_empty) {
            return Err(Error::Empty("context"));
        }
        self.posterior_read_ids(&self.encode(&flatten_context(context)), &self.encode(response), &self.encode(knowledge))
    }

    pub fn generator_nll(&self, context: &[Tokens], span: &[String], response: &[String]) -> Result<f64> {
        self.generator_nll_ids(&self.encode(&flatten_context(context)), &self.encode(span), &self.encode(response))
    }

    pub fn discriminator_score(&self, response: &[String]) -> Result<f64> {
        self.discriminator_score_ids(&self.encode(response))
    }

    pub fn grounding_score(&self, span: &[String], response: &[String]) -> Result<f64> {
        self.grounding_score_ids(&self.encode(span), &self.encode(response))
    }

    /// Starts incremental generation after the `[context; SEP; span; SEP]` prefix.
    pub fn generator_session(&self, context: &[usize], span: &[usize]) -> Result<(GenState, Vec<f64>)> {
        let (ids, segs) = Self::generator_prefix(context, span);
        self.check_len(ids.len())?;
        let mut state = GenState { caches: vec![BlockCache::default(); self.config.generator_layers], pos: 0 };
        let mut logits = Vec::new();
        for (&id, &seg) in ids.iter().zip(&segs) {
            logits = self.generator_step(&mut state, id, seg)?;
        }
        Ok((state, logits))
    }

    /// Feeds one response token and returns next-token logits.
    pub fn generator_advance(&self, state: &mut GenState, token: usize) -> Result<Vec<f64>> {
        self.generator_step(state, token, SEG_RESPONSE)
    }

    fn generator_step(&self, state: &mut GenState, id: usize, seg: usize) -> Result<Vec<f64>> {
        self.check_len(state.pos + 1)?;
        let mut x = self.embed_one(id.min(self.vocab.len() - 1), state.pos, seg);
        for (i, cache) in state.caches.iter_mut().enumerate() {
            x = block_step(&self.params, &x, &format!("gen.b{i}"), self.config.heads, cache);
        }
        state.pos += 1;
        let h = norm_infer(&self.params, &x, "gen.ln_f");
        let mut logits = Tensor::from_vec(1, h.len(), h).matmul(self.params.get("gen.out.w")).data;
        for (l, b) in logits.iter_mut().zip(&self.params.get("gen.out.b").data) {
            *l += b;
        }
        Ok(logits)
    }

    /// Next-token log-probabilities for every position of `[prefix; response]`
    /// computed one token at a time; used as an oracle for the batched NLL.
    pub fn stepwise_log_probs(&self, context: &[usize], span: &[usize], response: &[usize]) -> Result<Vec<f64>> {
        let (mut state, mut logits) = self.generator_session(context, span)?;
        let mut out = Vec::with_capacity(response.len() + 1);
        for &t in response.iter().chain(std::iter::once(&EOS)) {
            out.push(log_softmax(&logits)[t]);
            if t != EOS {
                logits = self.generator_advance(&mut state, t)?;
            }
        }
        Ok(out)
    }
}

/// Cached keys and values of the generator for one partial sequence.
#[derive(Clone, Debug)]
pub struct GenState {
    caches: Vec<BlockCache>,
    pos: usize,
}
