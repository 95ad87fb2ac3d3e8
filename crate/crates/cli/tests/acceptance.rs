//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p spangen-cli --test acceptance -- 1 5 7`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use spangen::corpus::{passes_focused_filter, passes_general_filter, synth_corpus, DialogueCase, SynthConfig};
use spangen::metrics::{one2many_ratios, read_generation_log, CaseGenerations, GenerationLog, Grounding, Repetition};
use spangen::neural::{Component, DecodeConfig, GradBundle, Graph, ModelConfig, ModelParams, ParamStore, Tensor, Var, Vocab};
use spangen::span_model::{joint_prior, softmax_distribution, Span};
use spangen::training::{
    compute_elbo, exact_reward_gradient, hinge_loss, margin_from_scores, observed_set, reconstruction_reward, reinforce_logit_estimate,
    run_training, total_reward, Baseline, ElboSettings, EncodedCase, PosteriorMarginals, RewardSwitches, TrainConfig,
};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn within(elapsed: Duration, limit: Duration) -> Result<()> {
    ensure!(elapsed < limit, "took {elapsed:.1?}, limit {limit:?}");
    Ok(())
}

fn small_model(seed: u64, words: usize) -> ModelParams {
    let vocab: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
    let config = ModelConfig { d: 8, heads: 2, ffn_mult: 2, max_len: 64, init_seed: seed, ..Default::default() };
    ModelParams::new(config, Vocab::from_tokens(&vocab)).expect("model")
}

fn criterion_1() -> Result<String> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sum, mut worst_row) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let n = rng.gen_range(1..=32);
        let scale = if i % 10 == 0 { 900.0 } else { 4.0 };
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        let (ps, pe) = (softmax(&a), softmax(&b));
        let j = joint_prior(&ps, &pe)?;
        worst_sum = worst_sum.max((j.sum() - 1.0).abs());
        for s in 0..n {
            for e in 0..s {
                ensure!(j.get(s, e) == 0.0, "pair {i}: lower-triangle cell ({s}, {e}) = {}", j.get(s, e));
            }
            let row: f64 = (s..n).map(|e| j.get(s, e)).sum();
            worst_row = worst_row.max((row - ps[s]).abs());
        }
    }
    ensure!(worst_sum <= 1e-9, "joint sum off by {worst_sum:e}");
    ensure!(worst_row <= 1e-12, "row marginal off by {worst_row:e}");
    within(t.elapsed(), Duration::from_secs(5))?;
    Ok(format!("max |sum-1| {worst_sum:.1e}, max row error {worst_row:.1e}, {:.2?}", t.elapsed()))
}

fn elbo_fixture(seed: u64) -> (ModelParams, EncodedCase, Vec<usize>) {
    let model = small_model(seed, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lk = 1 + (seed as usize % 8);
    let mut draw = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.gen_range(4..20)).collect() };
    let response = draw(4);
    let case = EncodedCase {
        case_id: format!("elbo-{seed}"),
        context: draw(3),
        knowledge: draw(lk),
        responses: vec![response.clone()],
        sentence_bounds: vec![(0, lk)],
    };
    (model, case, response)
}

fn criterion_2() -> Result<String> {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..50u64 {
        let (model, case, response) = elbo_fixture(seed);
        ensure!(model.vocab.len() <= 20, "vocabulary of {} entries", model.vocab.len());
        let n = case.knowledge.len();
        let terms = compute_elbo(&model, &case, &response, ElboSettings::exact(), &mut rng)?;

        let prior = model.prior_read_ids(&case.context, &case.knowledge)?;
        let p = joint_prior(&softmax(&prior.start_logits), &softmax(&prior.end_logits))?;
        let post = model.posterior_read_ids(&case.context, &response, &case.knowledge)?;
        let (qs, qe) = (softmax(&post.start_logits), softmax(&post.end_logits));

        let mut cells = Vec::new();
        for s in 0..n {
            for e in s..n {
                let ll = -model.generator_nll_ids(&case.context, &case.knowledge[s..=e], &response)?;
                cells.push((s, e, p.get(s, e).ln() + ll));
            }
        }
        let log_z = log_sum_exp(&cells.iter().map(|c| c.2).collect::<Vec<_>>());
        let mut kl = 0.0;
        for &(s, e, joint) in &cells {
            let q = if e == s { qs[s] * qe[..=s].iter().sum::<f64>() } else { qs[s] * qe[e] };
            if q > 0.0 {
                kl += q * (q.ln() - (joint - log_z));
            }
        }
        ensure!(terms.elbo <= log_z + 1e-9, "fixture {seed}: elbo {} above ln p(R) {log_z}", terms.elbo);
        let err = ((log_z - terms.elbo) - kl).abs();
        ensure!(err <= 1e-6, "fixture {seed}: gap {} vs KL {kl}", log_z - terms.elbo);
        worst = worst.max(err);
    }
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(format!("50 fixtures, max |gap-KL| {worst:.1e}, {:.2?}", t.elapsed()))
}

fn criterion_3() -> Result<String> {
    let t = Instant::now();
    let model = small_model(3, 16);
    let case = EncodedCase {
        case_id: "reinforce".into(),
        context: vec![4, 5, 6],
        knowledge: vec![7, 8, 9, 10],
        responses: vec![vec![7, 8, 11, 12], vec![9, 10, 13], vec![14, 15, 16, 17, 18]],
        sentence_bounds: vec![(0, 2), (2, 4)],
    };
    let set = observed_set(&case);
    let decode = DecodeConfig { beam_width: 2, min_len: 1, max_len: 4, repetition_penalty: 2.0 };
    let switches = RewardSwitches { alpha: 1.0, reconstruction: true, grounding: true };
    let mut table: HashMap<(usize, Span), f64> = HashMap::new();
    for r in 0..set.len() {
        for s in 0..4 {
            for e in s..4 {
                let span = Span { start: s, end: e };
                let tokens = &case.knowledge[s..=e];
                let generated = model.generator_decode_ids(&case.context, tokens, &decode)?;
                table.insert((r, span), total_reward(&generated, &set, r, tokens, switches, &model)?);
            }
        }
    }
    let reward = |r: usize, sp: Span| Ok(table[&(r, sp)]);
    let marginals: Vec<PosteriorMarginals> = set
        .entries
        .iter()
        .map(|e| {
            let out = model.posterior_read_ids(&case.context, &e.response, &case.knowledge)?;
            Ok(PosteriorMarginals { start: softmax_distribution(&out.start_logits)?, end: softmax_distribution(&out.end_logits)? })
        })
        .collect::<Result<_>>()?;

    let (es, ee) = exact_reward_gradient(&marginals, reward)?;
    let exact: Vec<f64> = es.iter().chain(&ee).flatten().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let plain = reinforce_logit_estimate(&marginals, 100_000, None, reward, &mut rng)?;
    let (m0, s0) = plain.flatten();
    let mut worst = 0.0f64;
    for (i, ((a, b), se)) in m0.iter().zip(&exact).zip(&s0).enumerate() {
        ensure!((a - b).abs() <= 3.0 * se, "component {i}: estimate {a} vs exact {b} (se {se})");
        if *se > 0.0 {
            worst = worst.max((a - b).abs() / se);
        }
    }
    let mut baseline = Baseline::new(0.95);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let based = reinforce_logit_estimate(&marginals, 100_000, Some(&mut baseline), reward, &mut rng)?;
    let (m1, s1) = based.flatten();
    for i in 0..m0.len() {
        let se = (s0[i] * s0[i] + s1[i] * s1[i]).sqrt();
        ensure!((m0[i] - m1[i]).abs() <= 3.0 * se, "component {i}: baseline moved the mean {} -> {}", m0[i], m1[i]);
    }
    let v0: f64 = s0.iter().map(|s| s * s).sum();
    let v1: f64 = s1.iter().map(|s| s * s).sum();
    ensure!(v1 < v0, "variance with baseline {v1:e} is not below {v0:e}");
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{} components, worst deviation {worst:.2} SE, variance {v0:.2e} -> {v1:.2e}, mean reward {:.3}, {:.2?}",
        exact.len(),
        plain.mean_reward,
        t.elapsed()
    ))
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

fn probe_loss(m: &ModelParams, g: &mut Graph, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, k, r) = (vec![4, 5, 6], vec![7, 8, 9, 10, 11], vec![12, 13, 14]);
    let mut parts = Vec::new();
    let prior = m.prior_graph(g, &c, &k)?;
    let post = m.posterior_graph(g, &c, &r, &k)?;
    for v in [prior.start_logits, prior.end_logits, post.start_logits, post.end_logits] {
        let (rows, cols) = g.value(v).shape();
        let w = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect());
        parts.push(g.weighted_sum(v, w));
    }
    parts.push(m.generator_nll_graph(g, &c, &k[1..3], &r)?);
    let dz = m.discriminator_logit_graph(g, &r)?;
    parts.push(g.log_sigmoid(dz));
    let gz = m.grounding_logit_graph(g, &k[0..2], &r)?;
    parts.push(g.sigmoid(gz));
    Ok(g.add_all(&parts))
}

fn criterion_4() -> Result<String> {
    let t = Instant::now();
    let m = small_model(4, 12);
    let analytic = {
        let mut g = Graph::new(&m.params);
        let loss = probe_loss(&m, &mut g, 1)?;
        g.backward(loss);
        GradBundle::from_pairs(g.param_grads())
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mm = ModelParams { config: m.config.clone(), vocab: m.vocab.clone(), params: store.clone() };
        let mut g = Graph::new(&mm.params);
        let loss = probe_loss(&mm, &mut g, 1)?;
        Ok(g.value(loss).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut worst = 0.0f64;
    let mut summary = Vec::new();
    for comp in Component::ALL {
        let names: Vec<String> = m.params.names().filter(|n| n.starts_with(comp.prefix())).cloned().collect();
        let (mut checked, mut attempts) = (0, 0);
        while checked < 20 && attempts < 400 {
            attempts += 1;
            let name = names.choose(&mut rng).context("component without parameters")?;
            let idx = rng.gen_range(0..m.params.get(name).len());
            let a = analytic.get(name).map(|t| t.data[idx]).unwrap_or(0.0);
            let h = 1e-5;
            let mut plus = m.params.clone();
            plus.get_mut(name).data[idx] += h;
            let mut minus = m.params.clone();
            minus.get_mut(name).data[idx] -= h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            if a.abs() < 1e-7 && fd.abs() < 1e-7 {
                continue;
            }
            let err = relative_error(a, fd);
            ensure!(err <= 1e-4, "{name}[{idx}]: analytic {a} vs finite difference {fd}");
            worst = worst.max(err);
            checked += 1;
        }
        ensure!(checked >= 20, "{comp:?}: only {checked} informative parameters");
        summary.push(format!("{}{checked}", comp.prefix()));
    }
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("{}; max relative error {worst:.1e}, {:.2?}", summary.join(" "), t.elapsed()))
}

fn w(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn criterion_5() -> Result<String> {
    let fill = |n: usize| (0..n).map(|i| format!("z{i}")).collect::<Vec<_>>().join(" ");
    let gen = w("a b c d e");
    let three = [w("a b c d x"), w(&format!("a b c {}", fill(12))), w(&format!("a {}", fill(14)))];
    let checks = [
        ("reconstruction, exact and disjoint", reconstruction_reward(&w("a b"), &[w("a b"), w("c d"), w("e")], 0), 1.0),
        ("reconstruction, identical set of two", reconstruction_reward(&w("a b"), &[w("a b"), w("a b")], 0), 0.5),
        ("reconstruction, similarities 0.8/0.3/0.1", reconstruction_reward(&gen, &three, 0), 0.8),
        ("hinge, saturated", margin_from_scores(&[(2.5, 1.0), (1.5, 0.5)], 1.0), 0.0),
        ("hinge, equal scores", margin_from_scores(&[(0.3, 0.3), (0.7, 0.7)], 1.0), 1.0),
        ("hinge, equal scores with margin 0.25", hinge_loss(0.6, 0.6, 0.25), 0.25),
        ("hinge, own 0.9 other 0.4", hinge_loss(0.9, 0.4, 1.0), 0.5),
    ];
    for (what, got, want) in checks {
        ensure!(got == want, "{what}: {got:?} != {want:?}");
    }
    Ok(format!("{} golden values exact", checks.len()))
}

fn one_case_log(groundings: &[usize], generations: &[&str]) -> GenerationLog {
    let repetitions = groundings
        .iter()
        .zip(generations)
        .map(|(&g, t)| Repetition { grounding: Grounding::Span { start: g, end: g + 1 }, tokens: w(t) })
        .collect();
    GenerationLog { cases: vec![CaseGenerations { case_id: "anchor".into(), repetitions }] }
}

#[allow(clippy::approx_constant)]
fn criterion_6() -> Result<String> {
    let anchor = one2many_ratios(&one_case_log(&[0, 3, 0, 0, 3], &["a", "b", "c", "d", "e"]))?;
    ensure!(anchor.unique_grounding_ratio == 0.4, "2 unique in 5 gave {}", anchor.unique_grounding_ratio);
    let rows = [
        ("skt", 0.401, 0.336, 0.838),
        ("colv", 0.679, 0.332, 0.488),
        ("ours", 0.788, 0.628, 0.797),
        ("no_span", 0.392, 0.359, 0.916),
        ("no_dis", 0.596, 0.318, 0.533),
    ];
    let mut notes = vec!["2-in-5 anchor 0.4".to_string()];
    for (name, g, t, effect) in rows {
        let log = read_generation_log(&fixtures().join(format!("diversity_{name}.jsonl")))?;
        let r = one2many_ratios(&log)?;
        ensure!((r.unique_grounding_ratio - g).abs() < 1e-12, "{name}: grounding ratio {}", r.unique_grounding_ratio);
        ensure!((r.unique_generation_ratio - t).abs() < 1e-12, "{name}: generation ratio {}", r.unique_generation_ratio);
        ensure!((r.effect_of_grounding - effect).abs() <= 1e-3, "{name}: effect {} vs {effect}", r.effect_of_grounding);
        notes.push(format!("{name} {:.4}", r.effect_of_grounding));
    }
    Ok(notes.join(", "))
}

#[derive(Deserialize)]
struct Label {
    general: bool,
    rule: Option<String>,
    focused: Option<bool>,
}

#[derive(Deserialize)]
struct LabeledCase {
    label: Label,
    case: DialogueCase,
}

fn criterion_7() -> Result<String> {
    let text = std::fs::read_to_string(fixtures().join("filter_cases.jsonl"))?;
    let cases: Vec<LabeledCase> = text.lines().map(serde_json::from_str).collect::<Result<_, _>>()?;
    ensure!(cases.len() == 30, "fixture has {} cases", cases.len());
    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    for LabeledCase { label, case } in &cases {
        let v = passes_general_filter(case);
        let rule = v.rejection.map(|r| r.to_string());
        ensure!(v.passed == label.general && rule == label.rule, "{}: got {:?}, labeled {:?}", case.case_id, rule, label.rule);
        let focused = if v.passed { Some(passes_focused_filter(case)?) } else { None };
        ensure!(focused == label.focused, "{}: focused {:?}, labeled {:?}", case.case_id, focused, label.focused);
        let key = match (rule, focused) {
            (Some(r), _) => r,
            (None, Some(true)) => "focused".into(),
            (None, _) => "general".into(),
        };
        *tally.entry(key).or_default() += 1;
    }
    Ok(format!("30/30 match ({})", tally.iter().map(|(k, v)| format!("{k} {v}")).collect::<Vec<_>>().join(", ")))
}

fn criterion_8() -> Result<String> {
    let t = Instant::now();
    let cases = synth_corpus(&SynthConfig { cases: 200, vocab_size: 200, seed: 8, ..Default::default() })?;
    let split = spangen::corpus::split_corpus(&cases, Default::default(), 8)?;
    let model = ModelConfig { d: 32, init_seed: 8, ..Default::default() };
    let train = TrainConfig { epochs: 5, seed: 8, ..Default::default() };
    let out = run_training(&split.train, &split.valid, &model, &train, &DecodeConfig::default(), None)?;
    let first = out.records.first().context("no records")?.val_metrics.elbo;
    let last = out.records.last().context("no records")?.val_metrics.elbo;
    ensure!(out.records.len() == 6, "{} epoch records", out.records.len());
    ensure!(last > first, "validation ELBO {first} -> {last}");
    ensure!(out.freeze_violations == 0, "{} freezing violations", out.freeze_violations);
    within(t.elapsed(), Duration::from_secs(30 * 60))?;
    let path: Vec<String> = out.records.iter().map(|r| format!("{:.2}", r.val_metrics.elbo)).collect();
    Ok(format!("{} train cases, validation ELBO {}, 0 freezing violations, {:.1?}", split.train.len(), path.join(" -> "), t.elapsed()))
}

fn cli(args: &[&str]) -> Result<String> {
    let argv = std::iter::once("spangen").chain(args.iter().copied());
    Ok(spangen_cli::run_command(argv)?.stdout)
}

fn dir_arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const SMALL: [&str; 10] = [
    "--set",
    "model.d=16",
    "--set",
    "train.validation_cases=8",
    "--set",
    "train.batch_size=16",
    "--set",
    "decode.min_len=4",
    "--set",
    "decode.max_len=10",
];

fn criterion_9() -> Result<String> {
    let t = Instant::now();
    let root = tempfile::tempdir()?;
    let mut gaps = Vec::new();
    for seed in ["1", "2", "3"] {
        let d = |name: &str| root.path().join(format!("{name}-{seed}"));
        let corpus_dir = d("corpus");
        cli(&["corpus-build", "--seed", seed, "--cases", "60", "--run-dir", dir_arg(&corpus_dir)])?;
        let corpus = corpus_dir.join("corpus.jsonl");
        let manifest = corpus_dir.join("split.json");
        let mut train = vec!["train", "--seed", seed, "--epochs", "2", "--corpus", dir_arg(&corpus), "--split", dir_arg(&manifest)];
        let train_dir = d("train");
        train.extend(["--run-dir", dir_arg(&train_dir)]);
        train.extend(SMALL);
        cli(&train)?;
        let ckpt = train_dir.join("checkpoints").join("epoch-2.json");
        let mut ratios = Vec::new();
        for mode in ["span", "sentence"] {
            let gen_dir = d(&format!("gen-{mode}"));
            let mut gen = vec!["generate", "--seed", seed, "--mode", mode, "--repetitions", "5", "--checkpoint", dir_arg(&ckpt)];
            gen.extend(["--corpus", dir_arg(&corpus), "--split", dir_arg(&manifest), "--run-dir", dir_arg(&gen_dir)]);
            gen.extend(SMALL);
            cli(&gen)?;
            let log = gen_dir.join("logs").join("generations.jsonl");
            let o2m_dir = d(&format!("o2m-{mode}"));
            let printed = cli(&["one2many", "--log", dir_arg(&log), "--run-dir", dir_arg(&o2m_dir)])?;
            let v: serde_json::Value = serde_json::from_str(&printed)?;
            ratios.push(v["unique_grounding_ratio"].as_f64().context("ratio missing")?);
        }
        gaps.push((ratios[0], ratios[1]));
    }
    let mean_gap = gaps.iter().map(|(a, b)| a - b).sum::<f64>() / gaps.len() as f64;
    let detail = gaps.iter().map(|(a, b)| format!("{a:.3}/{b:.3}")).collect::<Vec<_>>().join(", ");
    ensure!(mean_gap >= 0.1, "mean grounding-ratio gap {mean_gap:.3} (span/sentence per seed: {detail})");
    Ok(format!("span/sentence per seed {detail}; mean gap {mean_gap:.3}, {:.1?}", t.elapsed()))
}

fn files_under(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir)?.to_path_buf(), std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

fn criterion_10() -> Result<String> {
    let t = Instant::now();
    let root = tempfile::tempdir()?;
    let base = root.path().join("inputs");
    std::fs::create_dir_all(&base)?;
    let dir = |name: &str, round: usize| root.path().join(format!("{name}-{round}"));

    let mut compared = 0;
    let mut check = |name: &str, args: &dyn Fn(&Path) -> Vec<String>| -> Result<PathBuf> {
        let mut outputs = Vec::new();
        for round in 0..2 {
            let d = dir(name, round);
            let mut argv: Vec<String> = args(&d);
            argv.extend(["--run-dir".to_string(), dir_arg(&d).to_string()]);
            let refs: Vec<&str> = argv.iter().map(String::as_str).collect();
            let printed = cli(&refs).with_context(|| name.to_string())?;
            outputs.push((printed, files_under(&d)?));
        }
        let (a, b) = (&outputs[0], &outputs[1]);
        ensure!(a.0 == b.0, "{name}: standard output differs");
        let names_a: Vec<_> = a.1.keys().collect();
        let names_b: Vec<_> = b.1.keys().collect();
        ensure!(names_a == names_b, "{name}: file sets differ");
        for (p, bytes) in &a.1 {
            if b.1[p] != *bytes {
                bail!("{name}: {} differs between runs", p.display());
            }
        }
        compared += a.1.len();
        Ok(dir(name, 0))
    };

    let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let corpus_dir = check("corpus-build", &|_| s(&["corpus-build", "--seed", "5", "--cases", "24"]))?;
    let corpus = corpus_dir.join("corpus.jsonl");
    let manifest = corpus_dir.join("split.json");
    let (c, m) = (dir_arg(&corpus).to_string(), dir_arg(&manifest).to_string());
    check("corpus-filter", &|_| s(&["corpus-filter", "--seed", "5", "--corpus", &c]))?;
    let train_dir = check("train", &|_| {
        let mut a = s(&["train", "--seed", "5", "--epochs", "1", "--corpus", &c, "--split", &m]);
        a.extend(s(&SMALL));
        a.extend(s(&["--set", "model.d=8", "--set", "train.grounding_epochs=1", "--set", "train.posterior_warmup_epochs=1"]));
        a
    })?;
    let ckpt = dir_arg(&train_dir.join("checkpoints").join("epoch-1.json")).to_string();
    let gen_dir = check("generate", &|_| {
        let mut a = s(&["generate", "--seed", "5", "--repetitions", "3", "--checkpoint", &ckpt, "--corpus", &c, "--split", &m]);
        a.extend(s(&["--set", "decode.min_len=2", "--set", "decode.max_len=6"]));
        a
    })?;
    let log = dir_arg(&gen_dir.join("logs").join("generations.jsonl")).to_string();
    check("evaluate", &|_| s(&["evaluate", "--seed", "5", "--log", &log, "--corpus", &c]))?;
    check("one2many", &|_| s(&["one2many", "--seed", "5", "--log", &log]))?;
    Ok(format!("6 subcommands, {compared} files identical across paired runs, {:.1?}", t.elapsed()))
}

type Check = fn() -> Result<String>;

fn main() {
    let criteria: [(usize, &str, Check); 10] = [
        (1, "joint prior validity", criterion_1),
        (2, "ELBO lower bound and gap", criterion_2),
        (3, "REINFORCE unbiasedness and baseline", criterion_3),
        (4, "gradient checks", criterion_4),
        (5, "reward and hinge golden values", criterion_5),
        (6, "one-to-many metric anchors", criterion_6),
        (7, "filter cascade labels", criterion_7),
        (8, "end-to-end training smoke", criterion_8),
        (9, "directional one-to-many effect", criterion_9),
        (10, "bitwise reproducibility", criterion_10),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for (n, title, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {n} ({title}): PASS: {detail}"),
            Err(e) => {
                failures += 1;
                println!("criterion {n} ({title}): FAIL: {e:#}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
