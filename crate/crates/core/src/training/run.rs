use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::augment::observed_set;
use super::rewards::{grounding_margin_loss, MarginOutcome};
use super::steps::{sleep_step, wake_step, TrainState};
use super::{augment_responses, compute_elbo, AugmentedResponseSet, ElboSettings, EncodedCase, TrainConfig};
use crate::corpus::DialogueCase;
use crate::error::{Error, Result};
use crate::neural::{
    save_checkpoint, Adam, AdamConfig, Checkpoint, DecodeConfig, GradBundle, Graph, ModelConfig, ModelParams, Trainable, Vocab,
};
use crate::span_model::pseudo_span_tag;

const VALIDATION_STREAM: u64 = 0x5641_4c49_4441_5445;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub elbo: f64,
    pub expected_log_likelihood: f64,
    pub kl: f64,
    pub responses: usize,
}

/// One line of the metrics log. Epoch 0 describes the initial parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub sleep_bce: Option<f64>,
    pub wake_elbo: Option<f64>,
    pub kl: Option<f64>,
    pub mean_reward: Option<f64>,
    pub val_metrics: ValidationMetrics,
    pub wall_time: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub records: Vec<EpochRecord>,
    pub grounding_losses: Vec<f64>,
    pub grounding_skipped: usize,
    pub warmup_losses: Vec<f64>,
    /// Steps after which a component outside the step's trainable set had
    /// a different parameter checksum.
    pub freeze_violations: usize,
}

/// Mean ELBO over every response of `cases`, drawn from a stream seeded by
/// `seed` so repeated evaluations are comparable.
pub fn evaluate_validation(model: &ModelParams, cases: &[EncodedCase], settings: ElboSettings, seed: u64) -> Result<ValidationMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VALIDATION_STREAM);
    let (mut elbo, mut ell, mut kl, mut n) = (0.0, 0.0, 0.0, 0usize);
    for case in cases {
        for r in &case.responses {
            let t = compute_elbo(model, case, r, settings, &mut rng)?;
            elbo += t.elbo;
            ell += t.expected_log_likelihood;
            kl += t.kl;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("validation responses"));
    }
    let n_f = n as f64;
    Ok(ValidationMetrics { elbo: elbo / n_f, expected_log_likelihood: ell / n_f, kl: kl / n_f, responses: n })
}

/// Trains the grounding scorer alone with the margin objective on pseudo-span
/// labels. Returns the mean loss per epoch and the number of skipped cases.
pub fn pretrain_grounding(
    model: &mut ModelParams,
    cases: &[EncodedCase],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, usize)> {
    let pseudo: Vec<Vec<Vec<usize>>> = cases
        .iter()
        .map(|c| {
            c.responses
                .iter()
                .map(|r| pseudo_span_tag(r, &c.knowledge, &config.pseudo_span_windows).map(|s| c.span_tokens(s).to_vec()))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(AdamConfig { lr: config.grounding_lr, clip_norm: Some(config.clip_norm), ..Default::default() });
    let mut losses = Vec::with_capacity(config.grounding_epochs);
    let mut skipped = 0;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    for epoch in 0..config.grounding_epochs {
        order.shuffle(rng);
        let (mut total, mut counted) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut g = Graph::with_trainable(&model.params, Trainable::prefixes(["gnd."]));
            let mut parts = Vec::new();
            for &i in chunk {
                match grounding_margin_loss(&mut g, model, &cases[i].responses, &pseudo[i], config.mu, rng)? {
                    MarginOutcome::Skipped => {
                        if epoch == 0 {
                            skipped += 1;
                        }
                    }
                    MarginOutcome::Loss { value, var } => {
                        total += value;
                        counted += 1;
                        parts.push(var);
                    }
                }
            }
            if parts.is_empty() {
                continue;
            }
            let sum = g.add_all(&parts);
            let loss = g.scale(sum, 1.0 / parts.len() as f64);
            g.backward(loss);
            let grads = GradBundle::from_pairs(g.param_grads());
            drop(g);
            opt.step(&mut model.params, &grads);
        }
        losses.push(if counted > 0 { total / counted as f64 } else { 0.0 });
    }
    Ok((losses, skipped))
}

/// Likelihood training of the posterior reader and the generator on
/// pseudo-span labels before the main loop. Returns the mean loss per epoch.
pub fn warmup_posterior(model: &mut ModelParams, cases: &[EncodedCase], config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let labels: Vec<Vec<crate::span_model::Span>> = cases
        .iter()
        .map(|c| c.responses.iter().map(|r| pseudo_span_tag(r, &c.knowledge, &config.warmup_windows)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut opt = Adam::new(AdamConfig { lr: config.lr, clip_norm: Some(config.clip_norm), ..Default::default() });
    let mut losses = Vec::with_capacity(config.posterior_warmup_epochs);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    for _ in 0..config.posterior_warmup_epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut sorted = chunk.to_vec();
            sorted.sort_by(|&a, &b| cases[a].case_id.cmp(&cases[b].case_id));
            let mut g = Graph::with_trainable(&model.params, Trainable::prefixes(["embed.", "post.", "gen."]));
            let mut parts = Vec::new();
            for &i in &sorted {
                let case = &cases[i];
                for (r, span) in case.responses.iter().zip(&labels[i]) {
                    let v = model.posterior_graph(&mut g, &case.context, r, &case.knowledge)?;
                    let ls = g.log_softmax_rows(v.start_logits);
                    let le = g.log_softmax_rows(v.end_logits);
                    let a = g.pick_sum(ls, &[(0, span.start)]);
                    let b = g.pick_sum(le, &[(0, span.end)]);
                    let nll = model.generator_nll_graph(&mut g, &case.context, case.span_tokens(*span), r)?;
                    let ll = g.add(a, b);
                    let neg = g.scale(ll, -1.0);
                    let term = g.add(neg, nll);
                    total += g.value(term).item();
                    count += 1;
                    parts.push(term);
                }
            }
            if parts.is_empty() {
                continue;
            }
            let sum = g.add_all(&parts);
            let loss = g.scale(sum, 1.0 / parts.len() as f64);
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFiniteLoss("posterior warm-up loss".into()));
            }
            g.backward(loss);
            let grads = GradBundle::from_pairs(g.param_grads());
            drop(g);
            opt.step(&mut model.params, &grads);
        }
        losses.push(if count > 0 { total / count as f64 } else { 0.0 });
    }
    Ok(losses)
}

fn config_hash(model: &ModelConfig, train: &TrainConfig, decode: &DecodeConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(model, train, decode))?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Serialize)]
struct BatchDump<'a> {
    error: String,
    epoch: usize,
    case_ids: Vec<&'a str>,
    sets: &'a [AugmentedResponseSet],
}

struct Freeze {
    sleep_frozen: Vec<String>,
    wake_frozen: Vec<String>,
}

impl Freeze {
    const SLEEP: [&'static str; 5] = ["embed.", "prior.", "post.", "gen.", "gnd."];
    const WAKE: [&'static str; 2] = ["disc.", "gnd."];

    fn take(model: &ModelParams) -> Self {
        let sums = |ps: &[&str]| ps.iter().map(|p| model.params.checksum(p)).collect();
        Self { sleep_frozen: sums(&Self::SLEEP), wake_frozen: sums(&Self::WAKE) }
    }
}

/// Grounding pretraining, posterior warm-up, then epochs of alternating sleep
/// and wake steps. With `out_dir`, writes `logs/metrics.jsonl` and one
/// checkpoint per epoch under `checkpoints/`.
pub fn run_training(
    train: &[DialogueCase],
    valid: &[DialogueCase],
    model_config: &ModelConfig,
    config: &TrainConfig,
    decode: &DecodeConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_config.validate()?;
    config.validate()?;
    decode.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("the train split is empty".into()));
    }
    let started = Instant::now();
    let hash = config_hash(model_config, config, decode)?;
    let vocab = Vocab::from_cases(train);
    let mut model = ModelParams::new(model_config.clone(), vocab)?;
    let train_cases: Vec<EncodedCase> = train.iter().map(|c| EncodedCase::new(c, &model.vocab)).collect();
    let valid_source = if valid.is_empty() { train } else { valid };
    let valid_cases: Vec<EncodedCase> =
        valid_source.iter().take(config.validation_cases.max(1)).map(|c| EncodedCase::new(c, &model.vocab)).collect();
    let settings = ElboSettings {
        exact_kl_max_len: config.exact_kl_max_len,
        exact_likelihood_max_len: config.exact_likelihood_max_len,
        samples: config.elbo_samples,
    };

    let batches = train_cases.len().div_ceil(config.batch_size);
    let sleep_per_batch = if config.no_discriminator { 0 } else { config.sleep_steps };
    let mut state = TrainState::new(config, config.epochs * batches * config.wake_steps, config.epochs * batches * sleep_per_batch);

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("logs"))?;
            fs::create_dir_all(dir.join("checkpoints"))?;
            Some(BufWriter::new(File::create(dir.join("logs").join("metrics.jsonl"))?))
        }
        None => None,
    };
    let wall = |on: bool| on.then(|| started.elapsed().as_secs_f64());
    let mut records = Vec::with_capacity(config.epochs + 1);
    let mut emit = |record: EpochRecord, model: &ModelParams, rng: &ChaCha8Rng, log: &mut Option<BufWriter<File>>| -> Result<()> {
        if let (Some(w), Some(dir)) = (log.as_mut(), out_dir) {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
            w.flush()?;
            let ck = Checkpoint::new(model.clone(), hash.clone(), Some(rng.clone()), Some(record.epoch));
            save_checkpoint(&dir.join("checkpoints").join(format!("epoch-{}.json", record.epoch)), &ck)?;
        }
        records.push(record);
        Ok(())
    };

    let init = evaluate_validation(&model, &valid_cases, settings, config.seed)?;
    emit(
        EpochRecord {
            epoch: 0,
            sleep_bce: None,
            wake_elbo: None,
            kl: None,
            mean_reward: None,
            val_metrics: init,
            wall_time: wall(config.log_wall_time),
        },
        &model,
        &state.rng,
        &mut log,
    )?;

    let (grounding_losses, grounding_skipped) = pretrain_grounding(&mut model, &train_cases, config, &mut state.rng)?;
    let warmup_losses = warmup_posterior(&mut model, &train_cases, config, &mut state.rng)?;

    let mut freeze_violations = 0;
    let mut order: Vec<usize> = (0..train_cases.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut state.rng);
        let (mut bce_sum, mut bce_n) = (0.0, 0usize);
        let (mut elbo_sum, mut kl_sum, mut reward_sum, mut wake_n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let mut idx = chunk.to_vec();
            idx.sort_by(|&a, &b| train_cases[a].case_id.cmp(&train_cases[b].case_id));
            let cases: Vec<&EncodedCase> = idx.iter().map(|&i| &train_cases[i]).collect();
            let mut sets = Vec::with_capacity(cases.len());
            for c in &cases {
                sets.push(if config.no_discriminator {
                    observed_set(c)
                } else {
                    augment_responses(c, config.lambda, &model, decode, &mut state.rng)?
                });
            }
            let dump = |e: &Error, sets: &[AugmentedResponseSet]| -> Result<()> {
                if let Some(dir) = out_dir {
                    let d = BatchDump { error: e.to_string(), epoch, case_ids: cases.iter().map(|c| c.case_id.as_str()).collect(), sets };
                    fs::write(dir.join("logs").join("nonfinite-batch.json"), serde_json::to_vec_pretty(&d)?)?;
                }
                Ok(())
            };
            for _ in 0..sleep_per_batch {
                let before = Freeze::take(&model);
                match sleep_step(&mut model, &sets, &mut state.sleep_opt) {
                    Ok(r) => {
                        bce_sum += r.bce;
                        bce_n += 1;
                    }
                    Err(e) => {
                        if matches!(e, Error::NonFiniteLoss(_)) {
                            dump(&e, &sets)?;
                        }
                        return Err(e);
                    }
                }
                if Freeze::take(&model).sleep_frozen != before.sleep_frozen {
                    freeze_violations += 1;
                }
                for s in &mut sets {
                    s.rescore(&model)?;
                }
            }
            let batch: Vec<(&EncodedCase, &AugmentedResponseSet)> = cases.iter().copied().zip(sets.iter()).collect();
            for _ in 0..config.wake_steps {
                let before = Freeze::take(&model);
                match wake_step(&mut model, &batch, config, decode, &mut state) {
                    Ok(r) => {
                        elbo_sum += r.objective;
                        kl_sum += r.kl;
                        reward_sum += r.mean_reward;
                        wake_n += 1;
                    }
                    Err(e) => {
                        if matches!(e, Error::NonFiniteLoss(_)) {
                            dump(&e, &sets)?;
                        }
                        return Err(e);
                    }
                }
                if Freeze::take(&model).wake_frozen != before.wake_frozen {
                    freeze_violations += 1;
                }
            }
        }
        let val = evaluate_validation(&model, &valid_cases, settings, config.seed)?;
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        emit(
            EpochRecord {
                epoch,
                sleep_bce: mean(bce_sum, bce_n),
                wake_elbo: mean(elbo_sum, wake_n),
                kl: mean(kl_sum, wake_n),
                mean_reward: mean(reward_sum, wake_n),
                val_metrics: val,
                wall_time: wall(config.log_wall_time),
            },
            &model,
            &state.rng,
            &mut log,
        )?;
    }
    Ok(TrainOutcome { model, records, grounding_losses, grounding_skipped, warmup_losses, freeze_violations })
}
