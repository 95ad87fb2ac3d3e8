//! Command-line surface: corpus building and filtering, training, repeated
//! generation and evaluation. Every command writes into a run directory
//! holding the resolved configuration next to its artifacts.

pub mod config;

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use spangen::corpus::{
    extract_cases, passes_focused_filter, passes_general_filter, read_corpus, read_manifest, split_corpus, synth_corpus, write_corpus,
    write_manifest, CorpusSplit, DialogueCase, MessageTree, Tokens,
};
use spangen::generation::generate_log;
use spangen::metrics::{evaluate_log, one2many_ratios, read_generation_log, write_generation_log};
use spangen::neural::load_checkpoint;
use spangen::training::run_training;

pub use config::{load_config, parse_override, GenerateOptions, ResolvedConfig, RunConfig, Source};

#[derive(Debug, Parser)]
#[command(name = "spangen", about = "Span-grounded multi-reference dialogue generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory; defaults to a timestamped directory under `runs/`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any config value as `dotted.key=json`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a corpus (synthetic, or from message trees) and its split manifest.
    CorpusBuild {
        #[command(flatten)]
        common: Common,
        /// JSON-lines file of `{"tree": ..., "knowledge": [[...], ...]}` records.
        #[arg(long)]
        trees: Option<PathBuf>,
        #[arg(long)]
        cases: Option<usize>,
    },
    /// Apply the general filter and count rejections per rule.
    CorpusFilter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// Split manifest; without it the corpus is split with the configured ratios.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_discriminator: bool,
        #[arg(long)]
        no_rec_reward: bool,
        #[arg(long)]
        no_ground_reward: bool,
    },
    /// Repeated generation from a checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        repetitions: Option<usize>,
        /// `span` or `sentence`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Metrics report for a generation log.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
        /// Corpus supplying reference responses.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// The one-to-many ratio triple for a generation log.
    One2many {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        log: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CorpusBuild { .. } => "corpus-build",
            Command::CorpusFilter { .. } => "corpus-filter",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::One2many { .. } => "one2many",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::CorpusBuild { common, .. }
            | Command::CorpusFilter { common, .. }
            | Command::Train { common, .. }
            | Command::Generate { common, .. }
            | Command::Evaluate { common, .. }
            | Command::One2many { common, .. } => common,
        }
    }

    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let common = self.common();
        let mut out = Vec::new();
        if let Some(s) = common.seed {
            out.push(("seed".to_string(), Value::from(s)));
        }
        match self {
            Command::CorpusBuild { cases: Some(n), .. } => out.push(("synth.cases".into(), Value::from(*n))),
            Command::Train { lambda, alpha, epochs, no_discriminator, no_rec_reward, no_ground_reward, .. } => {
                if let Some(v) = lambda {
                    out.push(("train.lambda".into(), Value::from(*v)));
                }
                if let Some(v) = alpha {
                    out.push(("train.alpha".into(), Value::from(*v)));
                }
                if let Some(v) = epochs {
                    out.push(("train.epochs".into(), Value::from(*v)));
                }
                for (flag, key) in
                    [(no_discriminator, "no_discriminator"), (no_rec_reward, "no_rec_reward"), (no_ground_reward, "no_ground_reward")]
                {
                    if *flag {
                        out.push((format!("train.{key}"), Value::Bool(true)));
                    }
                }
            }
            Command::Generate { repetitions, mode, .. } => {
                if let Some(r) = repetitions {
                    out.push(("generate.repetitions".into(), Value::from(*r)));
                }
                if let Some(m) = mode {
                    out.push(("generate.mode".into(), Value::from(m.as_str())));
                }
            }
            _ => {}
        }
        for raw in &common.set {
            out.push(parse_override(raw)?);
        }
        Ok(out)
    }
}

/// What a command reports on standard output.
#[derive(Debug)]
pub struct CommandOutput {
    pub run_dir: PathBuf,
    pub stdout: String,
}

struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("run directory {} is locked by another invocation ({} exists)", dir.display(), path.display()))?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn default_run_dir(command: &str) -> PathBuf {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    PathBuf::from("runs").join(format!("{command}-{}-{:09}-{}", now.as_secs(), now.subsec_nanos(), std::process::id()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    command: &'a str,
    seed: u64,
    inputs: BTreeMap<&'a str, String>,
    #[serde(flatten)]
    resolved: &'a ResolvedConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeRecord {
    tree: MessageTree,
    knowledge: Vec<Tokens>,
}

fn read_trees(path: &Path) -> Result<Vec<DialogueCase>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut cases = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TreeRecord = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        cases.extend(extract_cases(&rec.tree, &rec.knowledge)?);
    }
    Ok(cases)
}

fn load_split(corpus: &Path, split: Option<&Path>, config: &RunConfig) -> Result<CorpusSplit> {
    let cases = read_corpus(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
    match split {
        Some(p) => {
            let manifest = read_manifest(p).with_context(|| format!("reading split manifest {}", p.display()))?;
            Ok(CorpusSplit::from_manifest(&cases, &manifest)?)
        }
        None => Ok(split_corpus(&cases, config.split, config.seed)?),
    }
}

#[derive(Serialize)]
struct FilterReport {
    input: usize,
    accepted: usize,
    rejected: BTreeMap<String, usize>,
    focused: usize,
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_command<I, T>(argv: I) -> Result<CommandOutput>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv)?;
    execute(cli.command)
}

pub fn execute(command: Command) -> Result<CommandOutput> {
    let name = command.name();
    let common = command.common();
    let resolved = load_config(common.config.as_deref(), &command.overrides()?)?;
    let cfg = &resolved.config;
    let run_dir = common.run_dir.clone().unwrap_or_else(|| default_run_dir(name));
    fs::create_dir_all(&run_dir).with_context(|| format!("creating run directory {}", run_dir.display()))?;
    let _lock = RunLock::acquire(&run_dir)?;
    for sub in ["checkpoints", "logs", "reports"] {
        fs::create_dir_all(run_dir.join(sub))?;
    }

    let mut inputs = BTreeMap::new();
    let mut note = |k: &'static str, p: &Path| {
        inputs.insert(k, p.display().to_string());
    };
    match &command {
        Command::CorpusBuild { trees: Some(t), .. } => note("trees", t),
        Command::CorpusFilter { corpus, .. } => note("corpus", corpus),
        Command::Train { corpus, split, .. } => {
            note("corpus", corpus);
            if let Some(s) = split {
                note("split", s);
            }
        }
        Command::Generate { checkpoint, corpus, split, .. } => {
            note("checkpoint", checkpoint);
            note("corpus", corpus);
            if let Some(s) = split {
                note("split", s);
            }
        }
        Command::Evaluate { log, corpus, .. } => {
            note("log", log);
            if let Some(c) = corpus {
                note("corpus", c);
            }
        }
        Command::One2many { log, .. } => note("log", log),
        _ => {}
    }
    write_json(&run_dir.join("config.json"), &ConfigEcho { command: name, seed: cfg.seed, inputs, resolved: &resolved })?;

    let stdout = match &command {
        Command::CorpusBuild { trees, .. } => {
            let cases = match trees {
                Some(t) => read_trees(t)?,
                None => synth_corpus(&cfg.synth)?,
            };
            let split = split_corpus(&cases, cfg.split, cfg.seed)?;
            write_corpus(&run_dir.join("corpus.jsonl"), &cases)?;
            write_manifest(&run_dir.join("split.json"), &split.manifest())?;
            format!(
                "{} cases: train {}, valid {}, general_test {}, focused_test {}",
                cases.len(),
                split.train.len(),
                split.valid.len(),
                split.general_test.len(),
                split.focused_test.len()
            )
        }
        Command::CorpusFilter { corpus, .. } => {
            let cases = read_corpus(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?;
            let mut rejected: BTreeMap<String, usize> = ["rule-1", "rule-3", "rule-4"].iter().map(|r| (r.to_string(), 0)).collect();
            let mut kept = Vec::new();
            let mut focused = 0;
            for c in &cases {
                let v = passes_general_filter(c);
                match v.rejection {
                    Some(rule) => *rejected.entry(rule.to_string()).or_default() += 1,
                    None => {
                        if passes_focused_filter(c)? {
                            focused += 1;
                        }
                        kept.push(c.clone());
                    }
                }
            }
            write_corpus(&run_dir.join("corpus.jsonl"), &kept)?;
            let report = FilterReport { input: cases.len(), accepted: kept.len(), rejected, focused };
            write_json(&run_dir.join("reports").join("filter.json"), &report)?;
            serde_json::to_string(&report)?
        }
        Command::Train { corpus, split, .. } => {
            let split = load_split(corpus, split.as_deref(), cfg)?;
            let out = run_training(&split.train, &split.valid, &cfg.model, &cfg.train, &cfg.decode, Some(&run_dir))?;
            let last = out.records.last().expect("initial record");
            let first = &out.records[0];
            let summary = serde_json::json!({
                "epochs": cfg.train.epochs,
                "initial_val_elbo": first.val_metrics.elbo,
                "final_val_elbo": last.val_metrics.elbo,
                "grounding_losses": out.grounding_losses,
                "grounding_skipped": out.grounding_skipped,
                "warmup_losses": out.warmup_losses,
                "freeze_violations": out.freeze_violations,
                "checkpoint": format!("checkpoints/epoch-{}.json", last.epoch),
            });
            write_json(&run_dir.join("reports").join("training.json"), &summary)?;
            serde_json::to_string(&summary)?
        }
        Command::Generate { checkpoint, corpus, split, .. } => {
            let ck = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let cases: Vec<DialogueCase> = match split {
                Some(_) => load_split(corpus, split.as_deref(), cfg)?.part(&cfg.generate.part)?.to_vec(),
                None => read_corpus(corpus).with_context(|| format!("reading corpus {}", corpus.display()))?,
            };
            let log = generate_log(&ck.model, &cases, cfg.generate.mode, cfg.generate.repetitions, &cfg.decode, cfg.seed)?;
            write_generation_log(&run_dir.join("logs").join("generations.jsonl"), &log)?;
            format!("{} cases x {} repetitions", log.cases.len(), cfg.generate.repetitions)
        }
        Command::Evaluate { log, corpus, .. } => {
            let gl = read_generation_log(log).with_context(|| format!("reading generation log {}", log.display()))?;
            let refs: Option<HashMap<String, Vec<Vec<String>>>> = match corpus {
                Some(c) => Some(read_corpus(c)?.into_iter().map(|c| (c.case_id, c.responses)).collect()),
                None => None,
            };
            let report = evaluate_log(&gl, refs.as_ref())?;
            write_json(&run_dir.join("reports").join("metrics.json"), &report)?;
            serde_json::to_string(&report)?
        }
        Command::One2many { log, .. } => {
            let gl = read_generation_log(log).with_context(|| format!("reading generation log {}", log.display()))?;
            let r = one2many_ratios(&gl)?;
            write_json(&run_dir.join("reports").join("one2many.json"), &r)?;
            serde_json::to_string(&r)?
        }
    };
    Ok(CommandOutput { run_dir, stdout })
}

/// Runs `argv` and maps the outcome to an exit status, printing errors as JSON.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match run_command(argv) {
        Ok(out) => {
            println!("{}", out.stdout);
            0
        }
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                let code = clap_err.exit_code();
                let _ = clap_err.print();
                return code;
            }
            let msg = serde_json::json!({ "error": format!("{e:#}") });
            eprintln!("{msg}");
            1
        }
    }
}
