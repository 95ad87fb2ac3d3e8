use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use spangen::corpus::{SplitRatios, SynthConfig};
use spangen::generation::GroundingMode;
use spangen::neural::{DecodeConfig, ModelConfig};
use spangen::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateOptions {
    pub repetitions: usize,
    pub mode: GroundingMode,
    /// Split part to generate for when a manifest is given.
    pub part: String,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { repetitions: 5, mode: GroundingMode::Span, part: "general_test".into() }
    }
}

/// Everything a command needs, merged from defaults, a config file and flags.
/// The top-level `seed` is copied into every nested seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub split: SplitRatios,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub generate: GenerateOptions,
}

const DERIVED_SEEDS: [&str; 3] = ["synth.seed", "train.seed", "model.init_seed"];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.split.validate().context("split")?;
        self.model.validate().context("model")?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.generate.repetitions == 0 {
            bail!("generate.repetitions: must be at least 1");
        }
        if !["train", "valid", "general_test", "focused_test"].contains(&self.generate.part.as_str()) {
            bail!("generate.part: unknown split part {:?}", self.generate.part);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Default,
    File,
    Flag,
    Seed,
}

/// The resolved configuration with the origin of every leaf value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

fn check_keys(given: &Map<String, Value>, schema: &Map<String, Value>, prefix: &str) -> Result<()> {
    for (k, v) in given {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(expected) = schema.get(k) else { bail!("unknown config key `{path}`") };
        if let (Value::Object(inner), Value::Object(inner_schema)) = (v, expected) {
            check_keys(inner, inner_schema, &path)?;
        }
    }
    Ok(())
}

fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn leaves(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, inner) in m {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                leaves(inner, &path, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

fn has_path(v: &Value, path: &str) -> bool {
    let mut cur = v;
    for part in path.split('.') {
        match cur.get(part) {
            Some(next) => cur = next,
            None => return false,
        }
    }
    true
}

/// `path=value` with `value` read as JSON, or as a string when it is not JSON.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw.split_once('=').ok_or_else(|| anyhow!("override `{raw}` must have the form key=value"))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

fn nest(path: &str, value: Value) -> Value {
    path.rsplit('.').fold(value, |acc, part| {
        let mut m = Map::new();
        m.insert(part.to_string(), acc);
        Value::Object(m)
    })
}

/// Merges defaults, the optional JSON file at `path` and `overrides`
/// (later overrides win). Unknown keys and out-of-range values are errors
/// naming the key.
pub fn load_config(path: Option<&Path>, overrides: &[(String, Value)]) -> Result<ResolvedConfig> {
    let defaults = serde_json::to_value(RunConfig::default())?;
    let schema = defaults.as_object().expect("config serializes to an object");

    let file_value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config file {}", p.display()))?;
            if text.trim().is_empty() {
                Value::Object(Map::new())
            } else {
                serde_json::from_str(&text).with_context(|| format!("parsing config file {}", p.display()))?
            }
        }
        None => Value::Object(Map::new()),
    };
    let file_map = file_value.as_object().ok_or_else(|| anyhow!("config file must contain a JSON object"))?;
    check_keys(file_map, schema, "")?;

    let mut flag_value = Value::Object(Map::new());
    for (k, v) in overrides {
        merge(&mut flag_value, &nest(k, v.clone()));
    }
    check_keys(flag_value.as_object().expect("object"), schema, "")?;

    let mut merged = defaults.clone();
    merge(&mut merged, &file_value);
    merge(&mut merged, &flag_value);
    for derived in DERIVED_SEEDS {
        let (section, key) = derived.split_once('.').expect("dotted");
        if has_path(&file_value, derived) || has_path(&flag_value, derived) {
            bail!("`{derived}` is derived from the top-level `seed`; set `seed` instead");
        }
        merged[section][key] = merged["seed"].clone();
    }

    let config: RunConfig = serde_json::from_value(merged.clone()).map_err(|e| anyhow!("invalid config: {e}"))?;
    config.validate()?;

    let mut paths = Vec::new();
    leaves(&merged, "", &mut paths);
    let provenance = paths
        .into_iter()
        .map(|p| {
            let src = if DERIVED_SEEDS.contains(&p.as_str()) {
                Source::Seed
            } else if has_path(&flag_value, &p) {
                Source::Flag
            } else if has_path(&file_value, &p) {
                Source::File
            } else {
                Source::Default
            };
            (p, src)
        })
        .collect();
    Ok(ResolvedConfig { config, provenance })
}
