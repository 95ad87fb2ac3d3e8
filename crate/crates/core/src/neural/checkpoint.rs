use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::ModelParams;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub d: usize,
    pub vocab_size: usize,
    pub shapes: BTreeMap<String, (usize, usize)>,
    /// Hash of the run configuration that produced the parameters.
    pub config_hash: String,
    pub rng: Option<ChaCha8Rng>,
    pub epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: ModelParams,
}

impl Checkpoint {
    pub fn new(model: ModelParams, config_hash: impl Into<String>, rng: Option<ChaCha8Rng>, epoch: Option<usize>) -> Self {
        let header = CheckpointHeader {
            schema_version: SCHEMA_VERSION,
            d: model.config.d,
            vocab_size: model.vocab.len(),
            shapes: model.params.shapes(),
            config_hash: config_hash.into(),
            rng,
            epoch,
        };
        Self { header, model }
    }

    /// Checks the header against the parameters it describes.
    pub fn verify(&self) -> Result<()> {
        let h = &self.header;
        let fail = |m: String| Err(Error::Checkpoint(m));
        if h.schema_version != SCHEMA_VERSION {
            return fail(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", h.schema_version));
        }
        if h.d != self.model.config.d {
            return fail(format!("header d = {} but model config has d = {}", h.d, self.model.config.d));
        }
        if h.vocab_size != self.model.vocab.len() {
            return fail(format!("header vocab_size = {} but vocabulary has {}", h.vocab_size, self.model.vocab.len()));
        }
        let actual = self.model.params.shapes();
        if actual != h.shapes {
            let name = h.shapes.keys().chain(actual.keys()).find(|k| h.shapes.get(*k) != actual.get(*k)).cloned().unwrap_or_default();
            return fail(format!("shape of `{name}` disagrees with the header"));
        }
        let expected = ModelParams::new(self.model.config.clone(), self.model.vocab.clone())?.params.shapes();
        if expected != actual {
            return fail("parameter shapes do not match the model configuration".into());
        }
        if !self.model.params.all_finite() {
            return fail("non-finite parameter values".into());
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, checkpoint)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw: serde_json::Value = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let version = raw.pointer("/header/schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "{}: schema_version {:?} is not supported (expected {SCHEMA_VERSION})",
            path.display(),
            version
        )));
    }
    let ck: Checkpoint = serde_json::from_value(raw)?;
    ck.verify().map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(ck)
}
