use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{check_unique_ids, CorpusSplit, DialogueCase};
use crate::error::{Error, Result};

/// Split name → case ids.
pub type SplitManifest = BTreeMap<String, Vec<String>>;

/// Reads a JSON-lines corpus, validating every case.
pub fn read_corpus(path: &Path) -> Result<Vec<DialogueCase>> {
    let reader = BufReader::new(File::open(path)?);
    let mut cases = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let case: DialogueCase =
            serde_json::from_str(&line).map_err(|e| Error::Corpus(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        case.validate()?;
        cases.push(case);
    }
    check_unique_ids(&cases)?;
    Ok(cases)
}

pub fn write_corpus(path: &Path, cases: &[DialogueCase]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in cases {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

impl CorpusSplit {
    pub fn manifest(&self) -> SplitManifest {
        let ids = |v: &[DialogueCase]| v.iter().map(|c| c.case_id.clone()).collect();
        BTreeMap::from([
            ("train".to_string(), ids(&self.train)),
            ("valid".to_string(), ids(&self.valid)),
            ("general_test".to_string(), ids(&self.general_test)),
            ("focused_test".to_string(), ids(&self.focused_test)),
        ])
    }

    /// Rebuilds a split from a manifest over a corpus.
    pub fn from_manifest(cases: &[DialogueCase], manifest: &SplitManifest) -> Result<Self> {
        let by_id: BTreeMap<&str, &DialogueCase> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
        let pick = |name: &str| -> Result<Vec<DialogueCase>> {
            manifest
                .get(name)
                .map(Vec::as_slice)
                .unwrap_or_default()
                .iter()
                .map(|id| {
                    by_id.get(id.as_str()).map(|c| (*c).clone()).ok_or_else(|| Error::Corpus(format!("manifest names unknown case `{id}`")))
                })
                .collect()
        };
        Ok(Self { train: pick("train")?, valid: pick("valid")?, general_test: pick("general_test")?, focused_test: pick("focused_test")? })
    }

    /// Cases of one named partition.
    pub fn part(&self, name: &str) -> Result<&[DialogueCase]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "general_test" => Ok(&self.general_test),
            "focused_test" => Ok(&self.focused_test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

pub fn write_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<SplitManifest> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
