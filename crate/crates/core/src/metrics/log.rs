use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueCase, Tokens};
use crate::error::{Error, Result};

/// What a generation was conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grounding {
    Span { start: usize, end: usize },
    Sentence { sentence_index: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Repetition {
    pub grounding: Grounding,
    pub tokens: Tokens,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseGenerations {
    pub case_id: String,
    pub repetitions: Vec<Repetition>,
}

/// Repeated generations for a set of cases.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GenerationLog {
    pub cases: Vec<CaseGenerations>,
}

impl GenerationLog {
    /// The common repetition count; errors if cases disagree or the log is empty.
    pub fn repetition_count(&self) -> Result<usize> {
        let first = self.cases.first().ok_or(Error::Empty("generation log"))?.repetitions.len();
        if let Some(c) = self.cases.iter().find(|c| c.repetitions.len() != first) {
            return Err(Error::Precondition(format!(
                "case {} has {} repetitions but the log uses {first}",
                c.case_id,
                c.repetitions.len()
            )));
        }
        Ok(first)
    }

    /// Checks that every grounding lies inside its case's knowledge.
    pub fn validate_against(&self, cases: &[DialogueCase]) -> Result<()> {
        self.repetition_count()?;
        let by_id: BTreeMap<&str, &DialogueCase> = cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
        for entry in &self.cases {
            let case = by_id
                .get(entry.case_id.as_str())
                .ok_or_else(|| Error::Precondition(format!("log references unknown case {}", entry.case_id)))?;
            let (lk, m) = (case.knowledge_len(), case.knowledge.len());
            for rep in &entry.repetitions {
                let ok = match rep.grounding {
                    Grounding::Span { start, end } => start <= end && end < lk,
                    Grounding::Sentence { sentence_index } => sentence_index < m,
                };
                if !ok {
                    return Err(Error::Precondition(format!(
                        "case {}: grounding {:?} is outside the knowledge",
                        entry.case_id, rep.grounding
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn all_generations(&self) -> impl Iterator<Item = &Tokens> {
        self.cases.iter().flat_map(|c| c.repetitions.iter().map(|r| &r.tokens))
    }
}

pub fn read_generation_log(path: &Path) -> Result<GenerationLog> {
    let reader = BufReader::new(File::open(path)?);
    let mut cases = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: CaseGenerations = serde_json::from_str(&line).map_err(|e| Error::Corpus(format!("{}:{}: {e}", path.display(), i + 1)))?;
        cases.push(c);
    }
    Ok(GenerationLog { cases })
}

pub fn write_generation_log(path: &Path, log: &GenerationLog) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in &log.cases {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grounding_wire_format() {
        let s = serde_json::to_string(&Grounding::Span { start: 1, end: 3 }).unwrap();
        assert_eq!(s, r#"{"start":1,"end":3}"#);
        let g: Grounding = serde_json::from_str(r#"{"sentence_index":2}"#).unwrap();
        assert_eq!(g, Grounding::Sentence { sentence_index: 2 });
    }

    #[test]
    fn round_trip_and_uniform_count() {
        let rep = |g, t: &str| Repetition { grounding: g, tokens: vec![t.to_string()] };
        let log = GenerationLog {
            cases: vec![
                CaseGenerations { case_id: "a".into(), repetitions: vec![rep(Grounding::Span { start: 0, end: 1 }, "x"); 2] },
                CaseGenerations { case_id: "b".into(), repetitions: vec![rep(Grounding::Sentence { sentence_index: 0 }, "y"); 2] },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        write_generation_log(&p, &log).unwrap();
        assert_eq!(read_generation_log(&p).unwrap(), log);
        assert_eq!(log.repetition_count().unwrap(), 2);
        let mut bad = log.clone();
        bad.cases[1].repetitions.pop();
        assert!(bad.repetition_count().is_err());
    }
}
