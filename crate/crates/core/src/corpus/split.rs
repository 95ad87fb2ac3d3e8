use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{passes_focused_filter, passes_general_filter, DialogueCase};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, valid: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|r| !r.is_finite() || *r < 0.0) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {all:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<DialogueCase>,
    pub valid: Vec<DialogueCase>,
    pub general_test: Vec<DialogueCase>,
    pub focused_test: Vec<DialogueCase>,
}

impl CorpusSplit {
    pub fn total(&self) -> usize {
        self.train.len() + self.valid.len() + self.general_test.len() + self.focused_test.len()
    }
}

fn case_hash(seed: u64, case_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(case_id.as_bytes());
    h.finalize().into()
}

/// Orders cases by a seeded hash of their id and cuts the order at the
/// ratio quotas. Test cases that pass the focused filter move to
/// `focused_test`. Each partition is sorted by `case_id`.
pub fn split_corpus(cases: &[DialogueCase], ratios: SplitRatios, seed: u64) -> Result<CorpusSplit> {
    ratios.validate()?;
    super::check_unique_ids(cases)?;
    let mut keyed: Vec<([u8; 32], &DialogueCase)> = cases.iter().map(|c| (case_hash(seed, &c.case_id), c)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.case_id.cmp(&b.1.case_id)));

    let n = cases.len();
    let n_train = ((ratios.train * n as f64).round() as usize).min(n);
    let n_valid = ((ratios.valid * n as f64).round() as usize).min(n - n_train);

    let mut split = CorpusSplit::default();
    for (i, (_, case)) in keyed.into_iter().enumerate() {
        let case = case.clone();
        if i < n_train {
            split.train.push(case);
        } else if i < n_train + n_valid {
            split.valid.push(case);
        } else if passes_general_filter(&case).passed && passes_focused_filter(&case)? {
            split.focused_test.push(case);
        } else {
            split.general_test.push(case);
        }
    }
    for part in [&mut split.train, &mut split.valid, &mut split.general_test, &mut split.focused_test] {
        part.sort_by(|a, b| a.case_id.cmp(&b.case_id));
    }
    Ok(split)
}
