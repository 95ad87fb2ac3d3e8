use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::DialogueCase;

pub const UNK: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const EOS: usize = 3;

const SPECIALS: [&str; 4] = ["[UNK]", "[CLS]", "[SEP]", "[EOS]"];

/// Token table shared by every model component. Ids 0..4 are reserved.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials followed by the given tokens in sorted order.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a String>) -> Self {
        let set: BTreeSet<&String> = tokens.into_iter().filter(|t| !SPECIALS.contains(&t.as_str())).collect();
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(set.into_iter().cloned());
        Self::from(all)
    }

    pub fn from_cases(cases: &[DialogueCase]) -> Self {
        Self::from_tokens(cases.iter().flat_map(|c| c.context.iter().chain(&c.knowledge).chain(&c.responses).flat_map(|s| s.iter())))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Unknown tokens map to [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}
