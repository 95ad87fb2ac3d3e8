use serde::{Deserialize, Serialize};

use super::{DialogueCase, Tokens};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: String,
    pub parent: Option<usize>,
    pub tokens: Tokens,
}

/// A discussion thread: the root opens the topic, every reply points at the
/// message it answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageTree {
    pub nodes: Vec<TreeNode>,
    pub knowledge_ref: String,
}

impl MessageTree {
    pub fn validate(&self) -> Result<usize> {
        let roots: Vec<usize> = (0..self.nodes.len()).filter(|&i| self.nodes[i].parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::Corpus(format!("message tree has {} roots", roots.len())));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                if p >= self.nodes.len() || p == i {
                    return Err(Error::Corpus(format!("node `{}` has an invalid parent", n.id)));
                }
            }
            // walk up; a path longer than the node count means a cycle
            let mut cur = i;
            let mut steps = 0;
            while let Some(p) = self.nodes[cur].parent {
                cur = p;
                steps += 1;
                if steps > self.nodes.len() {
                    return Err(Error::Corpus(format!("cycle through node `{}`", n.id)));
                }
            }
        }
        Ok(roots[0])
    }

    fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                ch[p].push(i);
            }
        }
        ch
    }

    fn path_to(&self, mut node: usize) -> Vec<usize> {
        let mut path = vec![node];
        while let Some(p) = self.nodes[node].parent {
            path.push(p);
            node = p;
        }
        path.reverse();
        path
    }
}

/// One case per node with replies: the context is the root-to-node path and
/// the responses are all of that node's children.
pub fn extract_cases(tree: &MessageTree, knowledge_sentences: &[Tokens]) -> Result<Vec<DialogueCase>> {
    tree.validate()?;
    let children = tree.children();
    let mut out = Vec::new();
    for (i, kids) in children.iter().enumerate() {
        if kids.is_empty() {
            continue;
        }
        let context = tree.path_to(i).into_iter().map(|n| tree.nodes[n].tokens.clone()).collect();
        let responses = kids.iter().map(|&k| tree.nodes[k].tokens.clone()).collect();
        out.push(DialogueCase {
            case_id: format!("{}:{}", tree.knowledge_ref, tree.nodes[i].id),
            context,
            knowledge: knowledge_sentences.to_vec(),
            responses,
            meta: None,
        });
    }
    Ok(out)
}
