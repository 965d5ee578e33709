//! Token-level prefix tree over step prompts and the replay schedule it implies.
//!
//! Every unique node would be evaluated once by a prefix-sharing replayer,
//! so `1 - unique_nodes / total_inserted_tokens` is the fraction of per-token
//! forward evaluations avoided.

use std::collections::BTreeMap;

use crate::policy::{PolicySnapshot, PromptContext};
use crate::store::StepRecord;
use crate::tokenizer::TokenId;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PrefixTreeError {
    #[error("prefix tree is empty")]
    EmptyTree,
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
struct Node<K> {
    key: Option<K>,
    parent: Option<NodeId>,
    children: BTreeMap<K, NodeId>,
    refcount: usize,
}

#[derive(Debug, Clone)]
pub struct PrefixTree<K = TokenId> {
    nodes: Vec<Node<K>>,
    total_inserted_tokens: usize,
    sequences: usize,
}

impl<K: Ord + Copy> Default for PrefixTree<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K: Ord + Copy> PrefixTree<K> {
    pub fn new() -> Self {
        Self {
            nodes: vec![Node {
                key: None,
                parent: None,
                children: BTreeMap::new(),
                refcount: 0,
            }],
            total_inserted_tokens: 0,
            sequences: 0,
        }
    }

    pub const ROOT: NodeId = 0;

    /// Inserts a sequence and returns the node of its last token. Empty
    /// sequences map to the root and change nothing.
    pub fn insert(&mut self, ids: &[K]) -> NodeId {
        if ids.is_empty() {
            return Self::ROOT;
        }
        let mut cur = Self::ROOT;
        self.nodes[cur].refcount += 1;
        for &k in ids {
            cur = match self.nodes[cur].children.get(&k) {
                Some(&child) => child,
                None => {
                    let id = self.nodes.len();
                    self.nodes.push(Node {
                        key: Some(k),
                        parent: Some(cur),
                        children: BTreeMap::new(),
                        refcount: 0,
                    });
                    self.nodes[cur].children.insert(k, id);
                    id
                }
            };
            self.nodes[cur].refcount += 1;
        }
        self.total_inserted_tokens += ids.len();
        self.sequences += 1;
        cur
    }

    /// Nodes excluding the root.
    pub fn unique_nodes(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn total_inserted_tokens(&self) -> usize {
        self.total_inserted_tokens
    }

    pub fn sequences(&self) -> usize {
        self.sequences
    }

    pub fn key(&self, node: NodeId) -> Option<K> {
        self.nodes[node].key
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.nodes[node].parent
    }

    /// Number of inserted sequences passing through `node`.
    pub fn refcount(&self, node: NodeId) -> usize {
        self.nodes[node].refcount
    }

    /// Node reached by `ids`, if every prefix is present.
    pub fn find(&self, ids: &[K]) -> Option<NodeId> {
        ids.iter()
            .try_fold(Self::ROOT, |cur, k| self.nodes[cur].children.get(k).copied())
    }

    pub fn savings_ratio(&self) -> Result<f64, PrefixTreeError> {
        if self.total_inserted_tokens == 0 {
            return Err(PrefixTreeError::EmptyTree);
        }
        Ok(1.0 - self.unique_nodes() as f64 / self.total_inserted_tokens as f64)
    }

    /// Depth-first preorder over all non-root nodes: every parent precedes
    /// its children and each node appears once.
    pub fn replay_plan(&self) -> Result<Vec<NodeId>, PrefixTreeError> {
        if self.unique_nodes() == 0 {
            return Err(PrefixTreeError::EmptyTree);
        }
        let mut plan = Vec::with_capacity(self.unique_nodes());
        let mut stack: Vec<NodeId> = self.nodes[Self::ROOT].children.values().rev().copied().collect();
        while let Some(n) = stack.pop() {
            plan.push(n);
            stack.extend(self.nodes[n].children.values().rev());
        }
        Ok(plan)
    }
}

/// Keys for replaying whole steps: prompt and response tokens are kept
/// apart so a shared path always has one interpretation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ReplayKey {
    Prompt(TokenId),
    Response(TokenId),
}

pub fn step_key_sequence(record: &StepRecord) -> Vec<ReplayKey> {
    record
        .prompt_ids
        .ids
        .iter()
        .map(|&t| ReplayKey::Prompt(t))
        .chain(record.response_ids.ids.iter().map(|&t| ReplayKey::Response(t)))
        .collect()
}

/// A tree over `prompt ++ response` key sequences for a batch of steps.
pub struct StepReplay {
    pub tree: PrefixTree<ReplayKey>,
    /// Leaf node per inserted record.
    pub ends: Vec<NodeId>,
}

impl StepReplay {
    pub fn build<'a>(records: impl IntoIterator<Item = &'a StepRecord>) -> Self {
        let mut tree = PrefixTree::new();
        let ends = records
            .into_iter()
            .map(|r| tree.insert(&step_key_sequence(r)))
            .collect();
        Self { tree, ends }
    }

    /// Walks the plan once, evaluating each response node's log-prob from
    /// its parent's decoding state. Returns a per-node log-prob (`None` for
    /// prompt nodes).
    pub fn planned_logprobs(&self, policy: &PolicySnapshot) -> Result<Vec<Option<f64>>, PrefixTreeError> {
        let plan = self.tree.replay_plan()?;
        let spec = policy.spec();
        // Decoding state after each node: prompt summary, previous response token, position.
        let mut state: Vec<Option<(PromptContext, Option<TokenId>, usize)>> = vec![None; self.tree.nodes.len()];
        state[PrefixTree::<ReplayKey>::ROOT] = Some((PromptContext::default(), None, 0));
        let mut out = vec![None; self.tree.nodes.len()];
        for n in plan {
            let parent = self.tree.parent(n).expect("non-root");
            let (ctx, prev, pos) = state[parent].expect("parent evaluated first");
            match self.tree.key(n).expect("non-root") {
                ReplayKey::Prompt(t) => state[n] = Some((ctx.extend(spec, t), None, 0)),
                ReplayKey::Response(t) => {
                    out[n] = Some(policy.logprobs_at(&ctx, prev, pos)[t as usize]);
                    state[n] = Some((ctx, Some(t), pos + 1));
                }
            }
        }
        Ok(out)
    }

    /// Per-token response log-probs of record `i`, read off the planned pass.
    pub fn record_logprobs(&self, planned: &[Option<f64>], i: usize) -> Vec<f64> {
        let mut path = Vec::new();
        let mut cur = self.ends[i];
        while let Some(p) = self.tree.parent(cur) {
            if let Some(lp) = planned[cur] {
                path.push(lp);
            }
            cur = p;
        }
        path.reverse();
        path
    }
}

/// Prompt-sharing statistics for a batch of step records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefixStats {
    pub total_tokens: usize,
    pub unique_nodes: usize,
    pub savings_ratio: f64,
}

pub fn prompt_prefix_stats<'a>(records: impl IntoIterator<Item = &'a StepRecord>) -> Option<PrefixStats> {
    let mut tree = PrefixTree::new();
    for r in records {
        tree.insert(&r.prompt_ids.ids);
    }
    tree.savings_ratio().ok().map(|savings_ratio| PrefixStats {
        total_tokens: tree.total_inserted_tokens(),
        unique_nodes: tree.unique_nodes(),
        savings_ratio,
    })
}
