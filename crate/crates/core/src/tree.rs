//! Speculative token trees and their flattened, masked batch form.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::ProbVector;
use crate::vocab::TokenId;

/// Which stage produced a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Oracle,
    Draft,
    Draft2,
}

impl StageTag {
    pub const ALL: [StageTag; 3] = [StageTag::Oracle, StageTag::Draft, StageTag::Draft2];

    pub fn as_str(self) -> &'static str {
        match self {
            StageTag::Oracle => "oracle",
            StageTag::Draft => "draft",
            StageTag::Draft2 => "draft2",
        }
    }
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A batch of tokens arranged as a forest over the cached prefix.
///
/// Node `i` sits at position `prefix_len + depth(i)` and may attend to node `j`
/// of the batch iff `j` is an ancestor of `i` or `i` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeBatch {
    tokens: Vec<TokenId>,
    parents: Vec<Option<usize>>,
    positions: Vec<usize>,
    mask: Vec<bool>,
    prefix_len: usize,
}

impl TreeBatch {
    /// Build from parent links. Parents must precede children.
    pub fn from_parents(
        tokens: Vec<TokenId>,
        parents: Vec<Option<usize>>,
        prefix_len: usize,
    ) -> Result<Self> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::InvalidBatch("empty batch".into()));
        }
        if parents.len() != n {
            return Err(Error::InvalidBatch(format!(
                "{} parents for {} tokens",
                parents.len(),
                n
            )));
        }
        let mut positions = Vec::with_capacity(n);
        let mut mask = vec![false; n * n];
        for i in 0..n {
            match parents[i] {
                Some(p) if p >= i => {
                    return Err(Error::InvalidBatch(format!(
                        "node {i} has parent {p}, which does not precede it"
                    )))
                }
                Some(p) => {
                    positions.push(positions[p] + 1);
                    let (before, row) = mask.split_at_mut(i * n);
                    row[..n].copy_from_slice(&before[p * n..p * n + n]);
                }
                None => positions.push(prefix_len),
            }
            mask[i * n + i] = true;
        }
        Ok(TreeBatch { tokens, parents, positions, mask, prefix_len })
    }

    /// A linear chain: node `i` is the parent of node `i + 1`.
    pub fn chain(tokens: Vec<TokenId>, prefix_len: usize) -> Result<Self> {
        let parents = (0..tokens.len()).map(|i| i.checked_sub(1)).collect();
        Self::from_parents(tokens, parents, prefix_len)
    }

    /// Build from explicit positions and mask rows, checking that they describe a
    /// topologically ordered forest.
    pub fn from_parts(
        tokens: Vec<TokenId>,
        positions: Vec<usize>,
        mask: Vec<Vec<bool>>,
        prefix_len: usize,
    ) -> Result<Self> {
        let n = tokens.len();
        if positions.len() != n || mask.len() != n || mask.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidBatch("mask/positions shape mismatch".into()));
        }
        let mut parents = Vec::with_capacity(n);
        for (i, row) in mask.iter().enumerate() {
            if !row[i] {
                return Err(Error::InvalidBatch(format!("node {i} does not attend to itself")));
            }
            if let Some(j) = (i + 1..n).find(|&j| row[j]) {
                return Err(Error::InvalidBatch(format!(
                    "node {i} attends to later node {j}; mask is not lower-triangular"
                )));
            }
            let ancestors: Vec<usize> = (0..i).filter(|&j| row[j]).collect();
            let parent = ancestors.iter().copied().max_by_key(|&j| positions[j]);
            parents.push(parent);
        }
        let batch = Self::from_parents(tokens, parents, prefix_len)?;
        if batch.positions != positions {
            return Err(Error::InvalidBatch(
                "positions are not prefix_len + depth for every node".into(),
            ));
        }
        for (i, row) in mask.iter().enumerate() {
            if (0..n).any(|j| batch.mask[i * n + j] != row[j]) {
                return Err(Error::InvalidBatch(format!(
                    "mask row {i} is not the ancestor set of node {i}"
                )));
            }
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    /// `true` iff node `j` is an ancestor of node `i` or `i` itself.
    #[inline]
    pub fn attends(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.len() + j]
    }

    /// Mask as nested rows.
    pub fn mask_rows(&self) -> Vec<Vec<bool>> {
        self.mask.chunks(self.len()).map(|r| r.to_vec()).collect()
    }

    /// Indices from the batch root down to `i`, inclusive.
    pub fn path(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = i;
        while let Some(p) = self.parents[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Check the batch was built against a cache of `prefix_len` tokens.
    pub fn check_prefix(&self, prefix_len: usize) -> Result<()> {
        if self.prefix_len != prefix_len {
            return Err(Error::InvalidBatch(format!(
                "batch built for prefix length {} but state holds {}",
                self.prefix_len, prefix_len
            )));
        }
        Ok(())
    }

    /// Check `nodes` is a chain from a batch root downwards.
    pub fn check_chain(&self, nodes: &[usize]) -> Result<()> {
        for (k, &node) in nodes.iter().enumerate() {
            if node >= self.len() {
                return Err(Error::InvalidCommit(format!("node {node} outside batch")));
            }
            let expected = if k == 0 { None } else { Some(nodes[k - 1]) };
            if self.parents[node] != expected {
                return Err(Error::InvalidCommit(format!(
                    "node {node} does not continue the chain {:?}",
                    &nodes[..k]
                )));
            }
        }
        Ok(())
    }
}

/// One node of a [`SpecTree`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpecNode {
    pub parent: Option<usize>,
    pub token: TokenId,
    pub depth: usize,
    /// Sum of draft log-probabilities along the path from the root.
    pub cum_logq: f64,
    pub proposer: StageTag,
    /// Distinct child nodes, in insertion order.
    pub children: Vec<usize>,
    /// Child nodes in acceptance order. Stochastic trees may repeat a node when the
    /// same token was sampled more than once.
    pub candidates: Vec<usize>,
    /// Draft distribution children were proposed from, once the draft has evaluated
    /// this node.
    pub draft_dist: Option<ProbVector>,
}

/// Speculative continuation tree. Node 0 is the root: the last committed token,
/// not yet in any model's cache.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecTree {
    nodes: Vec<SpecNode>,
}

impl SpecTree {
    pub fn new(root: TokenId) -> Self {
        SpecTree {
            nodes: vec![SpecNode {
                parent: None,
                token: root,
                depth: 0,
                cum_logq: 0.0,
                proposer: StageTag::Oracle,
                children: Vec::new(),
                candidates: Vec::new(),
                draft_dist: None,
            }],
        }
    }

    /// Assemble from raw nodes, validating structure.
    pub fn from_nodes(nodes: Vec<SpecNode>) -> Result<Self> {
        let tree = SpecTree { nodes };
        tree.validate()?;
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[SpecNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &SpecNode {
        &self.nodes[i]
    }

    pub(crate) fn node_mut(&mut self, i: usize) -> &mut SpecNode {
        &mut self.nodes[i]
    }

    pub fn root_token(&self) -> TokenId {
        self.nodes[0].token
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Nodes that have at least one child.
    pub fn internal_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.nodes[i].children.is_empty()).collect()
    }

    /// Root-to-`i` token path, root included.
    pub fn path_tokens(&self, i: usize) -> Vec<TokenId> {
        let mut out = vec![self.nodes[i].token];
        let mut cur = i;
        while let Some(p) = self.nodes[cur].parent {
            out.push(self.nodes[p].token);
            cur = p;
        }
        out.reverse();
        out
    }

    pub fn child_with_token(&self, parent: usize, token: TokenId) -> Option<usize> {
        self.nodes[parent].children.iter().copied().find(|&c| self.nodes[c].token == token)
    }

    /// Append `token` as a candidate of `parent`. Reuses an existing child carrying the
    /// same token; returns the node index and whether a node was created.
    pub fn add_candidate(
        &mut self,
        parent: usize,
        token: TokenId,
        logq: f64,
        proposer: StageTag,
    ) -> (usize, bool) {
        if let Some(existing) = self.child_with_token(parent, token) {
            self.nodes[parent].candidates.push(existing);
            return (existing, false);
        }
        let idx = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        let cum_logq = self.nodes[parent].cum_logq + logq;
        self.nodes.push(SpecNode {
            parent: Some(parent),
            token,
            depth,
            cum_logq,
            proposer,
            children: Vec::new(),
            candidates: Vec::new(),
            draft_dist: None,
        });
        self.nodes[parent].children.push(idx);
        self.nodes[parent].candidates.push(idx);
        (idx, true)
    }

    /// Checks single root at index 0, topological order, depth bookkeeping and
    /// consistent child/candidate lists.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidTree("tree has no nodes".into()));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match node.parent {
                None if i == 0 => {
                    if node.depth != 0 {
                        return Err(Error::InvalidTree("root depth must be 0".into()));
                    }
                }
                None => return Err(Error::InvalidTree(format!("second root at node {i}"))),
                Some(p) if p >= i => {
                    return Err(Error::InvalidTree(format!(
                        "node {i} has parent {p}; order violation or cycle"
                    )))
                }
                Some(p) => {
                    if node.depth != self.nodes[p].depth + 1 {
                        return Err(Error::InvalidTree(format!("node {i} has inconsistent depth")));
                    }
                    if !self.nodes[p].children.contains(&i) {
                        return Err(Error::InvalidTree(format!(
                            "node {i} missing from children of {p}"
                        )));
                    }
                }
            }
            for &c in node.children.iter().chain(&node.candidates) {
                if c >= self.nodes.len() || self.nodes[c].parent != Some(i) {
                    return Err(Error::InvalidTree(format!("node {i} lists foreign child {c}")));
                }
            }
        }
        Ok(())
    }
}

/// Flatten a tree into a batch: positions `prefix_len + depth`, ancestor mask.
pub fn tree_mask(tree: &SpecTree, prefix_len: usize) -> Result<TreeBatch> {
    tree.validate()?;
    let tokens = tree.nodes.iter().map(|n| n.token).collect();
    let parents = tree.nodes.iter().map(|n| n.parent).collect();
    TreeBatch::from_parents(tokens, parents, prefix_len)
        .map_err(|e| Error::InvalidTree(e.to_string()))
}
