//! Bayesian strategy networks: a DAG over disjoint groups of action
//! dimensions whose parent links define the chain-rule factorization
//! `π(𝒜|s) = Πᵢ πᵢ(aᵢ | s, a_parents(i))`.
//!
//! Topologies are JSON documents:
//!
//! ```json
//! { "nodes": [
//!     { "id": "t1", "action_dims": [0], "parents": [] },
//!     { "id": "t2", "action_dims": [1], "parents": ["t1"] }
//! ] }
//! ```
//!
//! An optional top-level `"action_dim_total"` pins the action width;
//! otherwise it is one past the largest listed dimension. Either way the
//! dimensions must partition `0..action_dim_total` exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("topology has no nodes")]
    Empty,
    #[error("duplicate node id {0:?}")]
    DuplicateId(String),
    #[error("node {0:?} owns no action dimensions")]
    EmptyDims(String),
    #[error("node {0:?}: action_dims must be strictly increasing")]
    UnsortedDims(String),
    #[error("node {0:?} lists itself as a parent")]
    SelfParent(String),
    #[error("node {node:?} lists parent {parent:?} more than once")]
    DuplicateParent { node: String, parent: String },
    #[error("node {node:?} has unknown parent {parent:?}")]
    UnknownParent { node: String, parent: String },
    #[error("action dimension {dim} is owned by both {first:?} and {second:?}")]
    OverlappingDim {
        dim: usize,
        first: String,
        second: String,
    },
    #[error("action dimension {dim} is not owned by any node")]
    MissingDim { dim: usize },
    #[error("node {node:?}: action dimension {dim} is outside 0..{total}")]
    DimOutOfRange { node: String, dim: usize, total: usize },
    #[error("cycle: {}", .path.join("→"))]
    Cycle { path: Vec<String> },
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("topology covers {found} action dimensions but the environment has {expected}")]
    ActionDimMismatch { expected: usize, found: usize },
    #[error("unknown topology preset {0:?}")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BsnNode {
    pub id: String,
    pub action_dims: Vec<usize>,
    #[serde(default)]
    pub parents: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologyDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action_dim_total: Option<usize>,
    nodes: Vec<BsnNode>,
}

/// A validated strategy network. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologyDoc", into = "TopologyDoc")]
pub struct BsnGraph {
    nodes: Vec<BsnNode>,
    action_dim_total: usize,
    index: BTreeMap<String, usize>,
    /// Parent indices of each node, ordered by topological position.
    parents: Vec<Vec<usize>>,
    order: Vec<usize>,
}

impl TryFrom<TopologyDoc> for BsnGraph {
    type Error = TopologyError;

    fn try_from(doc: TopologyDoc) -> Result<Self, TopologyError> {
        BsnGraph::new(doc.nodes, doc.action_dim_total)
    }
}

impl From<BsnGraph> for TopologyDoc {
    fn from(graph: BsnGraph) -> Self {
        TopologyDoc {
            action_dim_total: Some(graph.action_dim_total),
            nodes: graph.nodes,
        }
    }
}

/// Parses and validates a topology document.
pub fn parse_topology(text: &str) -> Result<BsnGraph, TopologyError> {
    let doc: TopologyDoc = serde_json::from_str(text).map_err(|e| TopologyError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    BsnGraph::try_from(doc)
}

pub const PRESETS: [&str; 5] = ["single", "chain", "hopper-chain", "walker-tree", "humanoid-star"];

/// A shipped topology. `single` and `chain` are built for the given action
/// width; the others are fixed documents and are checked against it.
pub fn preset(name: &str, action_dim: usize) -> Result<BsnGraph, TopologyError> {
    let text = match name {
        "single" => return Ok(BsnGraph::single(action_dim)),
        "chain" => return Ok(BsnGraph::chain(action_dim)),
        "hopper-chain" => include_str!("../topologies/hopper-chain.json"),
        "walker-tree" => include_str!("../topologies/walker-tree.json"),
        "humanoid-star" => include_str!("../topologies/humanoid-star.json"),
        other => return Err(TopologyError::UnknownPreset(other.to_string())),
    };
    let graph = parse_topology(text)?;
    graph.check_action_dim(action_dim)?;
    Ok(graph)
}

impl BsnGraph {
    pub fn new(nodes: Vec<BsnNode>, action_dim_total: Option<usize>) -> Result<Self, TopologyError> {
        if nodes.is_empty() {
            return Err(TopologyError::Empty);
        }
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(TopologyError::DuplicateId(n.id.clone()));
            }
        }

        let inferred = nodes
            .iter()
            .flat_map(|n| n.action_dims.iter().copied())
            .max()
            .map_or(0, |m| m + 1);
        let total = action_dim_total.unwrap_or(inferred);
        let mut owner: Vec<Option<usize>> = vec![None; total];
        for (i, n) in nodes.iter().enumerate() {
            if n.action_dims.is_empty() {
                return Err(TopologyError::EmptyDims(n.id.clone()));
            }
            if n.action_dims.windows(2).any(|w| w[0] >= w[1]) {
                return Err(TopologyError::UnsortedDims(n.id.clone()));
            }
            for &d in &n.action_dims {
                if d >= total {
                    return Err(TopologyError::DimOutOfRange {
                        node: n.id.clone(),
                        dim: d,
                        total,
                    });
                }
                if let Some(prev) = owner[d] {
                    return Err(TopologyError::OverlappingDim {
                        dim: d,
                        first: nodes[prev].id.clone(),
                        second: n.id.clone(),
                    });
                }
                owner[d] = Some(i);
            }
        }
        if let Some(dim) = owner.iter().position(Option::is_none) {
            return Err(TopologyError::MissingDim { dim });
        }

        let mut parent_idx = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let mut seen = BTreeSet::new();
            let mut ps = Vec::with_capacity(n.parents.len());
            for p in &n.parents {
                if p == &n.id {
                    return Err(TopologyError::SelfParent(n.id.clone()));
                }
                let Some(&pi) = index.get(p) else {
                    return Err(TopologyError::UnknownParent {
                        node: n.id.clone(),
                        parent: p.clone(),
                    });
                };
                if !seen.insert(pi) {
                    return Err(TopologyError::DuplicateParent {
                        node: n.id.clone(),
                        parent: p.clone(),
                    });
                }
                ps.push(pi);
            }
            parent_idx.push(ps);
        }

        let order = kahn_order(&nodes, &parent_idx)?;
        let mut position = vec![0; nodes.len()];
        for (pos, &i) in order.iter().enumerate() {
            position[i] = pos;
        }
        for ps in &mut parent_idx {
            ps.sort_by_key(|&p| position[p]);
        }

        Ok(Self {
            nodes,
            action_dim_total: total,
            index,
            parents: parent_idx,
            order,
        })
    }

    /// One node owning every dimension: the unfactorized (plain SAC) policy.
    pub fn single(action_dim: usize) -> Self {
        Self::new(
            vec![BsnNode {
                id: "t1".into(),
                action_dims: (0..action_dim).collect(),
                parents: vec![],
            }],
            Some(action_dim),
        )
        .expect("single-node topology is valid")
    }

    /// A chain `t1 → t2 → …`, one node per dimension.
    pub fn chain(action_dim: usize) -> Self {
        let nodes = (0..action_dim)
            .map(|d| BsnNode {
                id: format!("t{}", d + 1),
                action_dims: vec![d],
                parents: if d == 0 { vec![] } else { vec![format!("t{d}")] },
            })
            .collect();
        Self::new(nodes, Some(action_dim)).expect("chain topology is valid")
    }

    pub fn nodes(&self) -> &[BsnNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &BsnNode {
        &self.nodes[idx]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn action_dim_total(&self) -> usize {
        self.action_dim_total
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Node indices in evaluation order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Parent indices of node `idx`, in evaluation order.
    pub fn parents_of(&self, idx: usize) -> &[usize] {
        &self.parents[idx]
    }

    /// Node ids in evaluation order: every node after all of its parents,
    /// ties broken by lexicographic id.
    pub fn topological_order(&self) -> Vec<&str> {
        self.order.iter().map(|&i| self.nodes[i].id.as_str()).collect()
    }

    /// Total width of the parents' action groups, i.e. the extra input a
    /// node's sub-policy receives beyond the state.
    pub fn parent_action_width(&self, id: &str) -> Result<usize, TopologyError> {
        let idx = self
            .index_of(id)
            .ok_or_else(|| TopologyError::UnknownNode(id.to_string()))?;
        Ok(self.parent_width_of(idx))
    }

    pub fn parent_width_of(&self, idx: usize) -> usize {
        self.parents[idx]
            .iter()
            .map(|&p| self.nodes[p].action_dims.len())
            .sum()
    }

    /// Chain-rule rendering such as `P(t1)P(t2|t1)P(t3|t2)`; parents inside a
    /// conditional are sorted lexicographically and comma separated.
    pub fn factorization_string(&self) -> String {
        let mut out = String::new();
        for &i in &self.order {
            let node = &self.nodes[i];
            let mut parents: Vec<&str> = node.parents.iter().map(String::as_str).collect();
            parents.sort_unstable();
            if parents.is_empty() {
                out.push_str(&format!("P({})", node.id));
            } else {
                out.push_str(&format!("P({}|{})", node.id, parents.join(",")));
            }
        }
        out
    }

    pub fn check_action_dim(&self, expected: usize) -> Result<(), TopologyError> {
        if self.action_dim_total != expected {
            return Err(TopologyError::ActionDimMismatch {
                expected,
                found: self.action_dim_total,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }
}

impl fmt::Display for BsnGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.factorization_string())
    }
}

/// Kahn's algorithm with a lexicographically ordered ready set.
fn kahn_order(nodes: &[BsnNode], parents: &[Vec<usize>]) -> Result<Vec<usize>, TopologyError> {
    let n = nodes.len();
    let mut children = vec![Vec::new(); n];
    let mut indegree = vec![0usize; n];
    for (child, ps) in parents.iter().enumerate() {
        indegree[child] = ps.len();
        for &p in ps {
            children[p].push(child);
        }
    }
    let mut ready: BTreeSet<(&str, usize)> = (0..n)
        .filter(|&i| indegree[i] == 0)
        .map(|i| (nodes[i].id.as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(first) = ready.pop_first() {
        let i = first.1;
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert((nodes[c].id.as_str(), c));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    Err(TopologyError::Cycle {
        path: find_cycle(nodes, parents, &indegree),
    })
}

/// Every node left with positive in-degree after Kahn has a parent that is
/// also left over, so walking parents from any of them must revisit a node.
fn find_cycle(nodes: &[BsnNode], parents: &[Vec<usize>], indegree: &[usize]) -> Vec<String> {
    let remaining: BTreeSet<(&str, usize)> = (0..nodes.len())
        .filter(|&i| indegree[i] > 0)
        .map(|i| (nodes[i].id.as_str(), i))
        .collect();
    let start = remaining.first().expect("a cycle leaves nodes behind").1;
    let mut walk = vec![start];
    let mut pos_in_walk = BTreeMap::from([(start, 0usize)]);
    let mut current = start;
    loop {
        let next = parents[current]
            .iter()
            .copied()
            .filter(|&p| indegree[p] > 0)
            .min_by(|&a, &b| nodes[a].id.cmp(&nodes[b].id))
            .expect("leftover node has a leftover parent");
        if let Some(&at) = pos_in_walk.get(&next) {
            // walk[at..] follows parent links; reverse for edge direction.
            let mut cycle: Vec<usize> = walk[at..].to_vec();
            cycle.reverse();
            let min_pos = (0..cycle.len())
                .min_by(|&a, &b| nodes[cycle[a]].id.cmp(&nodes[cycle[b]].id))
                .unwrap();
            cycle.rotate_left(min_pos);
            let mut path: Vec<String> = cycle.iter().map(|&i| nodes[i].id.clone()).collect();
            path.push(path[0].clone());
            return path;
        }
        pos_in_walk.insert(next, walk.len());
        walk.push(next);
        current = next;
    }
}

/// Parses a rendering produced by [`BsnGraph::factorization_string`] back
/// into `(node, parents)` pairs.
pub fn parse_factorization(text: &str) -> Option<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        rest = rest.strip_prefix("P(")?;
        let close = rest.find(')')?;
        let body = &rest[..close];
        rest = &rest[close + 1..];
        let (node, parents) = match body.split_once('|') {
            Some((n, ps)) => (n, ps.split(',').map(str::to_string).collect()),
            None => (body, Vec::new()),
        };
        if node.is_empty() {
            return None;
        }
        out.push((node.to_string(), parents));
    }
    Some(out)
}
