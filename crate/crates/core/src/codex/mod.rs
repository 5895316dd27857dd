//! The codified decision tree data model.
//!
//! A tree is a map of [`CdtNode`]s keyed by sequential [`NodeId`]s. Each node
//! carries behavioral statements and ordered question-labeled edges to its
//! children. Documents are canonical JSON: struct fields in declaration order,
//! nodes sorted by id, children in edge order.

mod edit;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use edit::{replay, EditCommand, EditError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid tree: {0}")]
pub struct ValidationError(pub String);

/// NLI verdict counts for one statement over a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ValidationStats {
    pub r_e: u32,
    pub r_n: u32,
    pub r_c: u32,
}

impl ValidationStats {
    pub fn new(r_e: u32, r_n: u32, r_c: u32) -> Self {
        Self { r_e, r_n, r_c }
    }

    pub fn total(&self) -> u32 {
        self.r_e + self.r_n + self.r_c
    }

    /// `r_e / (r_e + r_c)`; `None` when no pair was entailed or contradicted.
    pub fn accuracy(&self) -> Option<f64> {
        let denom = self.r_e + self.r_c;
        (denom > 0).then(|| f64::from(self.r_e) / f64::from(denom))
    }

    /// `r_e / (r_e + r_n + r_c)`; `None` on an empty dataset.
    pub fn usability(&self) -> Option<f64> {
        let denom = self.total();
        (denom > 0).then(|| f64::from(self.r_e) / f64::from(denom))
    }
}

impl fmt::Display for ValidationStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(e={}, n={}, c={})", self.r_e, self.r_n, self.r_c)
    }
}

/// A candidate trigger: a yes/no scene question and the behavior it predicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub question: String,
    pub statement: String,
    #[serde(default)]
    pub source_cluster: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_tag: Option<String>,
}

impl Hypothesis {
    pub fn new(question: impl Into<String>, statement: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            statement: statement.into(),
            source_cluster: 0,
            goal_tag: None,
        }
    }

    /// Whitespace- and case-normalized `(question, statement)` key.
    pub fn dedup_key(&self) -> (String, String) {
        (normalize(&self.question), normalize(&self.statement))
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatementKind {
    Global,
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatementStatus {
    Accepted,
    Abolished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub text: String,
    pub kind: StatementKind,
    pub status: StatementStatus,
    pub stats: ValidationStats,
}

impl Statement {
    pub fn accepted(text: impl Into<String>, kind: StatementKind, stats: ValidationStats) -> Self {
        Self {
            text: text.into(),
            kind,
            status: StatementStatus::Accepted,
            stats,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChildEdge {
    pub question: String,
    pub child: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CdtNode {
    pub id: NodeId,
    pub depth: u32,
    pub question_path: Vec<String>,
    pub statements: Vec<Statement>,
    pub children: Vec<ChildEdge>,
    /// Critical-hit leaves are terminal and never grown.
    #[serde(default)]
    pub is_leaf: bool,
}

impl CdtNode {
    pub fn root() -> Self {
        Self {
            id: NodeId(0),
            depth: 0,
            question_path: Vec::new(),
            statements: Vec::new(),
            children: Vec::new(),
            is_leaf: false,
        }
    }
}

/// Thresholds and switches for tree induction. Defaults are the reference
/// hyperparameters used for the published experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InductionConfig {
    pub theta_acc: f64,
    pub theta_rej: f64,
    pub theta_f: f64,
    pub d_max: u32,
    pub min_node_data: usize,
    pub hypotheses_per_cluster: usize,
    pub min_cluster_size: usize,
    pub max_clusters: usize,
    pub boosted_budget: Option<usize>,
    pub keep_abolished: bool,
    pub diversification: bool,
    pub clustering_enabled: bool,
    pub instruction_embedding: bool,
    /// Unit-normalize the scene and action halves before concatenation.
    pub normalize_embedding_halves: bool,
    pub seed: u64,
}

impl Default for InductionConfig {
    fn default() -> Self {
        Self {
            theta_acc: 0.75,
            theta_rej: 0.50,
            theta_f: 0.75,
            d_max: 4,
            min_node_data: 16,
            hypotheses_per_cluster: 3,
            min_cluster_size: 16,
            max_clusters: 8,
            boosted_budget: None,
            keep_abolished: false,
            diversification: true,
            clustering_enabled: true,
            instruction_embedding: true,
            normalize_embedding_halves: false,
            seed: 0,
        }
    }
}

impl InductionConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let bad = |msg: String| Err(ValidationError(msg));
        if !(0.0 <= self.theta_rej && self.theta_rej < self.theta_acc && self.theta_acc <= 1.0) {
            return bad(format!(
                "config requires 0 <= theta_rej < theta_acc <= 1 (theta_rej={}, theta_acc={})",
                self.theta_rej, self.theta_acc
            ));
        }
        if !(self.theta_f > 0.0 && self.theta_f <= 1.0) {
            return bad(format!("config requires 0 < theta_f <= 1 (theta_f={})", self.theta_f));
        }
        for (name, v) in [
            ("d_max", self.d_max as usize),
            ("min_node_data", self.min_node_data),
            ("hypotheses_per_cluster", self.hypotheses_per_cluster),
            ("min_cluster_size", self.min_cluster_size),
            ("max_clusters", self.max_clusters),
        ] {
            if v == 0 {
                return bad(format!("config requires {name} >= 1"));
            }
        }
        if self.boosted_budget == Some(0) {
            return bad("config requires boosted_budget >= 1 when set".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeKind {
    General,
    GoalDriven,
}

/// An induced behavioral profile for one character.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodifiedDecisionTree {
    pub character: String,
    pub kind: TreeKind,
    pub relation_target: Option<String>,
    pub config: InductionConfig,
    pub root: NodeId,
    #[serde(with = "node_list")]
    pub nodes: BTreeMap<NodeId, CdtNode>,
    pub revision: u64,
    pub provenance: Option<String>,
}

mod node_list {
    use super::{CdtNode, NodeId};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(nodes: &BTreeMap<NodeId, CdtNode>, s: S) -> Result<S::Ok, S::Error> {
        let list: Vec<&CdtNode> = nodes.values().collect();
        list.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<NodeId, CdtNode>, D::Error> {
        let list = Vec::<CdtNode>::deserialize(d)?;
        let mut map = BTreeMap::new();
        for node in list {
            if map.insert(node.id, node).is_some() {
                return Err(serde::de::Error::custom("duplicate node id"));
            }
        }
        Ok(map)
    }
}

impl CodifiedDecisionTree {
    /// A root with no statements or children.
    pub fn empty(character: impl Into<String>, config: InductionConfig) -> Self {
        let root = CdtNode::root();
        Self {
            character: character.into(),
            kind: TreeKind::General,
            relation_target: None,
            config,
            root: root.id,
            nodes: BTreeMap::from([(root.id, root)]),
            revision: 0,
            provenance: None,
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&CdtNode> {
        self.nodes.get(&id)
    }

    pub fn root_node(&self) -> &CdtNode {
        &self.nodes[&self.root]
    }

    pub fn next_id(&self) -> NodeId {
        NodeId(self.nodes.keys().next_back().map_or(0, |id| id.0 + 1))
    }

    /// Appends a child under `parent` and returns its id. Callers are
    /// responsible for keeping the result valid.
    pub fn push_child(&mut self, parent: NodeId, question: &str, statements: Vec<Statement>, is_leaf: bool) -> NodeId {
        let id = self.next_id();
        let parent_node = self.nodes.get_mut(&parent).expect("parent exists");
        parent_node.children.push(ChildEdge {
            question: question.to_string(),
            child: id,
        });
        let mut question_path = parent_node.question_path.clone();
        question_path.push(question.to_string());
        let depth = parent_node.depth + 1;
        self.nodes.insert(
            id,
            CdtNode {
                id,
                depth,
                question_path,
                statements,
                children: Vec::new(),
                is_leaf,
            },
        );
        id
    }

    /// Node ids in pre-order (children in edge order).
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            out.push(id);
            if let Some(node) = self.nodes.get(&id) {
                stack.extend(node.children.iter().rev().map(|e| e.child));
            }
        }
        out
    }

    pub fn parent_map(&self) -> BTreeMap<NodeId, NodeId> {
        self.nodes
            .values()
            .flat_map(|n| n.children.iter().map(move |e| (e.child, n.id)))
            .collect()
    }

    pub fn max_depth(&self) -> u32 {
        self.nodes.values().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn statement_count(&self) -> usize {
        self.nodes.values().map(|n| n.statements.len()).sum()
    }

    pub fn accepted_statement_count(&self) -> usize {
        self.nodes
            .values()
            .flat_map(|n| &n.statements)
            .filter(|s| s.status == StatementStatus::Accepted)
            .count()
    }

    /// Checks every structural invariant of the tree.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let err = |msg: String| Err(ValidationError(msg));
        self.config.validate()?;
        let Some(root) = self.nodes.get(&self.root) else {
            return err(format!("root {} missing", self.root));
        };
        if root.depth != 0 || !root.question_path.is_empty() {
            return err("root must have depth 0 and an empty question path".into());
        }
        let mut parent_of: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for node in self.nodes.values() {
            for edge in &node.children {
                let Some(child) = self.nodes.get(&edge.child) else {
                    return err(format!("node {} has missing child {}", node.id, edge.child));
                };
                if edge.child == self.root {
                    return err("root cannot be a child".into());
                }
                if parent_of.insert(edge.child, node.id).is_some() {
                    return err(format!("node {} has more than one parent", edge.child));
                }
                if child.depth != node.depth + 1 {
                    return err(format!("node {} depth {} is not parent depth + 1", child.id, child.depth));
                }
                let mut expected = node.question_path.clone();
                expected.push(edge.question.clone());
                if child.question_path != expected {
                    return err(format!("node {} question path does not match its edge", child.id));
                }
            }
        }
        for node in self.nodes.values() {
            if node.id != self.root && !parent_of.contains_key(&node.id) {
                return err(format!("orphan node {}", node.id));
            }
            if node.question_path.len() != node.depth as usize {
                return err(format!("node {} question path length != depth", node.id));
            }
            if node.depth > self.config.d_max {
                return err(format!("node {} depth {} exceeds d_max {}", node.id, node.depth, self.config.d_max));
            }
            if node.is_leaf && (node.statements.len() != 1 || !node.children.is_empty()) {
                return err(format!("leaf {} must have exactly one statement and no children", node.id));
            }
            if node.statements.iter().any(|s| s.text.trim().is_empty()) {
                return err(format!("node {} has an empty statement", node.id));
            }
        }
        // unique parents plus depth increments rule out cycles; check reachability anyway
        let reachable: BTreeSet<NodeId> = self.preorder().into_iter().collect();
        if reachable.len() != self.nodes.len() {
            return err("tree contains unreachable nodes".into());
        }
        Ok(())
    }

    /// Canonical document text.
    pub fn to_document(&self) -> String {
        serialize_tree(self)
    }
}

pub fn serialize_tree(tree: &CodifiedDecisionTree) -> String {
    let mut text = serde_json::to_string_pretty(tree).expect("tree serializes");
    text.push('\n');
    text
}

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("malformed tree document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

pub fn deserialize_tree(text: &str) -> Result<CodifiedDecisionTree, DocumentError> {
    let tree: CodifiedDecisionTree = serde_json::from_str(text)?;
    tree.validate()?;
    Ok(tree)
}
