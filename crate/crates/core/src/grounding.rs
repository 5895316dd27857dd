//! Tree traversal for a new scene, statement ranking and prompt assembly.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codex::{CodifiedDecisionTree, NodeId, Statement};
use crate::corpus::ActionRecord;
use crate::oracle::{CheckVerdict, Discriminator, OracleError, OracleSuite};
use crate::templates::Templates;

pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Error)]
pub enum GroundingError {
    #[error("scene is empty")]
    EmptyScene,
    #[error("traversal failed: {source}")]
    Traversal {
        source: OracleError,
        partial: Box<GroundingBundle>,
    },
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// One checked edge and the verdict the discriminator gave it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiredEdge {
    pub parent: NodeId,
    pub question: String,
    pub child: NodeId,
    pub verdict: CheckVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedStatement {
    pub statement: Statement,
    pub node: NodeId,
    pub depth: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingBundle {
    pub scene: String,
    /// Visited nodes in tree pre-order.
    pub visited: Vec<NodeId>,
    pub fired_edges: Vec<FiredEdge>,
    pub statements: Vec<GroundedStatement>,
}

impl GroundingBundle {
    fn assemble(tree: &CodifiedDecisionTree, scene: &str, visited: BTreeSet<NodeId>, mut edges: Vec<FiredEdge>) -> Self {
        let order: BTreeMap<NodeId, usize> = tree.preorder().into_iter().enumerate().map(|(i, id)| (id, i)).collect();
        let mut visited: Vec<NodeId> = visited.into_iter().collect();
        visited.sort_by_key(|id| order[id]);
        edges.sort_by_key(|e| order[&e.child]);
        let statements = visited
            .iter()
            .map(|id| &tree.nodes[id])
            .flat_map(|node| {
                node.statements.iter().map(move |s| GroundedStatement {
                    statement: s.clone(),
                    node: node.id,
                    depth: node.depth,
                })
            })
            .collect();
        Self {
            scene: scene.to_string(),
            visited,
            fired_edges: edges,
            statements,
        }
    }

    /// Pretty JSON trace for inspection and snapshots.
    pub fn to_document(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("bundle serializes");
        text.push('\n');
        text
    }
}

/// Visits the root, then every child whose question the scene passes.
/// Each level's edge checks run in parallel.
pub fn traverse(
    tree: &CodifiedDecisionTree,
    scene: &str,
    discriminator: &dyn Discriminator,
) -> Result<GroundingBundle, GroundingError> {
    if scene.trim().is_empty() {
        return Err(GroundingError::EmptyScene);
    }
    let mut visited = BTreeSet::from([tree.root]);
    let mut edges = Vec::new();
    let mut frontier = vec![tree.root];
    while !frontier.is_empty() {
        let pending: Vec<(NodeId, &str, NodeId)> = frontier
            .iter()
            .flat_map(|id| {
                tree.nodes[id]
                    .children
                    .iter()
                    .map(move |e| (*id, e.question.as_str(), e.child))
            })
            .collect();
        let verdicts: Vec<Result<CheckVerdict, OracleError>> = pending
            .par_iter()
            .map(|(_, q, _)| discriminator.check(scene, q))
            .collect();
        let mut next = Vec::new();
        for ((parent, question, child), verdict) in pending.into_iter().zip(verdicts) {
            let verdict = match verdict {
                Ok(v) => v,
                Err(source) => {
                    return Err(GroundingError::Traversal {
                        source,
                        partial: Box::new(GroundingBundle::assemble(tree, scene, visited, edges)),
                    })
                }
            };
            edges.push(FiredEdge {
                parent,
                question: question.to_string(),
                child,
                verdict,
            });
            if verdict == CheckVerdict::True {
                visited.insert(child);
                next.push(child);
            }
        }
        frontier = next;
    }
    Ok(GroundingBundle::assemble(tree, scene, visited, edges))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKind {
    DepthRank,
    AccuracyRank,
    #[default]
    UsabilityRank,
}

impl std::str::FromStr for RankKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "depth" | "depth_rank" => Ok(Self::DepthRank),
            "accuracy" | "accuracy_rank" => Ok(Self::AccuracyRank),
            "usability" | "usability_rank" => Ok(Self::UsabilityRank),
            other => Err(format!("unknown ranking {other:?} (depth, accuracy, usability)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKPolicy {
    pub kind: RankKind,
    pub k: usize,
}

impl Default for TopKPolicy {
    fn default() -> Self {
        Self {
            kind: RankKind::default(),
            k: DEFAULT_TOP_K,
        }
    }
}

fn descending_defined(a: Option<f64>, b: Option<f64>) -> std::cmp::Ordering {
    match (a, b) {
        (Some(x), Some(y)) => y.total_cmp(&x),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    }
}

/// Stable rank-and-truncate over the bundle's statements.
pub fn select_topk(bundle: &GroundingBundle, policy: &TopKPolicy) -> Vec<GroundedStatement> {
    let mut ranked = bundle.statements.clone();
    match policy.kind {
        RankKind::DepthRank => ranked.sort_by_key(|s| std::cmp::Reverse(s.depth)),
        RankKind::AccuracyRank => {
            ranked.sort_by(|a, b| descending_defined(a.statement.stats.accuracy(), b.statement.stats.accuracy()))
        }
        RankKind::UsabilityRank => {
            ranked.sort_by(|a, b| descending_defined(a.statement.stats.usability(), b.statement.stats.usability()))
        }
    }
    ranked.truncate(policy.k.max(1));
    ranked
}

/// Numbered grounding block, empty when there is nothing to ground on.
pub fn grounding_block(character: &str, lines: &[String]) -> String {
    if lines.is_empty() {
        return String::new();
    }
    let mut out = format!("\nWhat is known about {character}:\n");
    for (i, line) in lines.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, line));
    }
    out
}

/// Role-play prompt with a free-form grounding block (baselines use this).
pub fn assemble_with_grounding(templates: &Templates, scene: &str, character: &str, grounding: &str) -> String {
    templates.render(
        "rp_generate",
        &[("character", character), ("grounding", grounding), ("scene", scene)],
    )
}

pub fn assemble_prompt(templates: &Templates, scene: &str, statements: &[String], character: &str) -> String {
    assemble_with_grounding(templates, scene, character, &grounding_block(character, statements))
}

/// Prompt with no grounding at all.
pub fn vanilla_prompt(templates: &Templates, scene: &str, character: &str) -> String {
    assemble_with_grounding(templates, scene, character, "")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub action: String,
    pub bundle: GroundingBundle,
    pub selected: Vec<GroundedStatement>,
    pub prompt: String,
}

pub fn generate_action(
    scene: &str,
    tree: &CodifiedDecisionTree,
    policy: &TopKPolicy,
    oracles: &OracleSuite,
    templates: &Templates,
) -> Result<Generation, GroundingError> {
    let bundle = traverse(tree, scene, oracles.discriminator.as_ref())?;
    let selected = select_topk(&bundle, policy);
    let lines: Vec<String> = selected.iter().map(|s| s.statement.text.clone()).collect();
    let prompt = assemble_prompt(templates, scene, &lines, &tree.character);
    let action = oracles.rp_generator.generate(&prompt)?.trim().to_string();
    Ok(Generation {
        action,
        bundle,
        selected,
        prompt,
    })
}

/// The relation tree keyed by the latest scene actor, else the general tree.
pub fn route<'t>(
    scene: &[ActionRecord],
    general: &'t CodifiedDecisionTree,
    relation_trees: &'t BTreeMap<String, CodifiedDecisionTree>,
) -> &'t CodifiedDecisionTree {
    scene
        .last()
        .and_then(|record| relation_trees.get(&record.actor))
        .unwrap_or(general)
}
