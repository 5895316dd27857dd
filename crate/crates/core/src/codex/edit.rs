//! Structural edits. Every successful edit yields a new tree whose revision is
//! exactly one greater than its input.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CodifiedDecisionTree, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditCommand {
    UpdateStatement { node: NodeId, index: usize, text: String },
    DeleteNode { node: NodeId },
    AddChild { parent: NodeId, question: String },
    DetachStatement { node: NodeId, index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EditError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node} has no statement {index}")]
    UnknownStatement { node: NodeId, index: usize },
    #[error("edit rejected: {0}")]
    Rejected(String),
}

impl CodifiedDecisionTree {
    pub fn apply_edit(&self, command: &EditCommand) -> Result<CodifiedDecisionTree, EditError> {
        let mut tree = self.clone();
        match command {
            EditCommand::UpdateStatement { node, index, text } => {
                if text.trim().is_empty() {
                    return Err(EditError::Rejected("statement text must be non-empty".into()));
                }
                let n = tree.nodes.get_mut(node).ok_or(EditError::UnknownNode(*node))?;
                let stmt = n
                    .statements
                    .get_mut(*index)
                    .ok_or(EditError::UnknownStatement { node: *node, index: *index })?;
                stmt.text = text.clone();
            }
            EditCommand::DeleteNode { node } => {
                if *node == tree.root {
                    return Err(EditError::Rejected("the root cannot be deleted".into()));
                }
                if !tree.nodes.contains_key(node) {
                    return Err(EditError::UnknownNode(*node));
                }
                let mut doomed = vec![*node];
                let mut i = 0;
                while i < doomed.len() {
                    let id = doomed[i];
                    doomed.extend(tree.nodes[&id].children.iter().map(|e| e.child));
                    i += 1;
                }
                for id in &doomed {
                    tree.nodes.remove(id);
                }
                for n in tree.nodes.values_mut() {
                    n.children.retain(|e| e.child != *node);
                }
            }
            EditCommand::AddChild { parent, question } => {
                if question.trim().is_empty() {
                    return Err(EditError::Rejected("question must be non-empty".into()));
                }
                let p = tree.nodes.get(parent).ok_or(EditError::UnknownNode(*parent))?;
                if p.is_leaf {
                    return Err(EditError::Rejected(format!("{parent} is a leaf and cannot have children")));
                }
                if p.depth + 1 > tree.config.d_max {
                    return Err(EditError::Rejected(format!(
                        "child of {parent} would exceed d_max {}",
                        tree.config.d_max
                    )));
                }
                tree.push_child(*parent, question, Vec::new(), false);
            }
            EditCommand::DetachStatement { node, index } => {
                let n = tree.nodes.get_mut(node).ok_or(EditError::UnknownNode(*node))?;
                if *index >= n.statements.len() {
                    return Err(EditError::UnknownStatement { node: *node, index: *index });
                }
                if n.is_leaf {
                    return Err(EditError::Rejected(format!(
                        "leaf {node} must keep exactly one statement"
                    )));
                }
                n.statements.remove(*index);
            }
        }
        tree.validate().map_err(|e| EditError::Rejected(e.0))?;
        tree.revision = self.revision + 1;
        Ok(tree)
    }
}

/// Applies an edit log in order.
pub fn replay(base: &CodifiedDecisionTree, log: &[EditCommand]) -> Result<CodifiedDecisionTree, EditError> {
    log.iter().try_fold(base.clone(), |tree, cmd| tree.apply_edit(cmd))
}
