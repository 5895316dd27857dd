#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use cdt_core::codex::{
    CodifiedDecisionTree, InductionConfig, NodeId, Statement, StatementKind, StatementStatus, TreeKind,
    ValidationStats,
};
use cdt_core::oracle::{CheckVerdict, Discriminator, OracleError};
use rand::Rng;

const WORDS: &[&str] = &["rain", "stage", "Tomo", "umbrella", "\"quoted\"", "naïve", "日本", "a\\b", "line\nbreak", "tab\t"];

fn text(rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..=4);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

fn stats(rng: &mut impl Rng) -> ValidationStats {
    ValidationStats::new(rng.random_range(0..30), rng.random_range(0..30), rng.random_range(0..30))
}

fn statement(rng: &mut impl Rng, kind: StatementKind) -> Statement {
    Statement {
        text: text(rng),
        kind,
        status: if rng.random_bool(0.1) {
            StatementStatus::Abolished
        } else {
            StatementStatus::Accepted
        },
        stats: stats(rng),
    }
}

/// A random tree satisfying every structural invariant. Questions are
/// unique per edge (`q<child id>`).
pub fn random_tree(rng: &mut impl Rng, max_nodes: usize) -> CodifiedDecisionTree {
    let config = InductionConfig {
        d_max: rng.random_range(1..=5),
        seed: rng.random(),
        keep_abolished: rng.random_bool(0.5),
        ..InductionConfig::default()
    };
    let mut tree = CodifiedDecisionTree::empty(text(rng), config);
    if rng.random_bool(0.3) {
        tree.kind = TreeKind::GoalDriven;
        tree.relation_target = Some(text(rng));
    }
    tree.revision = rng.random_range(0..10);
    let root = tree.root;
    let n_root = rng.random_range(0..3);
    for _ in 0..n_root {
        let s = statement(rng, StatementKind::Global);
        tree.nodes.get_mut(&root).unwrap().statements.push(s);
    }
    let target = rng.random_range(1..=max_nodes.max(1));
    for _ in 1..target {
        let internal: Vec<NodeId> = tree
            .nodes
            .values()
            .filter(|n| !n.is_leaf && n.depth < tree.config.d_max)
            .map(|n| n.id)
            .collect();
        if internal.is_empty() {
            break;
        }
        let parent = internal[rng.random_range(0..internal.len())];
        let question = format!("q{}", tree.next_id().0);
        if rng.random_bool(0.5) {
            let s = statement(rng, StatementKind::Conditional);
            tree.push_child(parent, &question, vec![s], true);
        } else {
            let n = rng.random_range(0..3);
            let ss = (0..n).map(|_| statement(rng, StatementKind::Global)).collect();
            tree.push_child(parent, &question, ss, false);
        }
    }
    tree.validate().expect("generator builds valid trees");
    tree
}

/// Answers from a fixed question → verdict table; anything else is False.
pub struct TableDiscriminator(pub BTreeMap<String, CheckVerdict>);

impl Discriminator for TableDiscriminator {
    fn check(&self, _scene: &str, question: &str) -> Result<CheckVerdict, OracleError> {
        Ok(self.0.get(question).copied().unwrap_or(CheckVerdict::False))
    }
}

/// Independent reachability: a node is reachable iff every edge on its
/// root path answers True.
pub fn brute_force_reachable(tree: &CodifiedDecisionTree, verdicts: &BTreeMap<String, CheckVerdict>) -> BTreeSet<NodeId> {
    let mut parent: BTreeMap<NodeId, (NodeId, String)> = BTreeMap::new();
    for node in tree.nodes.values() {
        for e in &node.children {
            parent.insert(e.child, (node.id, e.question.clone()));
        }
    }
    tree.nodes
        .keys()
        .copied()
        .filter(|id| {
            let mut cur = *id;
            while let Some((p, q)) = parent.get(&cur) {
                if verdicts.get(q).copied() != Some(CheckVerdict::True) {
                    return false;
                }
                cur = *p;
            }
            true
        })
        .collect()
}

/// Every node in the subtree rooted at `id`, inclusive.
pub fn subtree(tree: &CodifiedDecisionTree, id: NodeId) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::from([id]);
    let mut stack = vec![id];
    while let Some(n) = stack.pop() {
        for e in &tree.nodes[&n].children {
            out.insert(e.child);
            stack.push(e.child);
        }
    }
    out
}

/// Independent reference for the decision rule, in exact integer arithmetic
/// for thresholds given as fractions num/den.
pub struct RationalGates {
    pub acc: (u64, u64),
    pub rej: (u64, u64),
    pub filter: (u64, u64),
    pub min_node_data: u64,
    pub d_max: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    Leaf,
    Reject,
    Recurse,
}

pub fn reference_decision(g: &RationalGates, (re, _rn, rc): (u64, u64, u64), d: u64, dp: u64, depth: u64) -> Expected {
    let decisive = re + rc;
    if decisive == 0 {
        return Expected::Reject;
    }
    // re/decisive >= acc.0/acc.1
    if re * g.acc.1 >= g.acc.0 * decisive {
        return Expected::Leaf;
    }
    if re * g.rej.1 < g.rej.0 * decisive {
        return Expected::Reject;
    }
    let discriminative = d > 0 && dp * g.filter.1 < g.filter.0 * d;
    if discriminative && dp >= g.min_node_data && depth + 1 < g.d_max {
        Expected::Recurse
    } else {
        Expected::Reject
    }
}

/// Exhaustive optimal two-way split inertia.
pub fn brute_force_two_means(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) - 1 {
        let mut total = 0.0;
        for side in [true, false] {
            let members: Vec<&Vec<f64>> = (0..n).filter(|i| ((mask >> i) & 1 == 1) == side).map(|i| &points[i]).collect();
            let dim = members[0].len();
            let mean: Vec<f64> = (0..dim)
                .map(|d| members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64)
                .collect();
            total += members
                .iter()
                .map(|p| p.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
                .sum::<f64>();
        }
        best = best.min(total);
    }
    best
}
