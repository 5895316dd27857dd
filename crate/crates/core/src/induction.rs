//! Recursive hypothesis–validation growth of a decision tree.
//!
//! Nodes are grown breadth-first from a work queue. Each node clusters its
//! dataset, asks the hypothesizer for (question, statement) candidates per
//! cluster and validates them with NLI over the whole dataset, then over the
//! subset whose scenes pass the question. The state after every completed
//! node is a checkpoint a run can resume from.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::clustering::{cluster_node_data, ClusteringError};
use crate::codex::{
    CodifiedDecisionTree, Hypothesis, InductionConfig, NodeId, Statement, StatementKind, StatementStatus,
    TreeKind, ValidationError, ValidationStats,
};
use crate::corpus::{filter_relation_subset, Corpus, SceneActionPair};
use crate::oracle::{
    CallKind, CheckVerdict, Discriminator, HypothesisRequest, NliJudge, NliLabel, OracleCall, OracleError,
    OracleSuite,
};

pub const REASON_NON_DISCRIMINATIVE: &str = "non-discriminative filter";
pub const REASON_TOO_FEW: &str = "too few pairs";
pub const REASON_MAX_DEPTH: &str = "max depth";

#[derive(Debug, Error)]
pub enum InductionError {
    #[error("argument error: {0}")]
    Argument(String),
    #[error(transparent)]
    Config(#[from] ValidationError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Clustering(#[from] ClusteringError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionValue {
    AcceptGlobal,
    AcceptLeaf,
    Reject,
    Recurse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub value: DecisionValue,
    pub reason: String,
}

impl Decision {
    fn new(value: DecisionValue, reason: impl Into<String>) -> Self {
        Self {
            value,
            reason: reason.into(),
        }
    }
}

/// Next step for a hypothesis given its stats over the filtered subset.
pub fn decide(
    stats: &ValidationStats,
    d_size: usize,
    d_prime_size: usize,
    depth: u32,
    config: &InductionConfig,
) -> Decision {
    let accuracy = match stats.accuracy() {
        None => return Decision::new(DecisionValue::Reject, "accuracy undefined"),
        Some(a) => a,
    };
    if accuracy >= config.theta_acc {
        return Decision::new(DecisionValue::AcceptLeaf, format!("accuracy {accuracy:.3} >= {}", config.theta_acc));
    }
    if accuracy < config.theta_rej {
        return Decision::new(DecisionValue::Reject, format!("accuracy {accuracy:.3} < {}", config.theta_rej));
    }
    let ratio = if d_size == 0 {
        1.0
    } else {
        d_prime_size as f64 / d_size as f64
    };
    if ratio >= config.theta_f {
        Decision::new(DecisionValue::Reject, REASON_NON_DISCRIMINATIVE)
    } else if d_prime_size < config.min_node_data {
        Decision::new(DecisionValue::Reject, REASON_TOO_FEW)
    } else if depth + 1 >= config.d_max {
        Decision::new(DecisionValue::Reject, REASON_MAX_DEPTH)
    } else {
        Decision::new(DecisionValue::Recurse, format!("filter keeps {d_prime_size}/{d_size}"))
    }
}

fn tally(labels: impl IntoIterator<Item = NliLabel>) -> ValidationStats {
    let mut stats = ValidationStats::default();
    for label in labels {
        match label {
            NliLabel::Entailed => stats.r_e += 1,
            NliLabel::Neutral => stats.r_n += 1,
            NliLabel::Contradicted => stats.r_c += 1,
        }
    }
    stats
}

/// NLI counts of `statement` against every pair's action.
pub fn validate_global<P: Borrow<SceneActionPair> + Sync>(
    statement: &str,
    pairs: &[P],
    nli: &dyn NliJudge,
) -> Result<ValidationStats, OracleError> {
    let labels = pairs
        .par_iter()
        .map(|p| nli.judge(&p.borrow().action.text, statement))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tally(labels))
}

/// Pairs whose scene passes `question`, in input order. False and Unknown
/// verdicts are dropped.
pub fn filter_by_trigger<'p, P: Borrow<SceneActionPair> + Sync>(
    question: &str,
    pairs: &'p [P],
    discriminator: &dyn Discriminator,
) -> Result<Vec<&'p P>, OracleError> {
    let verdicts = pairs
        .par_iter()
        .map(|p| discriminator.check(&p.borrow().scene_text(), question))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(pairs
        .iter()
        .zip(verdicts)
        .filter(|(_, v)| *v == CheckVerdict::True)
        .map(|(p, _)| p)
        .collect())
}

/// What the hypothesizer is told to avoid repeating.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversityContext {
    pub question_path: Vec<String>,
    pub established: Vec<String>,
}

/// Questions on the root-to-node path plus the accepted statements of the
/// path nodes and of the node's own leaf children.
pub fn diversify_context(tree: &CodifiedDecisionTree, node: NodeId, config: &InductionConfig) -> DiversityContext {
    if !config.diversification {
        return DiversityContext::default();
    }
    let Some(target) = tree.node(node) else {
        return DiversityContext::default();
    };
    let parents = tree.parent_map();
    let mut path = vec![node];
    while let Some(p) = parents.get(path.last().expect("non-empty")) {
        path.push(*p);
    }
    path.reverse();
    let leaf_children = target
        .children
        .iter()
        .filter_map(|e| tree.node(e.child))
        .filter(|c| c.is_leaf)
        .map(|c| c.id);
    let established = path
        .iter()
        .copied()
        .chain(leaf_children)
        .filter_map(|id| tree.node(id))
        .flat_map(|n| &n.statements)
        .filter(|s| s.status == StatementStatus::Accepted)
        .map(|s| s.text.clone())
        .collect();
    DiversityContext {
        question_path: target.question_path.clone(),
        established,
    }
}

/// Keeps the `budget` candidates from the largest source clusters, ties by
/// proposal order. Returns (kept in rank order, pruned in input order).
pub fn boost_prune(
    candidates: Vec<Hypothesis>,
    cluster_sizes: &[usize],
    budget: usize,
) -> (Vec<Hypothesis>, Vec<Hypothesis>) {
    let size = |h: &Hypothesis| cluster_sizes.get(h.source_cluster).copied().unwrap_or(0);
    let mut ranked: Vec<(usize, Hypothesis)> = candidates.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| size(&b.1).cmp(&size(&a.1)).then(a.0.cmp(&b.0)));
    let mut pruned: Vec<(usize, Hypothesis)> = ranked.split_off(budget.min(ranked.len()));
    pruned.sort_by_key(|(i, _)| *i);
    (
        ranked.into_iter().map(|(_, h)| h).collect(),
        pruned.into_iter().map(|(_, h)| h).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GlobalCheck,
    TriggerFilter,
    ConditionalCheck,
    /// Dropped before validation as a repeat within the node.
    Duplicate,
    /// Dropped before validation by the boosted budget.
    BoostPruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionEvent {
    pub node: NodeId,
    pub hypothesis: Hypothesis,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<ValidationStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    pub d_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_prime_size: Option<usize>,
    /// Node created by an accepted leaf or a recursion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child: Option<NodeId>,
}

impl InductionEvent {
    fn is(&self, stage: Stage, value: DecisionValue) -> bool {
        self.stage == stage && self.decision.as_ref().is_some_and(|d| d.value == value)
    }

    /// A hypothesis rejected at its conditional check.
    pub fn is_abolished(&self) -> bool {
        self.is(Stage::ConditionalCheck, DecisionValue::Reject)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InductionLog {
    pub events: Vec<InductionEvent>,
    /// Discriminator and NLI calls in issue order.
    pub calls: Vec<OracleCall>,
    /// Pair indices each grown node worked on.
    pub node_datasets: BTreeMap<NodeId, Vec<usize>>,
    pub hypothesizer_calls: u64,
}

impl InductionLog {
    fn extend(&mut self, other: InductionLog) {
        self.events.extend(other.events);
        self.calls.extend(other.calls);
        self.node_datasets.extend(other.node_datasets);
        self.hypothesizer_calls += other.hypothesizer_calls;
    }

    pub fn abolished(&self) -> impl Iterator<Item = &InductionEvent> {
        self.events.iter().filter(|e| e.is_abolished())
    }

    pub fn validated_count(&self) -> usize {
        self.events.iter().filter(|e| e.stage == Stage::GlobalCheck).count()
    }

    pub fn recursed_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.is(Stage::ConditionalCheck, DecisionValue::Recurse))
            .count()
    }

    /// Validations (global or conditional) issued at `node`.
    pub fn validations_at(&self, node: NodeId) -> usize {
        self.events
            .iter()
            .filter(|e| e.node == node && e.stage == Stage::GlobalCheck)
            .count()
    }

    pub fn to_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes") + "\n")
            .collect()
    }
}

/// Adds every abolished hypothesis back onto the node that rejected it.
pub fn reattach_abolished(tree: &mut CodifiedDecisionTree, log: &InductionLog) {
    for event in log.abolished() {
        if let Some(node) = tree.nodes.get_mut(&event.node) {
            node.statements.push(Statement {
                text: event.hypothesis.statement.clone(),
                kind: StatementKind::Conditional,
                status: StatementStatus::Abolished,
                stats: event.stats.unwrap_or_default(),
            });
        }
    }
}

/// Relation-specific induction: train on pairs whose latest scene action is
/// by `related` and steer every proposal with `instruction`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub related: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingNode {
    pub node: NodeId,
    pub dataset: Vec<usize>,
}

/// Everything needed to continue a run: the tree so far, the log, and the
/// nodes still waiting to grow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionState {
    pub tree: CodifiedDecisionTree,
    pub log: InductionLog,
    pub pending: VecDeque<PendingNode>,
    pub nodes_grown: usize,
}

impl InductionState {
    pub fn oracle_calls(&self) -> u64 {
        self.log.calls.len() as u64 + self.log.hypothesizer_calls
    }

    pub fn is_finished(&self) -> bool {
        self.pending.is_empty()
    }
}

/// A run stopped by an oracle failure. `state` is the last checkpoint.
#[derive(Debug, Error)]
#[error("induction interrupted after {} nodes: {error}", state.nodes_grown)]
pub struct Interrupted {
    pub error: InductionError,
    pub state: Box<InductionState>,
}

pub struct Inducer<'a> {
    pairs: Vec<SceneActionPair>,
    character: String,
    config: InductionConfig,
    oracles: &'a OracleSuite,
    goal: Option<Goal>,
    pool: Option<rayon::ThreadPool>,
}

impl<'a> Inducer<'a> {
    /// `parallelism` bounds in-flight validation calls; 0 uses the global pool.
    pub fn new(
        corpus: &Corpus,
        config: &InductionConfig,
        oracles: &'a OracleSuite,
        goal: Option<Goal>,
        parallelism: usize,
    ) -> Result<Self, InductionError> {
        config.validate()?;
        let pairs = match &goal {
            Some(g) => filter_relation_subset(&corpus.pairs, &g.related),
            None => corpus.pairs.clone(),
        };
        if pairs.len() < config.min_node_data {
            return Err(InductionError::Argument(format!(
                "corpus too small: {} pairs, need at least {}",
                pairs.len(),
                config.min_node_data
            )));
        }
        let pool = if parallelism > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(parallelism)
                    .build()
                    .map_err(|e| InductionError::Argument(e.to_string()))?,
            )
        } else {
            None
        };
        Ok(Self {
            pairs,
            character: corpus.character.clone(),
            config: config.clone(),
            oracles,
            goal,
            pool,
        })
    }

    /// Pairs the run indexes into (the relation subset for goal runs).
    pub fn pairs(&self) -> &[SceneActionPair] {
        &self.pairs
    }

    pub fn initial_state(&self) -> InductionState {
        let mut tree = CodifiedDecisionTree::empty(self.character.clone(), self.config.clone());
        if let Some(goal) = &self.goal {
            tree.kind = TreeKind::GoalDriven;
            tree.relation_target = Some(goal.related.clone());
        }
        InductionState {
            pending: VecDeque::from([PendingNode {
                node: tree.root,
                dataset: (0..self.pairs.len()).collect(),
            }]),
            tree,
            log: InductionLog::default(),
            nodes_grown: 0,
        }
    }

    /// Grows every pending node of `state`, calling `checkpoint` after each.
    pub fn run(
        &self,
        mut state: InductionState,
        checkpoint: &mut dyn FnMut(&InductionState),
    ) -> Result<(CodifiedDecisionTree, InductionLog), Interrupted> {
        while let Some(next) = state.pending.front().cloned() {
            let mut tree = state.tree.clone();
            let mut log = InductionLog::default();
            let mut spawned = Vec::new();
            let grown = self.in_pool(|| self.grow_node(&mut tree, &mut log, &mut spawned, &next));
            if let Err(error) = grown {
                return Err(Interrupted {
                    error,
                    state: Box::new(state),
                });
            }
            state.pending.pop_front();
            state.pending.extend(spawned);
            state.tree = tree;
            state.log.extend(log);
            state.nodes_grown += 1;
            checkpoint(&state);
        }
        let InductionState { mut tree, log, .. } = state;
        if self.config.keep_abolished {
            reattach_abolished(&mut tree, &log);
        }
        info!(
            nodes = tree.nodes.len(),
            statements = tree.accepted_statement_count(),
            calls = log.calls.len(),
            "induction finished"
        );
        Ok((tree, log))
    }

    fn in_pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    fn node_seed(&self, node: NodeId) -> u64 {
        self.config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ u64::from(node.0).wrapping_add(1)
    }

    fn grow_node(
        &self,
        tree: &mut CodifiedDecisionTree,
        log: &mut InductionLog,
        spawned: &mut Vec<PendingNode>,
        pending: &PendingNode,
    ) -> Result<(), InductionError> {
        let node = pending.node;
        let dataset = &pending.dataset;
        log.node_datasets.insert(node, dataset.clone());
        let clusters = cluster_node_data(
            &self.pairs,
            dataset,
            self.oracles.embedder.as_ref(),
            &self.config,
            self.node_seed(node),
        )?;
        let sizes: Vec<usize> = clusters.iter().map(Vec::len).collect();
        debug!(%node, size = dataset.len(), clusters = clusters.len(), "growing node");
        let mut seen = BTreeSet::new();

        match self.config.boosted_budget {
            Some(budget) => {
                let mut fresh = Vec::new();
                for (id, cluster) in clusters.iter().enumerate() {
                    for h in self.propose(tree, log, node, id, cluster)? {
                        if seen.insert(h.dedup_key()) {
                            fresh.push(h);
                        } else {
                            log.events.push(self.skip_event(node, h, Stage::Duplicate, dataset.len()));
                        }
                    }
                }
                let (kept, pruned) = boost_prune(fresh, &sizes, budget);
                for h in pruned {
                    log.events.push(self.skip_event(node, h, Stage::BoostPruned, dataset.len()));
                }
                for h in kept {
                    self.validate_candidate(tree, log, spawned, node, dataset, h)?;
                }
            }
            None => {
                for (id, cluster) in clusters.iter().enumerate() {
                    for h in self.propose(tree, log, node, id, cluster)? {
                        if seen.insert(h.dedup_key()) {
                            self.validate_candidate(tree, log, spawned, node, dataset, h)?;
                        } else {
                            log.events.push(self.skip_event(node, h, Stage::Duplicate, dataset.len()));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn skip_event(&self, node: NodeId, hypothesis: Hypothesis, stage: Stage, d_size: usize) -> InductionEvent {
        InductionEvent {
            node,
            hypothesis,
            stage,
            stats: None,
            decision: None,
            d_size,
            d_prime_size: None,
            child: None,
        }
    }

    fn propose(
        &self,
        tree: &CodifiedDecisionTree,
        log: &mut InductionLog,
        node: NodeId,
        cluster_id: usize,
        cluster: &[usize],
    ) -> Result<Vec<Hypothesis>, InductionError> {
        let context = diversify_context(tree, node, &self.config);
        let members: Vec<&SceneActionPair> = cluster.iter().map(|&i| &self.pairs[i]).collect();
        let request = HypothesisRequest {
            character: &self.character,
            cluster_id,
            cluster: &members,
            question_path: &context.question_path,
            established: &context.established,
            n: self.config.hypotheses_per_cluster,
            goal_instruction: self.goal.as_ref().map(|g| g.instruction.as_str()),
        };
        log.hypothesizer_calls += 1;
        let proposals = self.oracles.hypothesizer.propose(&request)?;
        Ok(proposals
            .into_iter()
            .filter(|h| !h.question.trim().is_empty() && !h.statement.trim().is_empty())
            .map(|h| Hypothesis {
                source_cluster: cluster_id,
                goal_tag: self.goal.as_ref().map(|g| g.instruction.clone()),
                ..h
            })
            .collect())
    }

    fn judge_all(&self, statement: &str, subset: &[usize], log: &mut InductionLog) -> Result<ValidationStats, OracleError> {
        let nli = self.oracles.nli.as_ref();
        let labels = subset
            .par_iter()
            .map(|&i| nli.judge(&self.pairs[i].action.text, statement))
            .collect::<Result<Vec<_>, _>>()?;
        for (&i, label) in subset.iter().zip(&labels) {
            log.calls.push(OracleCall {
                kind: CallKind::Nli,
                premise: self.pairs[i].action.text.clone(),
                hypothesis: statement.to_string(),
                label: label.to_string(),
            });
        }
        Ok(tally(labels))
    }

    fn check_all(&self, question: &str, subset: &[usize], log: &mut InductionLog) -> Result<Vec<usize>, OracleError> {
        let discriminator = self.oracles.discriminator.as_ref();
        let scenes: Vec<String> = subset.iter().map(|&i| self.pairs[i].scene_text()).collect();
        let verdicts = scenes
            .par_iter()
            .map(|s| discriminator.check(s, question))
            .collect::<Result<Vec<_>, _>>()?;
        let mut kept = Vec::new();
        for ((&i, scene), verdict) in subset.iter().zip(scenes).zip(verdicts) {
            log.calls.push(OracleCall {
                kind: CallKind::Discrimination,
                premise: scene,
                hypothesis: question.to_string(),
                label: verdict.to_string(),
            });
            if verdict == CheckVerdict::True {
                kept.push(i);
            }
        }
        Ok(kept)
    }

    fn validate_candidate(
        &self,
        tree: &mut CodifiedDecisionTree,
        log: &mut InductionLog,
        spawned: &mut Vec<PendingNode>,
        node: NodeId,
        dataset: &[usize],
        h: Hypothesis,
    ) -> Result<(), InductionError> {
        let d_size = dataset.len();
        let stats = self.judge_all(&h.statement, dataset, log)?;
        let mut event = InductionEvent {
            node,
            hypothesis: h.clone(),
            stage: Stage::GlobalCheck,
            stats: Some(stats),
            decision: None,
            d_size,
            d_prime_size: None,
            child: None,
        };
        if stats.accuracy().is_some_and(|a| a >= self.config.theta_acc) {
            event.decision = Some(Decision::new(DecisionValue::AcceptGlobal, "holds over the whole dataset"));
            log.events.push(event);
            let target = tree.nodes.get_mut(&node).expect("grown node exists");
            target
                .statements
                .push(Statement::accepted(h.statement, StatementKind::Global, stats));
            return Ok(());
        }
        log.events.push(event);

        let subset = self.check_all(&h.question, dataset, log)?;
        log.events.push(InductionEvent {
            stage: Stage::TriggerFilter,
            stats: None,
            d_prime_size: Some(subset.len()),
            ..self.skip_event(node, h.clone(), Stage::TriggerFilter, d_size)
        });
        let cond = if subset.is_empty() {
            ValidationStats::default()
        } else {
            self.judge_all(&h.statement, &subset, log)?
        };
        let depth = tree.node(node).expect("grown node exists").depth;
        let decision = decide(&cond, d_size, subset.len(), depth, &self.config);
        let child = match decision.value {
            DecisionValue::AcceptLeaf => Some(tree.push_child(
                node,
                &h.question,
                vec![Statement::accepted(h.statement.clone(), StatementKind::Conditional, cond)],
                true,
            )),
            DecisionValue::Recurse => {
                let child = tree.push_child(node, &h.question, Vec::new(), false);
                spawned.push(PendingNode {
                    node: child,
                    dataset: subset.clone(),
                });
                Some(child)
            }
            _ => None,
        };
        log.events.push(InductionEvent {
            node,
            hypothesis: h,
            stage: Stage::ConditionalCheck,
            stats: Some(cond),
            decision: Some(decision),
            d_size,
            d_prime_size: Some(subset.len()),
            child,
        });
        Ok(())
    }
}

/// Grows a tree from `corpus` in one go.
pub fn induce(
    corpus: &Corpus,
    config: &InductionConfig,
    oracles: &OracleSuite,
    goal: Option<&Goal>,
) -> Result<(CodifiedDecisionTree, InductionLog), InductionError> {
    let inducer = Inducer::new(corpus, config, oracles, goal.cloned(), 0)?;
    inducer
        .run(inducer.initial_state(), &mut |_| {})
        .map_err(|interrupted| interrupted.error)
}
