//! Model-facing interfaces used by induction, grounding and evaluation.
//!
//! Every model role is a small object-safe trait so that an HTTP-backed
//! implementation ([`http`]) and the deterministic planted-rule testkit
//! ([`planted`], [`testkit`]) are interchangeable behind an [`OracleSuite`].

pub mod http;
pub mod planted;
pub mod testkit;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codex::Hypothesis;
use crate::corpus::SceneActionPair;
use crate::templates::Templates;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("extraction error: {message}; raw output: {raw}")]
    Extraction { message: String, raw: String },
    #[error("oracle configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CheckVerdict {
    True,
    False,
    Unknown,
}

impl fmt::Display for CheckVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckVerdict::True => "True",
            CheckVerdict::False => "False",
            CheckVerdict::Unknown => "Unknown",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailed,
    Neutral,
    Contradicted,
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NliLabel::Entailed => "entailed",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradicted => "contradicted",
        })
    }
}

/// Maps a model answer to a verdict. The second element is false when the
/// answer was not recognized and fell back to `Unknown`.
pub fn classify_verdict(answer: &str) -> (CheckVerdict, bool) {
    let first = answer
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())
        .map(str::to_lowercase);
    match first.as_deref() {
        Some("true" | "yes") => (CheckVerdict::True, true),
        Some("false" | "no") => (CheckVerdict::False, true),
        Some("unknown" | "none" | "unclear") => (CheckVerdict::Unknown, true),
        _ => (CheckVerdict::Unknown, false),
    }
}

pub fn parse_verdict(answer: &str) -> CheckVerdict {
    classify_verdict(answer).0
}

/// Maps a model answer to an NLI label, taking the earliest label word.
/// Unrecognized answers fall back to `Neutral` (second element false).
pub fn classify_nli(answer: &str) -> (NliLabel, bool) {
    let lower = answer.to_lowercase();
    [
        ("entail", NliLabel::Entailed),
        ("contradict", NliLabel::Contradicted),
        ("neutral", NliLabel::Neutral),
    ]
    .into_iter()
    .filter_map(|(needle, label)| lower.find(needle).map(|pos| (pos, label)))
    .min_by_key(|(pos, _)| *pos)
    .map_or((NliLabel::Neutral, false), |(_, label)| (label, true))
}

pub fn parse_nli(answer: &str) -> NliLabel {
    classify_nli(answer).0
}

pub trait Discriminator: Send + Sync {
    fn check(&self, scene: &str, question: &str) -> Result<CheckVerdict, OracleError>;
}

pub trait NliJudge: Send + Sync {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, OracleError>;
}

/// Everything the rule miner sees for one cluster.
#[derive(Debug, Clone)]
pub struct HypothesisRequest<'a> {
    pub character: &'a str,
    pub cluster_id: usize,
    pub cluster: &'a [&'a SceneActionPair],
    pub question_path: &'a [String],
    pub established: &'a [String],
    pub n: usize,
    pub goal_instruction: Option<&'a str>,
}

pub trait Hypothesizer: Send + Sync {
    fn propose(&self, request: &HypothesisRequest<'_>) -> Result<Vec<Hypothesis>, OracleError>;
}

pub trait Embedder: Send + Sync {
    /// Semantic text embedding (actions, and scenes without instruction).
    fn embed_action(&self, text: &str) -> Result<Vec<f64>, OracleError>;
    /// Embedding of instruction-completed scene text.
    fn embed_scene_text(&self, text: &str) -> Result<Vec<f64>, OracleError>;
}

pub trait TextGenerator: Send + Sync {
    fn generate(&self, prompt: &str) -> Result<String, OracleError>;
}

/// Instruction-following completion appended to a scene before embedding.
pub fn instructed_scene_text(scene: &str, character: &str) -> String {
    format!("{scene} Thus, {character} decides to")
}

/// Scene embedding; with `instruction` off the raw scene goes through the
/// plain semantic embedder instead.
pub fn embed_scene(
    embedder: &dyn Embedder,
    scene: &str,
    character: &str,
    instruction: bool,
) -> Result<Vec<f64>, OracleError> {
    if instruction {
        embedder.embed_scene_text(&instructed_scene_text(scene, character))
    } else {
        embedder.embed_action(scene)
    }
}

/// Renders the rule-mining prompt for one cluster.
pub fn render_hypothesis_prompt(templates: &Templates, req: &HypothesisRequest<'_>) -> String {
    let cases = req
        .cluster
        .iter()
        .enumerate()
        .map(|(i, p)| format!("Case {}:\nScene:\n{}\nAction: {}\n", i + 1, p.scene_text(), p.action))
        .collect::<Vec<_>>()
        .join("\n");
    let mut context = String::new();
    if !req.question_path.is_empty() {
        context.push_str("All cases already satisfy these conditions:\n");
        for q in req.question_path {
            context.push_str(&format!("- {q}\n"));
        }
    }
    if !req.established.is_empty() {
        context.push_str("These behaviors are already established:\n");
        for h in req.established {
            context.push_str(&format!("- {h}\n"));
        }
    }
    if !context.is_empty() {
        context.push_str("Propose something else.\n");
    }
    let goal = req
        .goal_instruction
        .map(|g| format!("Focus: {g}\n"))
        .unwrap_or_default();
    let n = req.n.to_string();
    templates.render(
        "hypothesize",
        &[
            ("character", req.character),
            ("cases", &cases),
            ("context", &context),
            ("goal", &goal),
            ("n", &n),
        ],
    )
}

#[derive(Deserialize)]
struct RawHypothesis {
    question: String,
    statement: String,
}

/// Parses a JSON array of `{question, statement}` objects out of model text.
pub fn parse_hypotheses(raw: &str) -> Result<Vec<Hypothesis>, OracleError> {
    let extraction = |message: &str| OracleError::Extraction {
        message: message.to_string(),
        raw: raw.to_string(),
    };
    let start = raw.find('[').ok_or_else(|| extraction("no JSON array"))?;
    let end = raw.rfind(']').ok_or_else(|| extraction("no JSON array"))?;
    if end < start {
        return Err(extraction("no JSON array"));
    }
    let items: Vec<RawHypothesis> =
        serde_json::from_str(&raw[start..=end]).map_err(|e| extraction(&e.to_string()))?;
    Ok(items
        .into_iter()
        .filter(|h| !h.question.trim().is_empty() && !h.statement.trim().is_empty())
        .map(|h| Hypothesis::new(h.question.trim(), h.statement.trim()))
        .collect())
}

/// The five model roles.
#[derive(Clone)]
pub struct OracleSuite {
    pub discriminator: Arc<dyn Discriminator>,
    pub nli: Arc<dyn NliJudge>,
    pub hypothesizer: Arc<dyn Hypothesizer>,
    pub embedder: Arc<dyn Embedder>,
    pub rp_generator: Arc<dyn TextGenerator>,
}

impl OracleSuite {
    /// Uses one object for every role.
    pub fn uniform<T>(oracle: Arc<T>) -> Self
    where
        T: Discriminator + NliJudge + Hypothesizer + Embedder + TextGenerator + 'static,
    {
        Self {
            discriminator: oracle.clone(),
            nli: oracle.clone(),
            hypothesizer: oracle.clone(),
            embedder: oracle.clone(),
            rp_generator: oracle,
        }
    }

    /// Wraps every role so that each call bumps `counter`.
    pub fn counted(self, counter: Arc<AtomicU64>) -> Self {
        let counting = Arc::new(Counting {
            inner: self,
            counter,
        });
        Self::uniform(counting)
    }
}

struct Counting {
    inner: OracleSuite,
    counter: Arc<AtomicU64>,
}

impl Counting {
    fn tick(&self) {
        self.counter.fetch_add(1, Ordering::Relaxed);
    }
}

impl Discriminator for Counting {
    fn check(&self, scene: &str, question: &str) -> Result<CheckVerdict, OracleError> {
        self.tick();
        self.inner.discriminator.check(scene, question)
    }
}

impl NliJudge for Counting {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, OracleError> {
        self.tick();
        self.inner.nli.judge(premise, hypothesis)
    }
}

impl Hypothesizer for Counting {
    fn propose(&self, request: &HypothesisRequest<'_>) -> Result<Vec<Hypothesis>, OracleError> {
        self.tick();
        self.inner.hypothesizer.propose(request)
    }
}

impl Embedder for Counting {
    fn embed_action(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        self.tick();
        self.inner.embedder.embed_action(text)
    }

    fn embed_scene_text(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        self.tick();
        self.inner.embedder.embed_scene_text(text)
    }
}

impl TextGenerator for Counting {
    fn generate(&self, prompt: &str) -> Result<String, OracleError> {
        self.tick();
        self.inner.rp_generator.generate(prompt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Discrimination,
    Nli,
}

/// One recorded discriminator or NLI call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCall {
    pub kind: CallKind,
    pub premise: String,
    pub hypothesis: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillRecord {
    pub premise: String,
    pub hypothesis: String,
    pub label: String,
}

/// Samples `round(fraction * |calls|)` records, stratified by label with
/// largest-remainder quotas, returned in original log order.
pub fn export_distillation_set(calls: &[OracleCall], fraction: f64, seed: u64) -> Vec<DistillRecord> {
    let fraction = fraction.clamp(0.0, 1.0);
    let total = (fraction * calls.len() as f64).round() as usize;
    if total == 0 {
        return Vec::new();
    }
    let mut groups: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, call) in calls.iter().enumerate() {
        groups.entry(call.label.as_str()).or_default().push(i);
    }
    let mut quotas: Vec<(usize, f64, &str)> = groups
        .iter()
        .map(|(label, idx)| {
            let exact = fraction * idx.len() as f64;
            (exact.floor() as usize, exact - exact.floor(), *label)
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.0).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].1.total_cmp(&quotas[a].1).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        quotas[i].0 += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(total);
    for (quota, _, label) in quotas {
        let members = &groups[label];
        let quota = quota.min(members.len());
        chosen.extend(sample(&mut rng, members.len(), quota).into_iter().map(|j| members[j]));
    }
    chosen.sort_unstable();
    chosen
        .into_iter()
        .map(|i| DistillRecord {
            premise: calls[i].premise.clone(),
            hypothesis: calls[i].hypothesis.clone(),
            label: calls[i].label.clone(),
        })
        .collect()
}
