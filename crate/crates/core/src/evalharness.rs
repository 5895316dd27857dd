//! NLI-scored next-action evaluation and the baseline grounding strategies.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::codex::CodifiedDecisionTree;
use crate::corpus::{render_scene, ActionRecord, Corpus, SceneActionPair};
use crate::grounding::{assemble_with_grounding, generate_action, route, vanilla_prompt, TopKPolicy};
use crate::oracle::{Embedder, NliJudge, NliLabel, OracleError, OracleSuite, TextGenerator};
use crate::templates::Templates;

pub const RICL_TOP_M: usize = 8;
pub const ETA_BLOCK: usize = 16;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test set")]
    EmptyTestSet,
    #[error("argument error: {0}")]
    Argument(String),
    #[error("block {index}: {source}")]
    Block { index: usize, source: OracleError },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("cache {path}: {message}")]
    Cache { path: PathBuf, message: String },
}

pub fn label_score(label: NliLabel) -> u8 {
    match label {
        NliLabel::Entailed => 100,
        NliLabel::Neutral => 50,
        NliLabel::Contradicted => 0,
    }
}

/// Arithmetic mean of the label scores; `None` for no labels.
pub fn mean_score(labels: &[NliLabel]) -> Option<f64> {
    if labels.is_empty() {
        return None;
    }
    let total: u64 = labels.iter().map(|l| u64::from(label_score(*l))).sum();
    Some(total as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scored {
    pub label: NliLabel,
    pub score: u8,
}

/// Judges the prediction against the reference action (reference as premise).
pub fn nli_score(reference: &str, prediction: &str, nli: &dyn NliJudge) -> Result<Scored, EvalError> {
    if reference.trim().is_empty() || prediction.trim().is_empty() {
        return Err(EvalError::Argument("reference and prediction must be non-empty".into()));
    }
    let label = nli.judge(reference, prediction)?;
    Ok(Scored {
        label,
        score: label_score(label),
    })
}

/// Something that predicts the character's next action from a scene.
pub trait Strategy: Send + Sync {
    fn tag(&self) -> String;
    fn predict(&self, scene: &[ActionRecord]) -> Result<String, OracleError>;
}

pub struct VanillaStrategy {
    pub character: String,
    pub generator: Arc<dyn TextGenerator>,
    pub templates: Templates,
}

impl Strategy for VanillaStrategy {
    fn tag(&self) -> String {
        "vanilla".into()
    }

    fn predict(&self, scene: &[ActionRecord]) -> Result<String, OracleError> {
        let prompt = vanilla_prompt(&self.templates, &render_scene(scene), &self.character);
        Ok(self.generator.generate(&prompt)?.trim().to_string())
    }
}

/// Fixed profile text as grounding: a human-written profile, an extracted
/// profile, or a rendered tree.
pub struct ProfileStrategy {
    pub tag: String,
    pub character: String,
    pub profile: String,
    pub generator: Arc<dyn TextGenerator>,
    pub templates: Templates,
}

impl Strategy for ProfileStrategy {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn predict(&self, scene: &[ActionRecord]) -> Result<String, OracleError> {
        let grounding = format!("\nProfile of {}:\n{}\n", self.character, self.profile.trim_end());
        let prompt = assemble_with_grounding(&self.templates, &render_scene(scene), &self.character, &grounding);
        Ok(self.generator.generate(&prompt)?.trim().to_string())
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Scene embeddings of a training corpus for similarity retrieval.
pub struct RiclIndex {
    pairs: Vec<SceneActionPair>,
    vectors: Vec<Vec<f64>>,
}

impl RiclIndex {
    pub fn build(train: &[SceneActionPair], embedder: &dyn Embedder) -> Result<Self, OracleError> {
        let vectors = train
            .par_iter()
            .map(|p| embedder.embed_action(&p.scene_text()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            pairs: train.to_vec(),
            vectors,
        })
    }

    /// Up to `m` pairs by descending cosine similarity, ties in storyline order.
    pub fn top(&self, query: &[f64], m: usize) -> Vec<&SceneActionPair> {
        let mut ranked: Vec<(usize, f64)> = self.vectors.iter().map(|v| cosine(query, v)).enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().take(m).map(|(i, _)| &self.pairs[i]).collect()
    }
}

pub fn ricl_ground<'t>(
    scene: &str,
    index: &'t RiclIndex,
    embedder: &dyn Embedder,
    m: usize,
) -> Result<Vec<&'t SceneActionPair>, OracleError> {
    let query = embedder.embed_action(scene)?;
    Ok(index.top(&query, m))
}

pub struct RiclStrategy {
    pub character: String,
    pub index: RiclIndex,
    pub embedder: Arc<dyn Embedder>,
    pub generator: Arc<dyn TextGenerator>,
    pub templates: Templates,
    pub m: usize,
}

impl Strategy for RiclStrategy {
    fn tag(&self) -> String {
        "ricl".into()
    }

    fn predict(&self, scene: &[ActionRecord]) -> Result<String, OracleError> {
        let scene_text = render_scene(scene);
        let examples = ricl_ground(&scene_text, &self.index, self.embedder.as_ref(), self.m)?;
        let mut grounding = String::from("\nSimilar past scenes:\n");
        for (i, ex) in examples.iter().enumerate() {
            let _ = write!(grounding, "Example {}:\n{}\n{}\n", i + 1, ex.scene_text(), ex.action);
        }
        let prompt = assemble_with_grounding(&self.templates, &scene_text, &self.character, &grounding);
        Ok(self.generator.generate(&prompt)?.trim().to_string())
    }
}

/// Grounds each scene by traversing a tree, routed to a relation tree when
/// the latest scene actor has one.
pub struct CdtStrategy {
    pub tag: String,
    pub general: CodifiedDecisionTree,
    pub relation_trees: BTreeMap<String, CodifiedDecisionTree>,
    pub policy: TopKPolicy,
    pub oracles: OracleSuite,
    pub templates: Templates,
}

impl Strategy for CdtStrategy {
    fn tag(&self) -> String {
        self.tag.clone()
    }

    fn predict(&self, scene: &[ActionRecord]) -> Result<String, OracleError> {
        let tree = route(scene, &self.general, &self.relation_trees);
        let scene_text = render_scene(scene);
        if scene_text.trim().is_empty() {
            let prompt = vanilla_prompt(&self.templates, &scene_text, &tree.character);
            return Ok(self.oracles.rp_generator.generate(&prompt)?.trim().to_string());
        }
        match generate_action(&scene_text, tree, &self.policy, &self.oracles, &self.templates) {
            Ok(g) => Ok(g.action),
            Err(crate::grounding::GroundingError::Oracle(e)) => Err(e),
            Err(crate::grounding::GroundingError::Traversal { source, .. }) => Err(source),
            Err(e) => Err(OracleError::Transport(e.to_string())),
        }
    }
}

fn cases(pairs: &[SceneActionPair]) -> String {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| format!("Case {}:\nScene:\n{}\nAction: {}\n", i + 1, p.scene_text(), p.action))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Sub-profiles from consecutive blocks of `block` pairs, merged by one
/// final call.
pub fn eta_profile(
    train: &Corpus,
    llm: &dyn TextGenerator,
    templates: &Templates,
    block: usize,
) -> Result<String, EvalError> {
    if block == 0 {
        return Err(EvalError::Argument("block size must be positive".into()));
    }
    let character = train.character.as_str();
    let subs = train
        .pairs
        .chunks(block)
        .enumerate()
        .map(|(index, chunk)| {
            let prompt = templates.render("eta_extract", &[("character", character), ("cases", &cases(chunk))]);
            llm.generate(&prompt)
                .map(|s| s.trim().to_string())
                .map_err(|source| EvalError::Block { index, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let profiles = subs
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Profile {}:\n{s}\n", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    let merged = llm.generate(&templates.render(
        "eta_aggregate",
        &[("character", character), ("profiles", &profiles)],
    ))?;
    Ok(merged.trim().to_string())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheLine {
    strategy: String,
    digest: String,
    prediction: String,
}

/// Predictions keyed by (strategy tag, pair digest), optionally persisted
/// as line-delimited JSON.
#[derive(Debug, Default)]
pub struct PredictionCache {
    entries: Mutex<BTreeMap<(String, String), String>>,
    path: Option<PathBuf>,
}

impl PredictionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, EvalError> {
        let path = path.into();
        let mut entries = BTreeMap::new();
        if path.exists() {
            let fail = |message: String| EvalError::Cache {
                path: path.clone(),
                message,
            };
            let file = fs::File::open(&path).map_err(|e| fail(e.to_string()))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| fail(e.to_string()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: CacheLine = serde_json::from_str(&line).map_err(|e| fail(e.to_string()))?;
                entries.insert((entry.strategy, entry.digest), entry.prediction);
            }
        }
        Ok(Self {
            entries: Mutex::new(entries),
            path: Some(path),
        })
    }

    pub fn get(&self, strategy: &str, digest: &str) -> Option<String> {
        self.entries
            .lock()
            .expect("cache lock")
            .get(&(strategy.to_string(), digest.to_string()))
            .cloned()
    }

    pub fn insert(&self, strategy: &str, digest: &str, prediction: &str) {
        self.entries
            .lock()
            .expect("cache lock")
            .insert((strategy.to_string(), digest.to_string()), prediction.to_string());
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn save(&self) -> Result<(), EvalError> {
        let Some(path) = &self.path else { return Ok(()) };
        let text: String = self
            .entries
            .lock()
            .expect("cache lock")
            .iter()
            .map(|((strategy, digest), prediction)| {
                let line = CacheLine {
                    strategy: strategy.clone(),
                    digest: digest.clone(),
                    prediction: prediction.clone(),
                };
                serde_json::to_string(&line).expect("cache line serializes") + "\n"
            })
            .collect();
        write_atomic(path, &text).map_err(|e| EvalError::Cache {
            path: path.clone(),
            message: e.to_string(),
        })
    }
}

fn write_atomic(path: &Path, text: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(tmp, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub pair_ref: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<NliLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub strategy: String,
    pub character: String,
    /// One entry per test pair; failed pairs carry `error` and no score.
    pub per_pair: Vec<PairScore>,
    /// Mean over scored pairs only.
    pub mean: Option<f64>,
    /// Fraction of pairs that were scored.
    pub coverage: f64,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalResult {
    pub fn scored(&self) -> usize {
        self.per_pair.iter().filter(|p| p.score.is_some()).count()
    }
}

/// Predicts and scores every test pair. Per-pair failures are kept in the
/// result and excluded from the mean.
pub fn evaluate_strategy(
    strategy: &dyn Strategy,
    test: &Corpus,
    nli: &dyn NliJudge,
    cache: &PredictionCache,
    config: serde_json::Value,
) -> Result<EvalResult, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let tag = strategy.tag();
    let per_pair: Vec<PairScore> = test
        .pairs
        .par_iter()
        .enumerate()
        .map(|(pair_ref, pair)| {
            let digest = pair.digest();
            let prediction = match cache.get(&tag, &digest) {
                Some(p) => Ok(p),
                None => strategy
                    .predict(&pair.scene)
                    .inspect(|p| cache.insert(&tag, &digest, p)),
            };
            let outcome = prediction
                .map_err(EvalError::from)
                .and_then(|p| nli_score(&pair.action.text, &p, nli).map(|s| (p, s)));
            match outcome {
                Ok((p, s)) => PairScore {
                    pair_ref,
                    prediction: Some(p),
                    label: Some(s.label),
                    score: Some(s.score),
                    error: None,
                },
                Err(e) => PairScore {
                    pair_ref,
                    prediction: None,
                    label: None,
                    score: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let labels: Vec<NliLabel> = per_pair.iter().filter_map(|p| p.label).collect();
    let coverage = labels.len() as f64 / per_pair.len() as f64;
    if coverage < 1.0 {
        warn!(strategy = %tag, coverage, "some pairs failed and are excluded from the mean");
    }
    Ok(EvalResult {
        strategy: tag,
        character: test.character.clone(),
        mean: mean_score(&labels),
        coverage,
        per_pair,
        config,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub character: String,
    pub strategy: String,
    pub mean: Option<f64>,
    pub coverage: f64,
    pub pairs: usize,
}

impl From<&EvalResult> for ReportRow {
    fn from(r: &EvalResult) -> Self {
        Self {
            character: r.character.clone(),
            strategy: r.strategy.clone(),
            mean: r.mean,
            coverage: r.coverage,
            pairs: r.per_pair.len(),
        }
    }
}

pub fn report_jsonl(rows: &[ReportRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

/// Column-aligned text table.
pub fn report_table(rows: &[ReportRow]) -> String {
    let header = ["character", "strategy", "mean", "coverage", "pairs"].map(String::from);
    let body: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.character.clone(),
                r.strategy.clone(),
                r.mean.map_or_else(|| "-".into(), |m| format!("{m:.2}")),
                format!("{:.1}%", r.coverage * 100.0),
                r.pairs.to_string(),
            ]
        })
        .collect();
    let mut widths = header.clone().map(|h| h.len());
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String; 5]| {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
            + "\n"
    };
    std::iter::once(line(&header)).chain(body.iter().map(line)).collect()
}

/// Mean score at one training-set size, for score-vs-data plots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub character: String,
    pub strategy: String,
    pub train_size: usize,
    pub mean: Option<f64>,
}
