//! Scene–action corpora: storyline loading, pair construction, chronological
//! splitting and relation filtering.
//!
//! Storylines are UTF-8 line-delimited JSON, one action record per line.
//! Cached pair files use one `{character, scene, action}` object per line.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::oracle::{OracleError, TextGenerator};
use crate::templates::Templates;

/// Actor label used for narration with no active character.
pub const ENVIRONMENT: &str = "environment";

/// Default scene window (number of preceding actions).
pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("extraction error: {message}; raw output: {raw}")]
    Extraction { message: String, raw: String },
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub actor: String,
    pub text: String,
    #[serde(default)]
    pub episode: String,
    pub index: u64,
}

impl ActionRecord {
    pub fn new(actor: impl Into<String>, text: impl Into<String>, index: u64) -> Self {
        Self {
            actor: actor.into(),
            text: text.into(),
            episode: String::new(),
            index,
        }
    }
}

impl fmt::Display for ActionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.actor, self.text)
    }
}

/// One training or test instance: the preceding window of actions and the
/// character's next action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneActionPair {
    pub character: String,
    pub scene: Vec<ActionRecord>,
    pub action: ActionRecord,
}

impl SceneActionPair {
    /// Scene text as fed to the discriminator: `Actor: text` lines, newest last.
    pub fn scene_text(&self) -> String {
        render_scene(&self.scene)
    }

    pub fn last_actor(&self) -> Option<&str> {
        self.scene.last().map(|r| r.actor.as_str())
    }

    /// Stable content digest, used as a cache key.
    pub fn digest(&self) -> String {
        let doc = serde_json::to_vec(self).expect("pair serializes");
        hex::encode(Sha256::digest(&doc))
    }
}

/// Renders scene records one per line as `Actor: text`.
pub fn render_scene(records: &[ActionRecord]) -> String {
    records
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
    Unsplit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub character: String,
    pub pairs: Vec<SceneActionPair>,
    pub split_tag: SplitTag,
}

impl Corpus {
    pub fn new(character: impl Into<String>, pairs: Vec<SceneActionPair>) -> Self {
        Self {
            character: character.into(),
            pairs,
            split_tag: SplitTag::Unsplit,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Deserialize)]
struct RawRecord {
    actor: String,
    text: String,
    #[serde(default)]
    episode: Option<String>,
    #[serde(default)]
    index: Option<u64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads a storyline file. Blank lines are skipped; line numbers in errors
/// are 1-based physical lines.
pub fn load_storyline(path: impl AsRef<Path>) -> Result<Vec<ActionRecord>, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    parse_storyline(BufReader::new(file))
}

pub fn parse_storyline(reader: impl BufRead) -> Result<Vec<ActionRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut explicit: Option<bool> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if raw.text.trim().is_empty() {
            return Err(CorpusError::Parse {
                line: lineno,
                message: "empty \"text\"".into(),
            });
        }
        if raw.actor.trim().is_empty() {
            return Err(CorpusError::Parse {
                line: lineno,
                message: "empty \"actor\"".into(),
            });
        }
        let has_index = raw.index.is_some();
        match explicit {
            None => explicit = Some(has_index),
            Some(prev) if prev != has_index => {
                return Err(CorpusError::Validation(format!(
                    "line {lineno}: explicit and implicit indices cannot be mixed"
                )))
            }
            _ => {}
        }
        let index = raw.index.unwrap_or(records.len() as u64);
        if let Some(prev) = records.last().map(|r: &ActionRecord| r.index) {
            if index == prev {
                return Err(CorpusError::Validation(format!("duplicate index {index}")));
            }
            if index < prev {
                return Err(CorpusError::Validation(format!(
                    "line {lineno}: index {index} is not increasing (previous {prev})"
                )));
            }
        }
        records.push(ActionRecord {
            actor: raw.actor,
            text: raw.text,
            episode: raw.episode.unwrap_or_default(),
            index,
        });
    }
    Ok(records)
}

pub fn write_storyline(path: impl AsRef<Path>, records: &[ActionRecord]) -> Result<(), CorpusError> {
    write_lines(path.as_ref(), records)
}

pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<SceneActionPair>, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut pairs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: SceneActionPair =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[SceneActionPair]) -> Result<(), CorpusError> {
    write_lines(path.as_ref(), pairs)
}

/// Writes any serializable sequence as line-delimited JSON.
pub fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for item in items {
        let line = serde_json::to_string(item).expect("record serializes");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// True when the first non-blank line of the file looks like a pair record.
pub fn is_pair_file(path: impl AsRef<Path>) -> Result<bool, CorpusError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: 1,
                message: e.to_string(),
            })?;
        return Ok(value.get("scene").is_some());
    }
    Ok(false)
}

/// One pair per action by `character`, with up to `window` immediately
/// preceding actions (any actor) as the scene.
pub fn build_pairs(actions: &[ActionRecord], character: &str, window: usize) -> Vec<SceneActionPair> {
    actions
        .iter()
        .enumerate()
        .filter(|(_, a)| a.actor == character)
        .map(|(i, a)| SceneActionPair {
            character: character.to_string(),
            scene: actions[i.saturating_sub(window)..i].to_vec(),
            action: a.clone(),
        })
        .collect()
}

/// Train gets the first `ceil(ratio * n)` pairs, test the remainder.
pub fn chronological_split(
    pairs: &[SceneActionPair],
    character: &str,
    ratio: f64,
) -> Result<(Corpus, Corpus), CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::Validation(format!(
            "split ratio must be in (0, 1), got {ratio}"
        )));
    }
    let boundary = ((ratio * pairs.len() as f64).ceil() as usize).min(pairs.len());
    let make = |slice: &[SceneActionPair], tag| Corpus {
        character: character.to_string(),
        pairs: slice.to_vec(),
        split_tag: tag,
    };
    Ok((
        make(&pairs[..boundary], SplitTag::Train),
        make(&pairs[boundary..], SplitTag::Test),
    ))
}

/// Keeps pairs whose latest scene action was taken by `related`.
pub fn filter_relation_subset(pairs: &[SceneActionPair], related: &str) -> Vec<SceneActionPair> {
    pairs
        .iter()
        .filter(|p| p.last_actor() == Some(related))
        .cloned()
        .collect()
}

#[derive(Deserialize)]
struct ExtractedAction {
    actor: String,
    text: String,
}

/// Segments a narration into actor-annotated actions with an LLM. Actors
/// outside the roster are mapped to [`ENVIRONMENT`].
pub fn extract_actions(
    narration: &str,
    character_roster: &[String],
    llm: &dyn TextGenerator,
    templates: &Templates,
) -> Result<Vec<ActionRecord>, CorpusError> {
    if narration.trim().is_empty() {
        return Err(CorpusError::Validation("empty narration".into()));
    }
    let roster = if character_roster.is_empty() {
        "(none)".to_string()
    } else {
        character_roster.join(", ")
    };
    let prompt = templates.render(
        "extract_actions",
        &[("narration", narration), ("roster", &roster)],
    );
    let raw = llm.generate(&prompt)?;
    let items = parse_extracted(&raw).ok_or_else(|| CorpusError::Extraction {
        message: "expected a JSON array or JSON lines of {actor, text}".into(),
        raw: raw.clone(),
    })?;
    Ok(items
        .into_iter()
        .filter(|item| !item.text.trim().is_empty())
        .enumerate()
        .map(|(i, item)| {
            let actor = if character_roster.contains(&item.actor) {
                item.actor
            } else {
                ENVIRONMENT.to_string()
            };
            ActionRecord::new(actor, item.text.trim(), i as u64)
        })
        .collect())
}

fn parse_extracted(raw: &str) -> Option<Vec<ExtractedAction>> {
    if let (Some(start), Some(end)) = (raw.find('['), raw.rfind(']')) {
        if start < end {
            if let Ok(items) = serde_json::from_str(&raw[start..=end]) {
                return Some(items);
            }
        }
    }
    let items: Result<Vec<ExtractedAction>, _> = raw
        .lines()
        .map(str::trim)
        .filter(|l| l.starts_with('{'))
        .map(serde_json::from_str)
        .collect();
    match items {
        Ok(items) if !items.is_empty() => Some(items),
        _ => None,
    }
}
