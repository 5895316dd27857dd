//! File-backed store. Layout under the root:
//!
//! ```text
//! trees/<id>/rev-<n>.json   one tree document per revision
//! trees/<id>/HEAD           current revision number
//! trees/<id>/log.jsonl      induction events
//! trees/<id>/calls.jsonl    recorded oracle calls
//! jobs/<id>/job.json        job record
//! jobs/<id>/corpus.jsonl    pairs snapshotted at submission
//! jobs/<id>/checkpoint.json last induction state
//! idempotency/<hash>.json   stored responses
//! ```
//!
//! Writes go to a temporary file and are renamed into place, so readers see
//! either the old or the new file.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use cdt_core::codex::{deserialize_tree, serialize_tree, CodifiedDecisionTree};
use cdt_core::corpus::{self, SceneActionPair};
use cdt_core::induction::{InductionEvent, InductionLog, InductionState};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jobs::JobRecord;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("store io on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt store file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("revision {attempted} does not follow head {head}")]
    Conflict { head: u64, attempted: u64 },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Ids become directory names, so only a safe alphabet is allowed.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeSummary {
    pub id: String,
    pub character: String,
    pub revision: u64,
}

pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["trees", "jobs", "idempotency"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn tree_dir(&self, id: &str) -> Result<PathBuf, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::NotFound(format!("tree {id}")));
        }
        Ok(self.root.join("trees").join(id))
    }

    fn job_dir(&self, id: &str) -> Result<PathBuf, StoreError> {
        if !valid_id(id) {
            return Err(StoreError::NotFound(format!("job {id}")));
        }
        Ok(self.root.join("jobs").join(id))
    }

    fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), StoreError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_at(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, contents).map_err(io_at(&tmp))?;
        fs::rename(&tmp, path).map_err(io_at(path))
    }

    fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, StoreError> {
        match fs::read_to_string(path) {
            Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                message: e.to_string(),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_at(path)(e)),
        }
    }

    fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
        let text = serde_json::to_string_pretty(value).expect("store values serialize");
        Self::write_atomic(path, text.as_bytes())
    }

    pub fn head(&self, id: &str) -> Result<u64, StoreError> {
        let path = self.tree_dir(id)?.join("HEAD");
        match fs::read_to_string(&path) {
            Ok(text) => text.trim().parse().map_err(|_| StoreError::Corrupt {
                path,
                message: format!("bad head {text:?}"),
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(format!("tree {id}"))),
            Err(e) => Err(io_at(&path)(e)),
        }
    }

    /// Raw document of a revision, or of the head when `revision` is `None`.
    pub fn tree_document(&self, id: &str, revision: Option<u64>) -> Result<String, StoreError> {
        let rev = match revision {
            Some(r) => r,
            None => self.head(id)?,
        };
        let path = self.tree_dir(id)?.join(format!("rev-{rev}.json"));
        fs::read_to_string(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound(format!("tree {id} revision {rev}")),
            _ => io_at(&path)(e),
        })
    }

    pub fn load_tree(&self, id: &str, revision: Option<u64>) -> Result<CodifiedDecisionTree, StoreError> {
        let doc = self.tree_document(id, revision)?;
        deserialize_tree(&doc).map_err(|e| StoreError::Corrupt {
            path: self.tree_dir(id).unwrap_or_default(),
            message: e.to_string(),
        })
    }

    /// Writes the tree as a new revision and moves the head to it. The first
    /// commit may use any revision; later ones must follow the head by one.
    /// Callers serialize writers per tree.
    pub fn commit_tree(&self, id: &str, tree: &CodifiedDecisionTree) -> Result<(), StoreError> {
        let dir = self.tree_dir(id)?;
        match self.head(id) {
            Ok(head) if tree.revision != head + 1 => {
                return Err(StoreError::Conflict {
                    head,
                    attempted: tree.revision,
                })
            }
            Ok(_) | Err(StoreError::NotFound(_)) => {}
            Err(e) => return Err(e),
        }
        Self::write_atomic(&dir.join(format!("rev-{}.json", tree.revision)), serialize_tree(tree).as_bytes())?;
        Self::write_atomic(&dir.join("HEAD"), format!("{}\n", tree.revision).as_bytes())
    }

    pub fn write_log(&self, id: &str, log: &InductionLog) -> Result<(), StoreError> {
        let dir = self.tree_dir(id)?;
        Self::write_atomic(&dir.join("log.jsonl"), log.to_jsonl().as_bytes())?;
        let calls: String = log
            .calls
            .iter()
            .map(|c| serde_json::to_string(c).expect("call serializes") + "\n")
            .collect();
        Self::write_atomic(&dir.join("calls.jsonl"), calls.as_bytes())
    }

    /// Induction events of a tree; empty for trees stored without a log.
    pub fn read_log(&self, id: &str) -> Result<Vec<InductionEvent>, StoreError> {
        self.head(id)?;
        let path = self.tree_dir(id)?.join("log.jsonl");
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_at(&path)(e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                    path: path.clone(),
                    message: e.to_string(),
                })
            })
            .collect()
    }

    pub fn trees(&self) -> Result<Vec<TreeSummary>, StoreError> {
        let dir = self.root.join("trees");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_at(&dir))? {
            let entry = entry.map_err(io_at(&dir))?;
            let Some(id) = entry.file_name().to_str().map(str::to_string) else {
                continue;
            };
            // a directory without HEAD is a commit that never finished
            if let Ok(tree) = self.load_tree(&id, None) {
                out.push(TreeSummary {
                    id,
                    character: tree.character,
                    revision: tree.revision,
                });
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    pub fn save_job(&self, job: &JobRecord) -> Result<(), StoreError> {
        Self::write_json(&self.job_dir(&job.id)?.join("job.json"), job)
    }

    pub fn load_job(&self, id: &str) -> Result<JobRecord, StoreError> {
        Self::read_json(&self.job_dir(id)?.join("job.json"))?.ok_or_else(|| StoreError::NotFound(format!("job {id}")))
    }

    pub fn jobs(&self) -> Result<Vec<JobRecord>, StoreError> {
        let dir = self.root.join("jobs");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_at(&dir))? {
            let entry = entry.map_err(io_at(&dir))?;
            if let Some(id) = entry.file_name().to_str() {
                if let Ok(job) = self.load_job(id) {
                    out.push(job);
                }
            }
        }
        out.sort_by_key(|j| j.seq);
        Ok(out)
    }

    pub fn save_job_corpus(&self, id: &str, pairs: &[SceneActionPair]) -> Result<(), StoreError> {
        let path = self.job_dir(id)?.join("corpus.jsonl");
        let text: String = pairs
            .iter()
            .map(|p| serde_json::to_string(p).expect("pair serializes") + "\n")
            .collect();
        Self::write_atomic(&path, text.as_bytes())
    }

    pub fn load_job_corpus(&self, id: &str) -> Result<Vec<SceneActionPair>, StoreError> {
        let path = self.job_dir(id)?.join("corpus.jsonl");
        corpus::load_pairs(&path).map_err(|e| StoreError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    pub fn save_checkpoint(&self, id: &str, state: &InductionState) -> Result<(), StoreError> {
        let text = serde_json::to_string(state).expect("state serializes");
        Self::write_atomic(&self.job_dir(id)?.join("checkpoint.json"), text.as_bytes())
    }

    pub fn load_checkpoint(&self, id: &str) -> Result<Option<InductionState>, StoreError> {
        Self::read_json(&self.job_dir(id)?.join("checkpoint.json"))
    }

    pub fn clear_checkpoint(&self, id: &str) -> Result<(), StoreError> {
        let path = self.job_dir(id)?.join("checkpoint.json");
        match fs::remove_file(&path) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(io_at(&path)(e)),
            _ => Ok(()),
        }
    }

    fn idempotency_path(&self, scope: &str, key: &str) -> PathBuf {
        let digest = Sha256::digest(format!("{scope}\n{key}").as_bytes());
        self.root.join("idempotency").join(format!("{}.json", hex::encode(digest)))
    }

    pub fn recall_response(&self, scope: &str, key: &str) -> Result<Option<StoredResponse>, StoreError> {
        Self::read_json(&self.idempotency_path(scope, key))
    }

    pub fn remember_response(&self, scope: &str, key: &str, response: &StoredResponse) -> Result<(), StoreError> {
        Self::write_json(&self.idempotency_path(scope, key), response)
    }
}
