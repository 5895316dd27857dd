//! Induction jobs. Each character has one worker draining a FIFO queue, so a
//! character's jobs run one at a time while different characters proceed in
//! parallel. Progress is checkpointed after every grown node; a restarted
//! service picks up every job that had not reached a terminal state.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use cdt_core::codex::InductionConfig;
use cdt_core::corpus::{Corpus, SceneActionPair};
use cdt_core::induction::{Goal, Inducer, Interrupted};
use cdt_core::oracle::OracleSuite;
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tracing::{error, info, warn};

use crate::store::{Store, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    /// Stopped by an oracle failure; the checkpoint allows resuming.
    Interrupted,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_resumable(self) -> bool {
        matches!(self, Self::Queued | Self::Running | Self::Interrupted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    /// Submission order, used to restore queue order after a restart.
    pub seq: u64,
    pub tree_id: String,
    pub character: String,
    pub status: JobStatus,
    pub nodes_grown: usize,
    pub pending_nodes: usize,
    pub oracle_calls: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: InductionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Goal>,
}

pub struct Jobs {
    store: Arc<Store>,
    oracles: OracleSuite,
    parallelism: usize,
    live: Mutex<HashMap<String, JobRecord>>,
    queues: Mutex<HashMap<String, mpsc::UnboundedSender<String>>>,
    seq: AtomicU64,
}

impl Jobs {
    pub fn new(store: Arc<Store>, oracles: OracleSuite, parallelism: usize) -> Result<Arc<Self>, StoreError> {
        let next = store.jobs()?.iter().map(|j| j.seq + 1).max().unwrap_or(0);
        Ok(Arc::new(Self {
            store,
            oracles,
            parallelism,
            live: Mutex::new(HashMap::new()),
            queues: Mutex::new(HashMap::new()),
            seq: AtomicU64::new(next),
        }))
    }

    /// Persists the job and its corpus, then queues it. Must be called from
    /// within a tokio runtime.
    pub fn submit(
        self: &Arc<Self>,
        character: String,
        pairs: &[SceneActionPair],
        config: InductionConfig,
        goal: Option<Goal>,
    ) -> Result<JobRecord, StoreError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let job = JobRecord {
            id: id.clone(),
            seq: self.seq.fetch_add(1, Ordering::SeqCst),
            tree_id: id,
            character,
            status: JobStatus::Queued,
            nodes_grown: 0,
            pending_nodes: 1,
            oracle_calls: 0,
            error: None,
            config,
            goal,
        };
        self.store.save_job_corpus(&job.id, pairs)?;
        self.publish(&job);
        self.enqueue(&job);
        Ok(job)
    }

    pub fn status(&self, id: &str) -> Result<JobRecord, StoreError> {
        if let Some(job) = self.live.lock().expect("job map").get(id) {
            return Ok(job.clone());
        }
        self.store.load_job(id)
    }

    /// Re-queues every stored job that never reached a terminal state, in
    /// submission order.
    pub fn resume_pending(self: &Arc<Self>) -> Result<usize, StoreError> {
        let pending: Vec<JobRecord> = self.store.jobs()?.into_iter().filter(|j| j.status.is_resumable()).collect();
        for job in &pending {
            info!(job = %job.id, status = ?job.status, "resuming job");
            self.enqueue(job);
        }
        Ok(pending.len())
    }

    /// Queues an interrupted job again. Returns `None` when the job is in
    /// any other state.
    pub fn resume(self: &Arc<Self>, id: &str) -> Result<Option<JobRecord>, StoreError> {
        let mut job = self.status(id)?;
        if job.status != JobStatus::Interrupted {
            return Ok(None);
        }
        job.status = JobStatus::Queued;
        job.error = None;
        self.publish(&job);
        self.enqueue(&job);
        Ok(Some(job))
    }

    fn publish(&self, job: &JobRecord) {
        if let Err(e) = self.store.save_job(job) {
            warn!(job = %job.id, "cannot persist job record: {e}");
        }
        self.live.lock().expect("job map").insert(job.id.clone(), job.clone());
    }

    fn enqueue(self: &Arc<Self>, job: &JobRecord) {
        let mut queues = self.queues.lock().expect("queue map");
        let tx = queues.entry(job.character.clone()).or_insert_with(|| {
            let (tx, rx) = mpsc::unbounded_channel();
            tokio::spawn(Arc::clone(self).drain(rx));
            tx
        });
        tx.send(job.id.clone()).expect("worker outlives the queue map");
    }

    async fn drain(self: Arc<Self>, mut rx: mpsc::UnboundedReceiver<String>) {
        while let Some(id) = rx.recv().await {
            let jobs = Arc::clone(&self);
            let run = tokio::task::spawn_blocking(move || jobs.run(&id));
            if let Err(e) = run.await {
                error!("job worker panicked: {e}");
            }
        }
    }

    fn fail(&self, mut job: JobRecord, message: String) {
        warn!(job = %job.id, "job failed: {message}");
        job.status = JobStatus::Failed;
        job.error = Some(message);
        self.publish(&job);
    }

    fn run(&self, id: &str) {
        let mut job = match self.status(id) {
            Ok(job) if job.status.is_resumable() => job,
            Ok(_) => return,
            Err(e) => {
                error!(job = id, "cannot load job: {e}");
                return;
            }
        };
        let pairs = match self.store.load_job_corpus(id) {
            Ok(p) => p,
            Err(e) => return self.fail(job, e.to_string()),
        };
        let corpus = Corpus::new(job.character.clone(), pairs);
        let inducer = match Inducer::new(&corpus, &job.config, &self.oracles, job.goal.clone(), self.parallelism) {
            Ok(i) => i,
            Err(e) => return self.fail(job, e.to_string()),
        };
        let state = match self.store.load_checkpoint(id) {
            Ok(Some(state)) => state,
            Ok(None) => inducer.initial_state(),
            Err(e) => return self.fail(job, e.to_string()),
        };
        job.status = JobStatus::Running;
        job.error = None;
        self.publish(&job);
        let result = inducer.run(state, &mut |s| {
            if let Err(e) = self.store.save_checkpoint(id, s) {
                warn!(job = id, "checkpoint not saved: {e}");
            }
            job.nodes_grown = s.nodes_grown;
            job.pending_nodes = s.pending.len();
            job.oracle_calls = s.oracle_calls();
            self.publish(&job);
        });
        match result {
            Ok((tree, log)) => {
                // a crash between commit and the status update leaves a head behind
                let committed = match self.store.head(&job.tree_id) {
                    Ok(_) => Ok(()),
                    Err(StoreError::NotFound(_)) => self
                        .store
                        .commit_tree(&job.tree_id, &tree)
                        .and_then(|()| self.store.write_log(&job.tree_id, &log)),
                    Err(e) => Err(e),
                };
                if let Err(e) = committed {
                    return self.fail(job, e.to_string());
                }
                if let Err(e) = self.store.clear_checkpoint(id) {
                    warn!(job = id, "stale checkpoint left behind: {e}");
                }
                job.status = JobStatus::Done;
                job.pending_nodes = 0;
                info!(job = id, nodes = tree.nodes.len(), "job done");
                self.publish(&job);
            }
            Err(Interrupted { error, state }) => {
                if let Err(e) = self.store.save_checkpoint(id, &state) {
                    warn!(job = id, "checkpoint not saved: {e}");
                }
                job.status = JobStatus::Interrupted;
                job.error = Some(error.to_string());
                self.publish(&job);
            }
        }
    }
}
