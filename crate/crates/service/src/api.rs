//! HTTP surface over the store and the job runner. Every response body is
//! JSON except `GET /trees/{id}/verbalized`, which is plain text.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, patch, post};
use axum::Router;
use cdt_core::codex::{CodifiedDecisionTree, EditCommand, EditError, InductionConfig, NodeId};
use cdt_core::corpus::{filter_relation_subset, Corpus, SceneActionPair};
use cdt_core::evalharness::{report_table, EvalError, PredictionCache, ReportRow};
use cdt_core::grounding::{generate_action, traverse, GroundingError, TopKPolicy};
use cdt_core::induction::Goal;
use cdt_core::oracle::OracleSuite;
use cdt_core::templates::Templates;
use cdt_core::verbalize::verbalize;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{load_corpus, RunConfig};
use crate::evaluation::{run_evaluation, EvalPlan, PlanError, StrategyName};
use crate::jobs::Jobs;
use crate::store::{Store, StoreError};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(Vec<FieldError>),
    Conflict { message: String, current_revision: Option<u64> },
    Internal(String),
}

impl ApiError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        Self::BadRequest(vec![FieldError {
            field: field.into(),
            message: message.into(),
        }])
    }

    fn parts(&self) -> (StatusCode, Value) {
        match self {
            Self::NotFound(what) => (StatusCode::NOT_FOUND, json!({"error": "not found", "message": what})),
            Self::BadRequest(fields) => (StatusCode::BAD_REQUEST, json!({"error": "invalid body", "fields": fields})),
            Self::Conflict {
                message,
                current_revision,
            } => (
                StatusCode::CONFLICT,
                json!({"error": "conflict", "message": message, "current_revision": current_revision}),
            ),
            Self::Internal(message) => (
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({"error": "internal", "message": message}),
            ),
        }
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(what) => Self::NotFound(what),
            StoreError::Conflict { head, attempted } => Self::Conflict {
                message: format!("revision {attempted} does not follow head {head}"),
                current_revision: Some(head),
            },
            other => Self::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = self.parts();
        json_response(status, body.to_string())
    }
}

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

type Reply = Result<(StatusCode, String), ApiError>;

fn ok_json<T: Serialize>(status: StatusCode, value: &T) -> Reply {
    Ok((status, serde_json::to_string(value).expect("response serializes")))
}

fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { String::new() } else { path };
        ApiError::field(&field, e.inner().to_string())
    })
}

pub struct AppState {
    pub store: Arc<Store>,
    pub jobs: Arc<Jobs>,
    pub oracles: OracleSuite,
    pub templates: Templates,
    pub config: RunConfig,
    tree_writers: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    idempotency: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(store: Store, oracles: OracleSuite, templates: Templates, config: RunConfig) -> Result<Arc<Self>, StoreError> {
        let store = Arc::new(store);
        let jobs = Jobs::new(Arc::clone(&store), oracles.clone(), config.parallelism)?;
        Ok(Arc::new(Self {
            store,
            jobs,
            oracles,
            templates,
            config,
            tree_writers: Mutex::new(HashMap::new()),
            idempotency: tokio::sync::Mutex::new(()),
        }))
    }

    fn writer(&self, tree: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut writers = self.tree_writers.lock().expect("writer map");
        Arc::clone(writers.entry(tree.to_string()).or_default())
    }

    fn tree(&self, id: &str) -> Result<CodifiedDecisionTree, ApiError> {
        Ok(self.store.load_tree(id, None)?)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/trees", get(list_trees).post(create_tree))
        .route("/trees/{id}", get(get_tree))
        .route("/trees/{id}/verbalized", get(get_verbalized))
        .route("/trees/{id}/log", get(get_log))
        .route("/trees/{id}/traverse", post(post_traverse))
        .route("/trees/{id}/ground", post(post_ground))
        .route("/trees/{id}/nodes/{nid}", patch(patch_node))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/resume", post(resume_job))
        .route("/evaluate", post(post_evaluate))
        .with_state(state)
}

/// Runs `handler` once per idempotency key: a retried request with the same
/// key gets the stored response instead of acting again. Server errors are
/// not stored, so those retries act.
async fn idempotent<F, Fut>(state: &AppState, headers: &HeaderMap, scope: String, handler: F) -> Response
where
    F: FnOnce() -> Fut,
    Fut: Future<Output = Reply>,
{
    let key = headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    let Some(key) = key else {
        return finish(handler().await);
    };
    let _guard = state.idempotency.lock().await;
    match state.store.recall_response(&scope, &key) {
        Ok(Some(stored)) => {
            let status = StatusCode::from_u16(stored.status).unwrap_or(StatusCode::OK);
            return json_response(status, stored.body);
        }
        Ok(None) => {}
        Err(e) => return ApiError::from(e).into_response(),
    }
    let (status, body) = match handler().await {
        Ok(ok) => ok,
        Err(e) => {
            let (status, body) = e.parts();
            (status, body.to_string())
        }
    };
    if !status.is_server_error() {
        let stored = crate::store::StoredResponse {
            status: status.as_u16(),
            body: body.clone(),
        };
        if let Err(e) = state.store.remember_response(&scope, &key, &stored) {
            return ApiError::from(e).into_response();
        }
    }
    json_response(status, body)
}

fn finish(reply: Reply) -> Response {
    match reply {
        Ok((status, body)) => json_response(status, body),
        Err(e) => e.into_response(),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))
}

async fn list_trees(State(state): State<Arc<AppState>>) -> Response {
    finish(state.store.trees().map_err(ApiError::from).and_then(|t| ok_json(StatusCode::OK, &t)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateTreeBody {
    /// Corpus file on the service host.
    corpus: Option<PathBuf>,
    pairs: Option<Vec<SceneActionPair>>,
    character: Option<String>,
    window: Option<usize>,
    /// Overrides on top of the service's induction defaults.
    #[serde(default)]
    config: serde_json::Map<String, Value>,
    goal: Option<Goal>,
}

fn induction_config(defaults: &InductionConfig, overrides: serde_json::Map<String, Value>) -> Result<InductionConfig, ApiError> {
    let mut merged = serde_json::to_value(defaults).expect("config serializes");
    let known: Vec<String> = merged.as_object().expect("object").keys().cloned().collect();
    for (k, v) in overrides {
        if !known.contains(&k) {
            return Err(ApiError::field(&format!("config.{k}"), "unknown field"));
        }
        merged[&k] = v;
    }
    let config: InductionConfig = serde_path_to_error::deserialize(merged)
        .map_err(|e| ApiError::field(&format!("config.{}", e.path()), e.inner().to_string()))?;
    config.validate().map_err(|e| ApiError::field("config", e.0))?;
    Ok(config)
}

fn body_corpus(
    config: &RunConfig,
    path: Option<PathBuf>,
    pairs: Option<Vec<SceneActionPair>>,
    character: Option<String>,
    window: Option<usize>,
) -> Result<Corpus, ApiError> {
    match (path, pairs) {
        (Some(_), Some(_)) => Err(ApiError::field("corpus", "give either corpus or pairs, not both")),
        (None, None) => Err(ApiError::field("corpus", "a corpus path or inline pairs are required")),
        (Some(path), None) => load_corpus(&path, character.as_deref(), window.or(config.corpus.window))
            .map_err(|e| ApiError::field("corpus", e.to_string())),
        (None, Some(pairs)) => {
            let character = character
                .or_else(|| pairs.first().map(|p| p.character.clone()))
                .ok_or_else(|| ApiError::field("pairs", "no pairs given"))?;
            let pairs = pairs.into_iter().filter(|p| p.character == character).collect();
            Ok(Corpus::new(character, pairs))
        }
    }
}

async fn create_tree(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let s = Arc::clone(&state);
    idempotent(&state, &headers, "POST /trees".into(), || async move {
        let body: CreateTreeBody = parse_body(&body)?;
        let config = induction_config(&s.config.induction, body.config)?;
        let corpus = body_corpus(&s.config, body.corpus, body.pairs, body.character, body.window)?;
        let usable = match &body.goal {
            Some(goal) => filter_relation_subset(&corpus.pairs, &goal.related).len(),
            None => corpus.len(),
        };
        if usable < config.min_node_data {
            return Err(ApiError::field(
                "corpus",
                format!("{usable} usable pairs, need at least min_node_data = {}", config.min_node_data),
            ));
        }
        let job = s.jobs.submit(corpus.character.clone(), &corpus.pairs, config, body.goal)?;
        ok_json(
            StatusCode::ACCEPTED,
            &json!({"job_id": job.id, "tree_id": job.tree_id, "status": job.status}),
        )
    })
    .await
}

#[derive(Debug, Deserialize)]
struct RevisionQuery {
    revision: Option<u64>,
}

async fn get_tree(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RevisionQuery>,
) -> Response {
    finish(
        state
            .store
            .tree_document(&id, q.revision)
            .map(|doc| (StatusCode::OK, doc))
            .map_err(ApiError::from),
    )
}

async fn get_verbalized(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match state.tree(&id) {
        Ok(tree) => (StatusCode::OK, [(header::CONTENT_TYPE, "text/plain; charset=utf-8")], verbalize(&tree)).into_response(),
        Err(e) => e.into_response(),
    }
}

#[derive(Debug, Deserialize)]
struct LogQuery {
    #[serde(default)]
    abolished: bool,
}

/// Induction events, or only the abolished hypotheses with `?abolished=true`.
async fn get_log(State(state): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<LogQuery>) -> Response {
    let events = state.store.read_log(&id).map_err(ApiError::from).map(|events| {
        events
            .into_iter()
            .filter(|e| !q.abolished || e.is_abolished())
            .collect::<Vec<_>>()
    });
    finish(events.and_then(|e| ok_json(StatusCode::OK, &e)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneBody {
    scene: String,
    policy: Option<TopKPolicy>,
}

fn scene_body(bytes: &[u8]) -> Result<SceneBody, ApiError> {
    let body: SceneBody = parse_body(bytes)?;
    if body.scene.trim().is_empty() {
        return Err(ApiError::field("scene", "must not be empty"));
    }
    if body.policy.is_some_and(|p| p.k == 0) {
        return Err(ApiError::field("policy.k", "must be at least 1"));
    }
    Ok(body)
}

fn grounding_failure(e: GroundingError) -> ApiError {
    match e {
        GroundingError::EmptyScene => ApiError::field("scene", "must not be empty"),
        other => ApiError::Internal(other.to_string()),
    }
}

async fn post_traverse(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    let reply = async {
        let tree = state.tree(&id)?;
        let body = scene_body(&body)?;
        let discriminator = Arc::clone(&state.oracles.discriminator);
        let bundle = blocking(move || traverse(&tree, &body.scene, discriminator.as_ref())).await?;
        Ok((StatusCode::OK, bundle.map_err(grounding_failure)?.to_document()))
    };
    finish(reply.await)
}

async fn post_ground(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Response {
    let reply = async {
        let tree = state.tree(&id)?;
        let body = scene_body(&body)?;
        let policy = body.policy.unwrap_or(state.config.grounding);
        let (oracles, templates) = (state.oracles.clone(), state.templates.clone());
        let generation = blocking(move || generate_action(&body.scene, &tree, &policy, &oracles, &templates)).await?;
        ok_json(StatusCode::OK, &generation.map_err(grounding_failure)?)
    };
    finish(reply.await)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchBody {
    revision: u64,
    command: EditCommand,
}

fn command_target(command: &EditCommand) -> NodeId {
    match command {
        EditCommand::UpdateStatement { node, .. }
        | EditCommand::DeleteNode { node }
        | EditCommand::DetachStatement { node, .. } => *node,
        EditCommand::AddChild { parent, .. } => *parent,
    }
}

async fn patch_node(
    State(state): State<Arc<AppState>>,
    Path((id, nid)): Path<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let scope = format!("PATCH /trees/{id}/nodes/{nid}");
    let s = Arc::clone(&state);
    idempotent(&state, &headers, scope, || async move {
        let writer = s.writer(&id);
        let _guard = writer.lock().await;
        let tree = s.tree(&id)?;
        let node = nid
            .parse::<u32>()
            .ok()
            .map(NodeId)
            .filter(|n| tree.nodes.contains_key(n))
            .ok_or_else(|| ApiError::NotFound(format!("node {nid} of tree {id}")))?;
        let body: PatchBody = parse_body(&body)?;
        if command_target(&body.command) != node {
            return Err(ApiError::field("command", format!("command does not target node {node}")));
        }
        if body.revision != tree.revision {
            return Err(ApiError::Conflict {
                message: format!("revision {} is stale", body.revision),
                current_revision: Some(tree.revision),
            });
        }
        let edited = tree.apply_edit(&body.command).map_err(|e| match e {
            EditError::UnknownNode(n) => ApiError::NotFound(format!("node {n} of tree {id}")),
            EditError::UnknownStatement { .. } => ApiError::field("command.index", e.to_string()),
            EditError::Rejected(_) => ApiError::field("command", e.to_string()),
        })?;
        s.store.commit_tree(&id, &edited)?;
        Ok((StatusCode::OK, edited.to_document()))
    })
    .await
}

async fn get_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    finish(state.jobs.status(&id).map_err(ApiError::from).and_then(|j| ok_json(StatusCode::OK, &j)))
}

async fn resume_job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let reply = match state.jobs.resume(&id) {
        Ok(Some(job)) => ok_json(StatusCode::ACCEPTED, &job),
        Ok(None) => state.jobs.status(&id).map_err(ApiError::from).and_then(|job| {
            Err(ApiError::Conflict {
                message: format!("job is {:?}, only interrupted jobs resume", job.status).to_lowercase(),
                current_revision: None,
            })
        }),
        Err(e) => Err(e.into()),
    };
    finish(reply)
}

fn default_strategies() -> Vec<StrategyName> {
    vec![StrategyName::Cdt]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvaluateBody {
    tree: Option<String>,
    /// Latest scene actor → tree id.
    #[serde(default)]
    relation_trees: BTreeMap<String, String>,
    corpus: Option<PathBuf>,
    pairs: Option<Vec<SceneActionPair>>,
    character: Option<String>,
    window: Option<usize>,
    #[serde(default = "default_strategies")]
    strategies: Vec<StrategyName>,
    train_fraction: Option<f64>,
    profile: Option<String>,
    policy: Option<TopKPolicy>,
}

async fn post_evaluate(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let reply = async {
        let body: EvaluateBody = parse_body(&body)?;
        if body.strategies.is_empty() {
            return Err(ApiError::field("strategies", "at least one strategy is required"));
        }
        let tree = body.tree.as_deref().map(|id| state.tree(id)).transpose()?;
        let mut relation_trees = BTreeMap::new();
        for (actor, id) in &body.relation_trees {
            relation_trees.insert(actor.clone(), state.tree(id)?);
        }
        let character = body.character.or_else(|| tree.as_ref().map(|t| t.character.clone()));
        let corpus = body_corpus(&state.config, body.corpus, body.pairs, character, body.window)?;
        let plan_inputs = (
            corpus,
            body.train_fraction,
            body.strategies,
            tree,
            relation_trees,
            body.profile,
            body.policy.unwrap_or(state.config.grounding),
        );
        let (oracles, templates) = (state.oracles.clone(), state.templates.clone());
        let results = blocking(move || {
            let (corpus, train_fraction, strategies, tree, relation_trees, profile, policy) = plan_inputs;
            let plan = EvalPlan {
                corpus: &corpus,
                train_fraction,
                strategies,
                tree,
                relation_trees,
                profile,
                policy,
            };
            run_evaluation(plan, &oracles, &templates, &PredictionCache::in_memory())
        })
        .await?
        .map_err(|e| match e {
            PlanError::Argument(m) => ApiError::field("strategies", m),
            PlanError::Eval(EvalError::EmptyTestSet) => ApiError::field("corpus", "empty test set"),
            PlanError::Eval(e) => ApiError::Internal(e.to_string()),
        })?;
        let rows: Vec<ReportRow> = results.iter().map(ReportRow::from).collect();
        ok_json(
            StatusCode::OK,
            &json!({"results": results, "rows": rows, "table": report_table(&rows)}),
        )
    };
    finish(reply.await)
}
