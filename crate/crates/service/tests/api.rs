//! The HTTP service in-process, over a temporary store and offline oracles.

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use cdt_core::codex::{CodifiedDecisionTree, EditCommand, InductionConfig};
use cdt_core::corpus::Corpus;
use cdt_core::induction::{induce, Inducer};
use cdt_core::oracle::planted::{PlantedCorpus, PlantedOracle, WorldSpec};
use cdt_service::api::{router, AppState, IDEMPOTENCY_HEADER};
use cdt_service::config::RunConfig;
use cdt_service::jobs::{JobRecord, JobStatus};
use cdt_service::store::Store;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn world(seed: u64) -> PlantedCorpus {
    PlantedCorpus::generate(&WorldSpec {
        seed,
        ..WorldSpec::default()
    })
}

fn state(dir: &std::path::Path, world: &PlantedCorpus) -> Arc<AppState> {
    AppState::new(
        Store::open(dir).unwrap(),
        PlantedOracle::suite(world.world.clone()),
        Default::default(),
        RunConfig::default(),
    )
    .unwrap()
}

struct Reply {
    status: StatusCode,
    text: String,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_str(&self.text).unwrap_or_else(|e| panic!("{e}: {}", self.text))
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>, key: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header(IDEMPOTENCY_HEADER, k);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    Reply {
        status,
        text: String::from_utf8(bytes.to_vec()).unwrap(),
    }
}

async fn wait_done(app: &Router, job: &str) -> Value {
    let start = Instant::now();
    loop {
        let r = call(app, Method::GET, &format!("/jobs/{job}"), None, None).await;
        assert_eq!(r.status, StatusCode::OK);
        let v = r.json();
        match v["status"].as_str().unwrap() {
            "done" => return v,
            "failed" | "interrupted" => panic!("job ended as {v}"),
            _ => {}
        }
        assert!(start.elapsed() < Duration::from_secs(120), "job stuck: {v}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

fn reference_tree(world: &PlantedCorpus) -> CodifiedDecisionTree {
    let corpus = Corpus::new("Mira", world.pairs.clone());
    induce(&corpus, &InductionConfig::default(), &PlantedOracle::suite(world.world.clone()), None)
        .unwrap()
        .0
}

/// Submits the fixture corpus and waits for the tree.
async fn grown_tree(app: &Router, world: &PlantedCorpus) -> String {
    let r = call(app, Method::POST, "/trees", Some(json!({"pairs": world.pairs})), None).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.text);
    let job = r.json()["job_id"].as_str().unwrap().to_string();
    let done = wait_done(app, &job).await;
    done["tree_id"].as_str().unwrap().to_string()
}

#[tokio::test(flavor = "multi_thread")]
async fn job_reaches_done_with_the_library_tree() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(3);
    let app = router(state(dir.path(), &w));
    let r = call(&app, Method::POST, "/trees", Some(json!({"pairs": w.pairs})), None).await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let job = r.json()["job_id"].as_str().unwrap().to_string();
    let done = wait_done(&app, &job).await;
    assert!(done["nodes_grown"].as_u64().unwrap() >= 1);
    assert!(done["oracle_calls"].as_u64().unwrap() > 0);
    let tree_id = done["tree_id"].as_str().unwrap();
    let doc = call(&app, Method::GET, &format!("/trees/{tree_id}"), None, None).await;
    assert_eq!(doc.status, StatusCode::OK);
    assert_eq!(doc.text, reference_tree(&w).to_document());

    let listed = call(&app, Method::GET, "/trees", None, None).await.json();
    assert_eq!(listed[0]["id"], tree_id);

    let text = call(&app, Method::GET, &format!("/trees/{tree_id}/verbalized"), None, None).await;
    assert_eq!(text.status, StatusCode::OK);
    assert_eq!(text.text, cdt_core::verbalize::verbalize(&reference_tree(&w)));

    let log = call(&app, Method::GET, &format!("/trees/{tree_id}/log"), None, None).await.json();
    let abolished = call(&app, Method::GET, &format!("/trees/{tree_id}/log?abolished=true"), None, None).await.json();
    let all = log.as_array().unwrap();
    let only = abolished.as_array().unwrap();
    assert!(!all.is_empty());
    assert!(only.len() < all.len());
    assert!(only.iter().all(|e| all.contains(e)));
}

#[tokio::test(flavor = "multi_thread")]
async fn traversal_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(5);
    let app = router(state(dir.path(), &w));
    let tree = grown_tree(&app, &w).await;
    let scene = w.pairs[40].scene_text();
    let uri = format!("/trees/{tree}/traverse");
    let a = call(&app, Method::POST, &uri, Some(json!({"scene": scene})), None).await;
    let b = call(&app, Method::POST, &uri, Some(json!({"scene": scene})), None).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(a.text, b.text);
    let expected = cdt_core::grounding::traverse(&reference_tree(&w), &scene, &PlantedOracle::new(w.world.clone()))
        .unwrap()
        .to_document();
    assert_eq!(a.text, expected);

    let bad = call(&app, Method::POST, &uri, Some(json!({"scene": 7})), None).await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
    assert_eq!(bad.json()["fields"][0]["field"], "scene");
    let empty = call(&app, Method::POST, &uri, Some(json!({"scene": "  "})), None).await;
    assert_eq!(empty.status, StatusCode::BAD_REQUEST);
    assert_eq!(empty.json()["fields"][0]["field"], "scene");
    let missing = call(&app, Method::POST, "/trees/nosuch/traverse", Some(json!({"scene": scene})), None).await;
    assert_eq!(missing.status, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, Method::GET, "/jobs/nosuch", None, None).await.status, StatusCode::NOT_FOUND);

    let g = call(
        &app,
        Method::POST,
        &format!("/trees/{tree}/ground"),
        Some(json!({"scene": scene, "policy": {"kind": "depth_rank", "k": 2}})),
        None,
    )
    .await;
    assert_eq!(g.status, StatusCode::OK, "{}", g.text);
    let g = g.json();
    assert!(g["selected"].as_array().unwrap().len() <= 2);
    assert!(g["action"].is_string());
}

#[tokio::test(flavor = "multi_thread")]
async fn stale_edits_conflict_and_retries_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(7);
    let app = router(state(dir.path(), &w));
    let tree = grown_tree(&app, &w).await;
    let root = reference_tree(&w).root;
    let uri = format!("/trees/{tree}/nodes/{}", root.0);
    let add = |revision: u64, q: &str| {
        json!({"revision": revision, "command": {"op": "add_child", "parent": root, "question": q}})
    };

    let first = call(&app, Method::PATCH, &uri, Some(add(0, "Is it raining?")), Some("k1")).await;
    assert_eq!(first.status, StatusCode::OK, "{}", first.text);
    let retry = call(&app, Method::PATCH, &uri, Some(add(0, "Is it raining?")), Some("k1")).await;
    assert_eq!(retry.status, StatusCode::OK);
    assert_eq!(retry.text, first.text);
    let head = call(&app, Method::GET, &format!("/trees/{tree}"), None, None).await.json();
    assert_eq!(head["revision"], 1);

    let stale = call(&app, Method::PATCH, &uri, Some(add(0, "Is it snowing?")), Some("k2")).await;
    assert_eq!(stale.status, StatusCode::CONFLICT);
    assert_eq!(stale.json()["current_revision"], 1);

    let old = call(&app, Method::GET, &format!("/trees/{tree}?revision=0"), None, None).await;
    assert_eq!(old.text, reference_tree(&w).to_document());

    let wrong_node = call(&app, Method::PATCH, &format!("/trees/{tree}/nodes/9999"), Some(add(1, "x")), None).await;
    assert_eq!(wrong_node.status, StatusCode::NOT_FOUND);
    let bad = call(&app, Method::PATCH, &uri, Some(json!({"revision": 1, "command": {"op": "grow"}})), None).await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
    assert!(bad.json()["fields"][0]["field"].as_str().unwrap().starts_with("command"));

    let delete = EditCommand::DeleteNode { node: root };
    let root_delete = call(&app, Method::PATCH, &uri, Some(json!({"revision": 1, "command": delete})), None).await;
    assert_eq!(root_delete.status, StatusCode::BAD_REQUEST, "{}", root_delete.text);

    // the same key on a fresh POST /trees creates one job
    let body = json!({"pairs": w.pairs});
    let a = call(&app, Method::POST, "/trees", Some(body.clone()), Some("job-1")).await;
    let b = call(&app, Method::POST, "/trees", Some(body), Some("job-1")).await;
    assert_eq!(a.text, b.text);
    wait_done(&app, a.json()["job_id"].as_str().unwrap()).await;
    let jobs = std::fs::read_dir(dir.path().join("jobs")).unwrap().count();
    assert_eq!(jobs, 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_submissions_name_their_fields() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(1);
    let app = router(state(dir.path(), &w));
    let inverted = json!({"pairs": w.pairs, "config": {"theta_acc": 0.4, "theta_rej": 0.6}});
    let r = call(&app, Method::POST, "/trees", Some(inverted), None).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let f = &r.json()["fields"][0];
    assert_eq!(f["field"], "config");
    assert!(f["message"].as_str().unwrap().contains("theta_rej < theta_acc"));

    let typo = call(&app, Method::POST, "/trees", Some(json!({"pairs": w.pairs, "config": {"dmax": 2}})), None).await;
    assert_eq!(typo.json()["fields"][0]["field"], "config.dmax");
    let wrong_type =
        call(&app, Method::POST, "/trees", Some(json!({"pairs": w.pairs, "config": {"d_max": "deep"}})), None).await;
    assert_eq!(wrong_type.json()["fields"][0]["field"], "config.d_max");
    let neither = call(&app, Method::POST, "/trees", Some(json!({})), None).await;
    assert_eq!(neither.json()["fields"][0]["field"], "corpus");
    let few = call(&app, Method::POST, "/trees", Some(json!({"pairs": &w.pairs[..5]})), None).await;
    assert_eq!(few.status, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread")]
async fn restart_resumes_from_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = InductionConfig::default();
    // middling rule rates make the root recurse, so the first checkpoint
    // still has nodes pending
    let (w, partial) = (0..20)
        .find_map(|seed| {
            let w = PlantedCorpus::generate(&WorldSpec {
                seed,
                rule_rate: (0.6, 0.7),
                trigger_share: (0.3, 0.4),
                ..WorldSpec::default()
            });
            let suite = PlantedOracle::suite(w.world.clone());
            let corpus = Corpus::new("Mira", w.pairs.clone());
            let inducer = Inducer::new(&corpus, &config, &suite, None, 0).unwrap();
            let mut first = None;
            inducer
                .run(inducer.initial_state(), &mut |s| {
                    if first.is_none() {
                        first = Some(s.clone());
                    }
                })
                .unwrap();
            first.filter(|s| !s.is_finished()).map(|s| (w, s))
        })
        .expect("some seed recurses");
    {
        let store = Store::open(dir.path()).unwrap();
        let job = JobRecord {
            id: "j1".into(),
            seq: 0,
            tree_id: "t1".into(),
            character: "Mira".into(),
            status: JobStatus::Running,
            nodes_grown: partial.nodes_grown,
            pending_nodes: partial.pending.len(),
            oracle_calls: partial.oracle_calls(),
            error: None,
            config: config.clone(),
            goal: None,
        };
        store.save_job(&job).unwrap();
        store.save_job_corpus("j1", &w.pairs).unwrap();
        store.save_checkpoint("j1", &partial).unwrap();
    }

    let s = state(dir.path(), &w);
    assert_eq!(s.jobs.resume_pending().unwrap(), 1);
    let app = router(s);
    let done = wait_done(&app, "j1").await;
    assert!(done["nodes_grown"].as_u64().unwrap() > partial.nodes_grown as u64);
    let doc = call(&app, Method::GET, "/trees/t1", None, None).await;
    assert_eq!(doc.text, reference_tree(&w).to_document());
    assert!(!dir.path().join("jobs/j1/checkpoint.json").exists());

    // a second restart finds nothing left to do and still serves the tree
    let app = router(state(dir.path(), &w));
    assert_eq!(call(&app, Method::GET, "/trees/t1", None, None).await.text, doc.text);
    assert_eq!(call(&app, Method::GET, "/jobs/j1", None, None).await.json()["status"], "done");
}

#[tokio::test(flavor = "multi_thread")]
async fn evaluate_endpoint_reports_rows() {
    let dir = tempfile::tempdir().unwrap();
    let w = world(2);
    let app = router(state(dir.path(), &w));
    let tree = grown_tree(&app, &w).await;
    let body = json!({"tree": tree, "pairs": w.pairs, "strategies": ["vanilla", "cdt"], "train_fraction": 0.7});
    let r = call(&app, Method::POST, "/evaluate", Some(body), None).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text);
    let v = r.json();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["pairs"], 60);
    assert!(v["table"].as_str().unwrap().starts_with("character"));

    let no_tree = json!({"pairs": w.pairs, "strategies": ["cdt"]});
    let r = call(&app, Method::POST, "/evaluate", Some(no_tree), None).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = call(&app, Method::POST, "/evaluate", Some(json!({"pairs": w.pairs, "strategies": ["oracle"]})), None).await;
    assert_eq!(r.json()["fields"][0]["field"], "strategies[0]");
}
