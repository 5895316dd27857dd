//! OpenAI-compatible HTTP oracles with retry and a content-addressed cache.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tracing::warn;

use super::{
    classify_nli, classify_verdict, parse_hypotheses, render_hypothesis_prompt, CheckVerdict,
    Discriminator, Embedder, HypothesisRequest, Hypothesizer, NliJudge, NliLabel, OracleError,
    OracleSuite, TextGenerator,
};
use crate::codex::Hypothesis;
use crate::templates::Templates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 1000,
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): base * 2^attempt,
    /// scaled by a uniform factor in [0.5, 1.5) when jittered.
    pub fn delay(&self, attempt: u32) -> Duration {
        let base = self.base_delay_ms.saturating_mul(1 << attempt.min(16)) as f64;
        let scale = if self.jitter { 0.5 + rand::random::<f64>() } else { 1.0 };
        Duration::from_millis((base * scale) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpOracleConfig {
    pub base_url: String,
    /// Inline key; normally left empty and read from `api_key_env`.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub api_key_env: String,
    pub hypothesis_model: String,
    pub discriminator_model: String,
    pub nli_model: String,
    pub generator_model: String,
    pub action_embedding_model: String,
    pub scene_embedding_model: String,
    pub cache_dir: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for HttpOracleConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key: None,
            api_key_env: "OPENAI_API_KEY".into(),
            hypothesis_model: "gpt-4.1".into(),
            discriminator_model: "gpt-4.1-mini".into(),
            nli_model: "gpt-4.1-mini".into(),
            generator_model: "gpt-4.1-mini".into(),
            action_embedding_model: "text-embedding-3-small".into(),
            scene_embedding_model: "text-embedding-3-small".into(),
            cache_dir: None,
            templates_dir: None,
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

impl HttpOracleConfig {
    /// Inline key, else the configured environment variable.
    pub fn resolve_api_key(&self) -> Option<String> {
        self.api_key
            .clone()
            .filter(|k| !k.is_empty())
            .or_else(|| std::env::var(&self.api_key_env).ok().filter(|k| !k.is_empty()))
    }
}

type Slot = Arc<Mutex<Option<String>>>;

/// Memory + optional disk cache. Concurrent callers for one key are
/// serialized on that key's slot so the upstream is hit at most once.
#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    slots: Mutex<HashMap<String, Slot>>,
}

impl ResponseCache {
    pub fn new(dir: Option<PathBuf>) -> std::io::Result<Self> {
        if let Some(dir) = &dir {
            fs::create_dir_all(dir)?;
        }
        Ok(Self {
            dir,
            slots: Mutex::default(),
        })
    }

    pub fn key(operation: &str, model: &str, input: &Value) -> String {
        let doc = json!([operation, model, input]).to_string();
        hex::encode(Sha256::digest(doc.as_bytes()))
    }

    pub fn get_or_try_insert<F>(&self, key: &str, fetch: F) -> Result<String, OracleError>
    where
        F: FnOnce() -> Result<String, OracleError>,
    {
        let slot = self
            .slots
            .lock()
            .unwrap()
            .entry(key.to_string())
            .or_default()
            .clone();
        let mut guard = slot.lock().unwrap();
        if let Some(hit) = guard.as_ref() {
            return Ok(hit.clone());
        }
        if let Some(hit) = self.read_disk(key) {
            *guard = Some(hit.clone());
            return Ok(hit);
        }
        let value = fetch()?;
        self.write_disk(key, &value);
        *guard = Some(value.clone());
        Ok(value)
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn read_disk(&self, key: &str) -> Option<String> {
        let text = fs::read_to_string(self.path(key)?).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn write_disk(&self, key: &str, value: &str) {
        let Some(path) = self.path(key) else { return };
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        let body = serde_json::to_string(value).expect("string serializes");
        if let Err(e) = fs::write(&tmp, body).and_then(|_| fs::rename(&tmp, &path)) {
            warn!(error = %e, "failed to persist cache entry");
        }
    }
}

/// Blocking client for chat-completions and embeddings.
pub struct OpenAiClient {
    http: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    cache: ResponseCache,
    upstream_requests: AtomicU64,
}

impl OpenAiClient {
    pub fn new(config: &HttpOracleConfig) -> Result<Self, OracleError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| OracleError::Config(e.to_string()))?;
        let cache = ResponseCache::new(config.cache_dir.clone()).map_err(|e| OracleError::Config(e.to_string()))?;
        Ok(Self {
            http,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            api_key: config.resolve_api_key(),
            retry: config.retry.clone(),
            cache,
            upstream_requests: AtomicU64::new(0),
        })
    }

    /// Requests actually sent upstream (including retries).
    pub fn upstream_requests(&self) -> u64 {
        self.upstream_requests.load(Ordering::SeqCst)
    }

    fn post(&self, endpoint: &str, body: &Value) -> Result<Value, OracleError> {
        let url = format!("{}/{endpoint}", self.base_url);
        let attempts = self.retry.attempts.max(1);
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.retry.delay(attempt - 1));
            }
            self.upstream_requests.fetch_add(1, Ordering::SeqCst);
            let mut req = self.http.post(&url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json::<Value>().map_err(|e| OracleError::Transport(format!("bad response body: {e}")));
                }
                Ok(resp) => {
                    let status = resp.status();
                    last_error = format!("{url} returned {status}");
                    if !(status.as_u16() == 429 || status.is_server_error()) {
                        break;
                    }
                }
                Err(e) => last_error = format!("{url}: {e}"),
            }
        }
        Err(OracleError::Transport(last_error))
    }

    pub fn chat(&self, model: &str, prompt: &str) -> Result<String, OracleError> {
        let key = ResponseCache::key("chat", model, &json!(prompt));
        self.cache.get_or_try_insert(&key, || {
            let body = json!({
                "model": model,
                "temperature": 0,
                "messages": [{"role": "user", "content": prompt}],
            });
            let resp = self.post("chat/completions", &body)?;
            resp["choices"][0]["message"]["content"]
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| OracleError::Extraction {
                    message: "missing choices[0].message.content".into(),
                    raw: resp.to_string(),
                })
        })
    }

    pub fn embed(&self, model: &str, text: &str) -> Result<Vec<f64>, OracleError> {
        let key = ResponseCache::key("embed", model, &json!(text));
        let raw = self.cache.get_or_try_insert(&key, || {
            let resp = self.post("embeddings", &json!({"model": model, "input": text}))?;
            let vector = &resp["data"][0]["embedding"];
            if !vector.is_array() {
                return Err(OracleError::Extraction {
                    message: "missing data[0].embedding".into(),
                    raw: resp.to_string(),
                });
            }
            Ok(vector.to_string())
        })?;
        serde_json::from_str(&raw).map_err(|e| OracleError::Extraction {
            message: e.to_string(),
            raw,
        })
    }
}

/// Every oracle role over one OpenAI-compatible endpoint.
pub struct HttpOracle {
    pub client: OpenAiClient,
    pub config: HttpOracleConfig,
    pub templates: Templates,
}

impl HttpOracle {
    pub fn new(config: HttpOracleConfig) -> Result<Self, OracleError> {
        let templates = match &config.templates_dir {
            Some(dir) => Templates::with_overrides(dir).map_err(|e| OracleError::Config(e.to_string()))?,
            None => Templates::default(),
        };
        Ok(Self {
            client: OpenAiClient::new(&config)?,
            config,
            templates,
        })
    }

    pub fn suite(config: HttpOracleConfig) -> Result<OracleSuite, OracleError> {
        Ok(OracleSuite::uniform(Arc::new(Self::new(config)?)))
    }
}

impl Discriminator for HttpOracle {
    fn check(&self, scene: &str, question: &str) -> Result<CheckVerdict, OracleError> {
        let prompt = self
            .templates
            .render("discriminate", &[("scene", scene), ("question", question)]);
        let answer = self.client.chat(&self.config.discriminator_model, &prompt)?;
        let (verdict, recognized) = classify_verdict(&answer);
        if !recognized {
            warn!(answer = %answer, "unmappable discriminator answer, using Unknown");
        }
        Ok(verdict)
    }
}

impl NliJudge for HttpOracle {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, OracleError> {
        let prompt = self
            .templates
            .render("nli", &[("premise", premise), ("hypothesis", hypothesis)]);
        let answer = self.client.chat(&self.config.nli_model, &prompt)?;
        let (label, recognized) = classify_nli(&answer);
        if !recognized {
            warn!(answer = %answer, "unmappable NLI answer, using neutral");
        }
        Ok(label)
    }
}

impl Hypothesizer for HttpOracle {
    fn propose(&self, request: &HypothesisRequest<'_>) -> Result<Vec<Hypothesis>, OracleError> {
        let prompt = render_hypothesis_prompt(&self.templates, request);
        let answer = self.client.chat(&self.config.hypothesis_model, &prompt)?;
        let mut hypotheses = parse_hypotheses(&answer)?;
        hypotheses.truncate(request.n);
        for h in &mut hypotheses {
            h.source_cluster = request.cluster_id;
            h.goal_tag = request.goal_instruction.map(str::to_string);
        }
        Ok(hypotheses)
    }
}

impl Embedder for HttpOracle {
    fn embed_action(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        self.client.embed(&self.config.action_embedding_model, text)
    }

    fn embed_scene_text(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        self.client.embed(&self.config.scene_embedding_model, text)
    }
}

impl TextGenerator for HttpOracle {
    fn generate(&self, prompt: &str) -> Result<String, OracleError> {
        self.client.chat(&self.config.generator_model, prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_key_is_stable_and_input_sensitive() {
        let a = ResponseCache::key("chat", "m", &json!("hello"));
        assert_eq!(a, ResponseCache::key("chat", "m", &json!("hello")));
        assert_ne!(a, ResponseCache::key("chat", "m2", &json!("hello")));
        assert_ne!(a, ResponseCache::key("embed", "m", &json!("hello")));
    }

    #[test]
    fn cache_fetches_once_and_persists() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(Some(dir.path().to_path_buf())).unwrap();
        let mut fetched = 0;
        for _ in 0..3 {
            let v = cache
                .get_or_try_insert("k", || {
                    fetched += 1;
                    Ok("v".to_string())
                })
                .unwrap();
            assert_eq!(v, "v");
        }
        assert_eq!(fetched, 1);
        let reopened = ResponseCache::new(Some(dir.path().to_path_buf())).unwrap();
        let v = reopened
            .get_or_try_insert("k", || panic!("should hit disk"))
            .unwrap();
        assert_eq!(v, "v");
    }

    #[test]
    fn failed_fetch_is_not_cached() {
        let cache = ResponseCache::new(None).unwrap();
        assert!(cache
            .get_or_try_insert("k", || Err(OracleError::Transport("down".into())))
            .is_err());
        assert_eq!(cache.get_or_try_insert("k", || Ok("up".into())).unwrap(), "up");
    }

    #[test]
    fn backoff_doubles_without_jitter() {
        let p = RetryPolicy {
            attempts: 3,
            base_delay_ms: 100,
            jitter: false,
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
    }
}
