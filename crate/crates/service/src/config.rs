//! Run configuration. One TOML file covers the CLI and the service; every
//! field is optional and flags override the file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use cdt_core::codex::InductionConfig;
use cdt_core::corpus::{self, Corpus, SceneActionPair, DEFAULT_WINDOW};
use cdt_core::grounding::TopKPolicy;
use cdt_core::induction::Goal;
use cdt_core::oracle::http::{HttpOracle, HttpOracleConfig};
use cdt_core::oracle::planted::{PlantedOracle, PlantedWorld};
use cdt_core::oracle::OracleSuite;
use cdt_core::templates::Templates;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSection,
    pub induction: InductionConfig,
    pub goal: Option<Goal>,
    pub oracle: OracleBackend,
    pub output: OutputSection,
    pub grounding: TopKPolicy,
    pub evaluation: EvaluationSection,
    pub service: ServiceSection,
    pub templates_dir: Option<PathBuf>,
    /// Validation threads during induction; 0 uses every core.
    pub parallelism: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: Option<PathBuf>,
    /// Required for storyline files; pair files carry it.
    pub character: Option<String>,
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum OracleBackend {
    Http(Box<HttpOracleConfig>),
    /// Offline rule-world oracle; `world` is a file written by `gen-synthetic`.
    Planted { world: PathBuf },
}

impl Default for OracleBackend {
    fn default() -> Self {
        Self::Http(Box::default())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub tree: Option<PathBuf>,
    /// Induction events, one JSON object per line.
    pub log: Option<PathBuf>,
    /// Recorded discriminator and NLI calls, input to `export-distill`.
    pub calls: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub train_fraction: f64,
    pub cache: Option<PathBuf>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            cache: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub bind: String,
    pub store: PathBuf,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8700".into(),
            store: PathBuf::from("store"),
        }
    }
}

fn rebase(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut config.corpus.path);
        rebase(base, &mut config.output.tree);
        rebase(base, &mut config.output.log);
        rebase(base, &mut config.output.calls);
        rebase(base, &mut config.evaluation.cache);
        rebase(base, &mut config.templates_dir);
        match &mut config.oracle {
            OracleBackend::Planted { world } => {
                if world.is_relative() {
                    *world = base.join(&*world);
                }
            }
            OracleBackend::Http(http) => {
                rebase(base, &mut http.cache_dir);
                rebase(base, &mut http.templates_dir);
            }
        }
        if config.service.store.is_relative() {
            config.service.store = base.join(&config.service.store);
        }
        Ok(config)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn templates(&self) -> Result<Templates, CliError> {
        let dir = match (&self.templates_dir, &self.oracle) {
            (Some(dir), _) => Some(dir),
            (None, OracleBackend::Http(http)) => http.templates_dir.as_ref(),
            _ => None,
        };
        match dir {
            Some(dir) => Templates::with_overrides(dir)
                .map_err(|e| CliError::config(format!("templates {}: {e}", dir.display()))),
            None => Ok(Templates::default()),
        }
    }

    pub fn oracles(&self) -> Result<OracleSuite, CliError> {
        match &self.oracle {
            OracleBackend::Planted { world } => Ok(PlantedOracle::suite(load_world(world)?)),
            OracleBackend::Http(http) => HttpOracle::new(http.as_ref().clone())
                .map(|o| OracleSuite::uniform(Arc::new(o)))
                .map_err(|e| CliError::operational("oracle", e)),
        }
    }
}

pub fn load_world(path: &Path) -> Result<PlantedWorld, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read world {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("world {}: {e}", path.display())))
}

/// Loads a pair file, or a storyline file turned into pairs for
/// `character`. A pair file's character is taken from its first pair when
/// none is given.
pub fn load_corpus(path: &Path, character: Option<&str>, window: Option<usize>) -> Result<Corpus, CliError> {
    let op = |e: corpus::CorpusError| CliError::operational("corpus", e);
    if corpus::is_pair_file(path).map_err(op)? {
        let pairs = corpus::load_pairs(path).map_err(op)?;
        let character = match character {
            Some(c) => c.to_string(),
            None => pairs
                .first()
                .map(|p| p.character.clone())
                .ok_or_else(|| CliError::operational("corpus", "pair file is empty"))?,
        };
        let pairs: Vec<SceneActionPair> = pairs.into_iter().filter(|p| p.character == character).collect();
        Ok(Corpus::new(character, pairs))
    } else {
        let character =
            character.ok_or_else(|| CliError::config("a storyline corpus needs a character (--character)"))?;
        let records = corpus::load_storyline(path).map_err(op)?;
        let pairs = corpus::build_pairs(&records, character, window.unwrap_or(DEFAULT_WINDOW));
        Ok(Corpus::new(character, pairs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "[corpus]\npath = \"pairs.jsonl\"\n[oracle]\nbackend = \"planted\"\nworld = \"w.json\"\n[induction]\ntheta_acc = 0.8\n",
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.corpus.path.unwrap(), dir.path().join("pairs.jsonl"));
        assert!(matches!(c.oracle, OracleBackend::Planted { ref world } if *world == dir.path().join("w.json")));
        assert_eq!(c.induction.theta_acc, 0.8);
        assert_eq!(c.induction.d_max, 4);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[corpus]\npaht = \"x\"\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn http_backend_takes_inline_fields() {
        let c: RunConfig =
            toml::from_str("[oracle]\nbackend = \"http\"\nbase_url = \"http://localhost:9/v1\"\n").unwrap();
        match c.oracle {
            OracleBackend::Http(h) => {
                assert_eq!(h.base_url, "http://localhost:9/v1");
                assert_eq!(h.nli_model, HttpOracleConfig::default().nli_model);
            }
            other => panic!("{other:?}"),
        }
    }
}
