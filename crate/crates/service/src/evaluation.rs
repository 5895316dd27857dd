//! Builds strategies by name and scores them on a test split. Shared by the
//! `evaluate` subcommand and `POST /evaluate`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use cdt_core::codex::CodifiedDecisionTree;
use cdt_core::corpus::{chronological_split, Corpus};
use cdt_core::evalharness::{
    eta_profile, evaluate_strategy, CdtStrategy, EvalError, EvalResult, PredictionCache, ProfileStrategy, RiclIndex,
    RiclStrategy, Strategy, VanillaStrategy, ETA_BLOCK, RICL_TOP_M,
};
use cdt_core::grounding::TopKPolicy;
use cdt_core::oracle::OracleSuite;
use cdt_core::templates::Templates;
use cdt_core::verbalize::verbalize;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Vanilla,
    /// A supplied profile text.
    Profile,
    Ricl,
    /// A profile extracted block-wise from the training split.
    Eta,
    /// Per-scene traversal of the tree.
    Cdt,
    /// The whole tree verbalized as a fixed profile.
    CdtText,
}

impl FromStr for StrategyName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(json!(s.replace('-', "_")))
            .map_err(|_| format!("unknown strategy {s:?} (vanilla, profile, ricl, eta, cdt, cdt_text)"))
    }
}

impl fmt::Display for StrategyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("name serializes");
        f.write_str(v.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("{0}")]
    Argument(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub struct EvalPlan<'a> {
    pub corpus: &'a Corpus,
    /// Chronological train share; `None` scores every pair and leaves no
    /// training split.
    pub train_fraction: Option<f64>,
    pub strategies: Vec<StrategyName>,
    pub tree: Option<CodifiedDecisionTree>,
    pub relation_trees: BTreeMap<String, CodifiedDecisionTree>,
    pub profile: Option<String>,
    pub policy: TopKPolicy,
}

pub fn run_evaluation(
    plan: EvalPlan<'_>,
    oracles: &OracleSuite,
    templates: &Templates,
    cache: &PredictionCache,
) -> Result<Vec<EvalResult>, PlanError> {
    let character = plan.corpus.character.clone();
    let (train, test) = match plan.train_fraction {
        Some(f) => chronological_split(&plan.corpus.pairs, &character, f)
            .map(|(a, b)| (Some(a), b))
            .map_err(|e| PlanError::Argument(e.to_string()))?,
        None => (None, plan.corpus.clone()),
    };
    let need_train = |name: StrategyName| {
        train
            .as_ref()
            .filter(|t| !t.is_empty())
            .ok_or_else(|| PlanError::Argument(format!("strategy {name} needs a non-empty training split")))
    };
    let need_tree = |name: StrategyName| {
        plan.tree
            .clone()
            .ok_or_else(|| PlanError::Argument(format!("strategy {name} needs a tree")))
    };
    let mut results = Vec::new();
    for &name in &plan.strategies {
        let generator = oracles.rp_generator.clone();
        let strategy: Box<dyn Strategy> = match name {
            StrategyName::Vanilla => Box::new(VanillaStrategy {
                character: character.clone(),
                generator,
                templates: templates.clone(),
            }),
            StrategyName::Profile => Box::new(ProfileStrategy {
                tag: name.to_string(),
                character: character.clone(),
                profile: plan
                    .profile
                    .clone()
                    .ok_or_else(|| PlanError::Argument("strategy profile needs profile text".into()))?,
                generator,
                templates: templates.clone(),
            }),
            StrategyName::Ricl => Box::new(RiclStrategy {
                character: character.clone(),
                index: RiclIndex::build(&need_train(name)?.pairs, oracles.embedder.as_ref()).map_err(EvalError::from)?,
                embedder: oracles.embedder.clone(),
                generator,
                templates: templates.clone(),
                m: RICL_TOP_M,
            }),
            StrategyName::Eta => Box::new(ProfileStrategy {
                tag: name.to_string(),
                character: character.clone(),
                profile: eta_profile(need_train(name)?, oracles.rp_generator.as_ref(), templates, ETA_BLOCK)?,
                generator,
                templates: templates.clone(),
            }),
            StrategyName::Cdt => Box::new(CdtStrategy {
                tag: name.to_string(),
                general: need_tree(name)?,
                relation_trees: plan.relation_trees.clone(),
                policy: plan.policy,
                oracles: oracles.clone(),
                templates: templates.clone(),
            }),
            StrategyName::CdtText => Box::new(ProfileStrategy {
                tag: name.to_string(),
                character: character.clone(),
                profile: verbalize(&need_tree(name)?),
                generator: Arc::clone(&oracles.rp_generator),
                templates: templates.clone(),
            }),
        };
        let config = json!({
            "train_fraction": plan.train_fraction,
            "test_pairs": test.len(),
            "policy": plan.policy,
        });
        results.push(evaluate_strategy(strategy.as_ref(), &test, oracles.nli.as_ref(), cache, config)?);
    }
    cache.save()?;
    Ok(results)
}
