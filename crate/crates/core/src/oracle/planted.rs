//! A deterministic synthetic world with planted if–then rules.
//!
//! Scenes and actions are bags of tokens. A rule fires when all of its
//! trigger tokens appear in the scene; the character then shows the rule's
//! behavior token, or its contradiction token when the rule misses. Questions
//! are encoded as `contains: t1,t2` and statements as `does: b`, so every
//! oracle answer can be audited by reading the log.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    CheckVerdict, Discriminator, Embedder, HypothesisRequest, Hypothesizer, NliJudge, NliLabel,
    OracleError, OracleSuite, TextGenerator,
};
use crate::codex::Hypothesis;
use crate::corpus::{ActionRecord, SceneActionPair, ENVIRONMENT};

const QUESTION_PREFIX: &str = "contains:";
const STATEMENT_PREFIX: &str = "does:";

/// Lowercased alphanumeric tokens.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub(crate) fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325_u64 ^ seed;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub trigger_tokens: Vec<String>,
    pub behavior_token: String,
    pub contradiction_token: String,
}

impl PlantedRule {
    pub fn question(&self) -> String {
        format!("{QUESTION_PREFIX} {}", self.trigger_tokens.join(","))
    }

    pub fn statement(&self) -> String {
        format!("{STATEMENT_PREFIX} {}", self.behavior_token)
    }

    pub fn hypothesis(&self) -> Hypothesis {
        Hypothesis::new(self.question(), self.statement())
    }

    pub fn fires_on(&self, scene_tokens: &BTreeSet<String>) -> bool {
        self.trigger_tokens.iter().all(|t| scene_tokens.contains(t))
    }
}

/// Parses `contains: t1,t2` into its token list.
pub fn parse_question(question: &str) -> Option<Vec<String>> {
    let rest = question.trim().strip_prefix(QUESTION_PREFIX)?;
    let toks: Vec<String> = rest
        .split(',')
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty())
        .collect();
    (!toks.is_empty()).then_some(toks)
}

/// Parses `does: b` into the behavior token.
pub fn parse_statement(statement: &str) -> Option<String> {
    let b = statement.trim().strip_prefix(STATEMENT_PREFIX)?.trim().to_lowercase();
    (!b.is_empty()).then_some(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedWorld {
    pub rules: Vec<PlantedRule>,
    pub decoys: Vec<PlantedRule>,
    pub noise_rate: f64,
    pub seed: u64,
}

impl PlantedWorld {
    pub fn all_rules(&self) -> impl Iterator<Item = &PlantedRule> {
        self.rules.iter().chain(&self.decoys)
    }

    fn rule_for_behavior(&self, token: &str) -> Option<&PlantedRule> {
        self.all_rules().find(|r| r.behavior_token == token)
    }

    pub fn planted_check(&self, scene: &str, question: &str) -> CheckVerdict {
        let Some(trigger) = parse_question(question) else {
            return CheckVerdict::Unknown;
        };
        if self.noise_rate > 0.0 {
            let mut key = scene.as_bytes().to_vec();
            key.push(0);
            key.extend_from_slice(question.as_bytes());
            let u = (fnv1a(self.seed, &key) >> 11) as f64 / (1u64 << 53) as f64;
            if u < self.noise_rate {
                return CheckVerdict::Unknown;
            }
        }
        let scene_tokens = tokens(scene);
        if trigger.iter().all(|t| scene_tokens.contains(t)) {
            CheckVerdict::True
        } else {
            CheckVerdict::False
        }
    }

    /// `does: b` hypotheses are judged by token containment. Free-text
    /// hypotheses (action-vs-action scoring) are entailed when identical or
    /// when every planted token they carry is in the premise, and
    /// contradicted when the premise carries the opposite token of a rule.
    pub fn planted_nli(&self, premise: &str, hypothesis: &str) -> NliLabel {
        let premise_tokens = tokens(premise);
        if let Some(b) = parse_statement(hypothesis) {
            if premise_tokens.contains(&b) {
                return NliLabel::Entailed;
            }
            return match self.rule_for_behavior(&b) {
                Some(rule) if premise_tokens.contains(&rule.contradiction_token) => NliLabel::Contradicted,
                _ => NliLabel::Neutral,
            };
        }
        if premise.trim() == hypothesis.trim() {
            return NliLabel::Entailed;
        }
        let hyp_tokens = tokens(hypothesis);
        let mut carried = Vec::new();
        for rule in self.all_rules() {
            for (tok, opposite) in [
                (&rule.behavior_token, &rule.contradiction_token),
                (&rule.contradiction_token, &rule.behavior_token),
            ] {
                if hyp_tokens.contains(tok) {
                    if premise_tokens.contains(opposite) {
                        return NliLabel::Contradicted;
                    }
                    carried.push(tok);
                }
            }
        }
        if !carried.is_empty() && carried.iter().all(|t| premise_tokens.contains(*t)) {
            NliLabel::Entailed
        } else {
            NliLabel::Neutral
        }
    }

    /// Rules (true first, then decoys) firing somewhere in the cluster,
    /// ordered by in-cluster support, skipping anything already on the
    /// diversification context.
    pub fn planted_hypothesize(&self, req: &HypothesisRequest<'_>) -> Vec<Hypothesis> {
        let scene_tokens: Vec<BTreeSet<String>> = req.cluster.iter().map(|p| tokens(&p.scene_text())).collect();
        let mut ranked: Vec<(usize, &PlantedRule)> = self
            .all_rules()
            .map(|r| (scene_tokens.iter().filter(|s| r.fires_on(s)).count(), r))
            .filter(|(support, r)| {
                *support > 0
                    && !req.question_path.contains(&r.question())
                    && !req.established.contains(&r.statement())
            })
            .collect();
        ranked.sort_by_key(|r| std::cmp::Reverse(r.0));
        ranked
            .into_iter()
            .take(req.n)
            .map(|(_, r)| Hypothesis {
                source_cluster: req.cluster_id,
                goal_tag: req.goal_instruction.map(str::to_string),
                ..r.hypothesis()
            })
            .collect()
    }
}

/// Parameters of a generated world and its corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub character: String,
    pub n_pairs: usize,
    pub n_rules: usize,
    pub n_decoys: usize,
    /// Entailment rate of true rules within their trigger subset.
    pub rule_rate: (f64, f64),
    pub decoy_rate: (f64, f64),
    /// Fraction of pairs whose scene fires a given rule.
    pub trigger_share: (f64, f64),
    /// Fraction of non-triggered pairs showing a true rule's contradiction.
    pub off_trigger_contradiction: f64,
    pub trigger_width: (usize, usize),
    pub window: usize,
    pub filler_vocab: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            character: "Mira".into(),
            n_pairs: 200,
            n_rules: 5,
            n_decoys: 5,
            rule_rate: (0.8, 1.0),
            decoy_rate: (0.0, 0.3),
            trigger_share: (0.12, 0.2),
            off_trigger_contradiction: 0.25,
            trigger_width: (1, 1),
            window: 10,
            filler_vocab: 300,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

/// A generated world, its corpus, and the realized per-rule rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedCorpus {
    pub world: PlantedWorld,
    pub pairs: Vec<SceneActionPair>,
    pub rule_rates: Vec<f64>,
    pub decoy_rates: Vec<f64>,
}

const CAST: &[&str] = &["Tomo", "Rin", "Sora"];

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl PlantedCorpus {
    pub fn generate(spec: &WorldSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let n = spec.n_pairs;
        let make_rule = |rng: &mut ChaCha8Rng, cue: &str, act: &str, shun: &str, i: usize| {
            let width = rng.random_range(spec.trigger_width.0.max(1)..=spec.trigger_width.1.max(spec.trigger_width.0).max(1));
            let trigger_tokens = if width == 1 {
                vec![format!("{cue}{i}")]
            } else {
                (0..width).map(|j| format!("{cue}{i}x{j}")).collect()
            };
            PlantedRule {
                trigger_tokens,
                behavior_token: format!("{act}{i}"),
                contradiction_token: format!("{shun}{i}"),
            }
        };
        let rules: Vec<_> = (0..spec.n_rules).map(|i| make_rule(&mut rng, "cue", "act", "shun", i)).collect();
        let decoys: Vec<_> = (0..spec.n_decoys).map(|i| make_rule(&mut rng, "lure", "fake", "deny", i)).collect();

        let mut scenes: Vec<Vec<ActionRecord>> = (0..n)
            .map(|p| {
                (0..spec.window.max(1))
                    .map(|j| {
                        let actor = if rng.random_bool(0.2) {
                            ENVIRONMENT.to_string()
                        } else if rng.random_bool(0.25) {
                            spec.character.clone()
                        } else {
                            CAST[rng.random_range(0..CAST.len())].to_string()
                        };
                        let words: Vec<String> = (0..3)
                            .map(|_| format!("w{}", rng.random_range(0..spec.filler_vocab.max(1))))
                            .collect();
                        ActionRecord::new(actor, words.join(" "), (p * (spec.window + 1) + j) as u64)
                    })
                    .collect()
            })
            .collect();
        let mut actions: Vec<Vec<String>> = (0..n)
            .map(|_| {
                (0..2)
                    .map(|_| format!("w{}", rng.random_range(0..spec.filler_vocab.max(1))))
                    .collect()
            })
            .collect();

        let mut plant = |rng: &mut ChaCha8Rng, rule: &PlantedRule, rate_range, off_rate: f64| -> f64 {
            let share = draw(rng, spec.trigger_share);
            let m = ((share * n as f64).round() as usize).clamp(usize::from(n > 0), n);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let (triggered, rest) = order.split_at(m);
            for &p in triggered {
                for tok in &rule.trigger_tokens {
                    let slot = rng.random_range(0..scenes[p].len());
                    scenes[p][slot].text.push(' ');
                    scenes[p][slot].text.push_str(tok);
                }
            }
            let rate = draw(rng, rate_range);
            let entailed = (rate * m as f64).round() as usize;
            for (k, &p) in triggered.iter().enumerate() {
                let tok = if k < entailed { &rule.behavior_token } else { &rule.contradiction_token };
                actions[p].push(tok.clone());
            }
            let off = (off_rate * rest.len() as f64).round() as usize;
            for &p in &rest[..off] {
                actions[p].push(rule.contradiction_token.clone());
            }
            if m == 0 {
                0.0
            } else {
                entailed as f64 / m as f64
            }
        };
        let rule_rates: Vec<f64> = rules
            .iter()
            .map(|r| plant(&mut rng, r, spec.rule_rate, spec.off_trigger_contradiction))
            .collect();
        let decoy_rates: Vec<f64> = decoys.iter().map(|r| plant(&mut rng, r, spec.decoy_rate, 0.0)).collect();

        let pairs = scenes
            .into_iter()
            .zip(actions)
            .enumerate()
            .map(|(p, (scene, action_tokens))| SceneActionPair {
                character: spec.character.clone(),
                scene,
                action: ActionRecord::new(
                    spec.character.clone(),
                    action_tokens.join(" "),
                    (p * (spec.window + 1) + spec.window) as u64,
                ),
            })
            .collect();
        PlantedCorpus {
            world: PlantedWorld {
                rules,
                decoys,
                noise_rate: spec.noise_rate,
                seed: spec.seed,
            },
            pairs,
            rule_rates,
            decoy_rates,
        }
    }
}

/// Seeded token-hash histogram embedder: texts sharing tokens are closer.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64, seed: 0 }
    }
}

impl HashEmbedder {
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for tok in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let h = fnv1a(self.seed, tok.to_lowercase().as_bytes());
            v[(h % self.dim as u64) as usize] += 1.0;
        }
        v
    }
}

impl Embedder for HashEmbedder {
    fn embed_action(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        Ok(self.embed(text))
    }

    fn embed_scene_text(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        Ok(self.embed(text))
    }
}

/// The planted world behind every oracle role. Generation echoes the
/// behavior tokens of grounded `does:` statements found in the prompt.
#[derive(Debug, Clone)]
pub struct PlantedOracle {
    pub world: PlantedWorld,
    pub embedder: HashEmbedder,
}

impl PlantedOracle {
    pub fn new(world: PlantedWorld) -> Self {
        let embedder = HashEmbedder {
            dim: 64,
            seed: world.seed,
        };
        Self { world, embedder }
    }

    pub fn suite(world: PlantedWorld) -> OracleSuite {
        OracleSuite::uniform(std::sync::Arc::new(Self::new(world)))
    }
}

impl Discriminator for PlantedOracle {
    fn check(&self, scene: &str, question: &str) -> Result<CheckVerdict, OracleError> {
        Ok(self.world.planted_check(scene, question))
    }
}

impl NliJudge for PlantedOracle {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, OracleError> {
        Ok(self.world.planted_nli(premise, hypothesis))
    }
}

impl Hypothesizer for PlantedOracle {
    fn propose(&self, request: &HypothesisRequest<'_>) -> Result<Vec<Hypothesis>, OracleError> {
        Ok(self.world.planted_hypothesize(request))
    }
}

impl Embedder for PlantedOracle {
    fn embed_action(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        self.embedder.embed_action(text)
    }

    fn embed_scene_text(&self, text: &str) -> Result<Vec<f64>, OracleError> {
        self.embedder.embed_scene_text(text)
    }
}

impl TextGenerator for PlantedOracle {
    fn generate(&self, prompt: &str) -> Result<String, OracleError> {
        Ok(outline_all_rules(prompt).unwrap_or_else(|| echo_grounded_behaviors(prompt)))
    }
}

/// Answers a profile outline request with one chapter listing every
/// numbered rule in the prompt.
fn outline_all_rules(prompt: &str) -> Option<String> {
    if !(prompt.contains("JSON array") && prompt.contains("\"title\"")) {
        return None;
    }
    let numbers: Vec<usize> = prompt
        .lines()
        .filter_map(|l| l.split_once(". ")?.0.trim().parse().ok())
        .collect();
    Some(serde_json::json!([{"title": "Behaviors", "rules": numbers, "keywords": []}]).to_string())
}

/// Emits every `does: b` behavior found in the prompt, or a neutral filler.
pub fn echo_grounded_behaviors(prompt: &str) -> String {
    let behaviors: Vec<String> = prompt
        .lines()
        .filter_map(|line| {
            let idx = line.find(STATEMENT_PREFIX)?;
            parse_statement(&line[idx..])
        })
        .collect();
    if behaviors.is_empty() {
        "waits quietly".to_string()
    } else {
        behaviors.join(" ")
    }
}
