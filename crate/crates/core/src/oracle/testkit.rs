//! Scripted and recording oracle doubles.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::{
    render_hypothesis_prompt, CheckVerdict, Discriminator, HypothesisRequest, Hypothesizer, NliJudge,
    NliLabel, OracleError, TextGenerator,
};
use crate::codex::Hypothesis;
use crate::templates::Templates;

/// Replays scripted responses in order, then repeats the last one.
#[derive(Debug, Default)]
pub struct ScriptedGenerator {
    responses: Vec<String>,
    next: AtomicUsize,
    pub prompts: Mutex<Vec<String>>,
}

impl ScriptedGenerator {
    pub fn new(responses: Vec<String>) -> Self {
        Self {
            responses,
            ..Default::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.prompts.lock().unwrap().len()
    }
}

impl TextGenerator for ScriptedGenerator {
    fn generate(&self, prompt: &str) -> Result<String, OracleError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        let i = self.next.fetch_add(1, Ordering::SeqCst);
        self.responses
            .get(i)
            .or(self.responses.last())
            .cloned()
            .ok_or_else(|| OracleError::Transport("script exhausted".into()))
    }
}

/// Answers generation with a function of the prompt and counts calls.
pub struct FnGenerator<F> {
    f: F,
    pub calls: AtomicUsize,
}

impl<F: Fn(&str) -> Result<String, OracleError> + Send + Sync> FnGenerator<F> {
    pub fn new(f: F) -> Self {
        Self {
            f,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<F: Fn(&str) -> Result<String, OracleError> + Send + Sync> TextGenerator for FnGenerator<F> {
    fn generate(&self, prompt: &str) -> Result<String, OracleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.f)(prompt)
    }
}

/// Answers each question from a fixed table; unlisted questions get `default`.
#[derive(Debug)]
pub struct ScriptedDiscriminator {
    pub answers: BTreeMap<String, CheckVerdict>,
    pub default: CheckVerdict,
    pub calls: AtomicUsize,
}

impl ScriptedDiscriminator {
    pub fn new(answers: impl IntoIterator<Item = (String, CheckVerdict)>, default: CheckVerdict) -> Self {
        Self {
            answers: answers.into_iter().collect(),
            default,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn always(verdict: CheckVerdict) -> Self {
        Self::new([], verdict)
    }
}

impl Discriminator for ScriptedDiscriminator {
    fn check(&self, _scene: &str, question: &str) -> Result<CheckVerdict, OracleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.answers.get(question).copied().unwrap_or(self.default))
    }
}

/// Answers `true` when the scene contains the question text verbatim.
#[derive(Debug, Default)]
pub struct SubstringDiscriminator;

impl Discriminator for SubstringDiscriminator {
    fn check(&self, scene: &str, question: &str) -> Result<CheckVerdict, OracleError> {
        let needle = question.trim_end_matches('?').trim();
        Ok(if scene.contains(needle) {
            CheckVerdict::True
        } else {
            CheckVerdict::False
        })
    }
}

/// Returns labels keyed by premise; anything else is neutral.
#[derive(Debug, Default)]
pub struct ScriptedNli {
    pub by_premise: BTreeMap<String, NliLabel>,
}

impl NliJudge for ScriptedNli {
    fn judge(&self, premise: &str, _hypothesis: &str) -> Result<NliLabel, OracleError> {
        Ok(self.by_premise.get(premise).copied().unwrap_or(NliLabel::Neutral))
    }
}

/// Delegates to another hypothesizer and keeps the prompt each request
/// would render to.
pub struct RecordingHypothesizer {
    pub inner: Arc<dyn Hypothesizer>,
    pub templates: Templates,
    pub prompts: Mutex<Vec<String>>,
}

impl RecordingHypothesizer {
    pub fn new(inner: Arc<dyn Hypothesizer>) -> Self {
        Self {
            inner,
            templates: Templates::default(),
            prompts: Mutex::new(Vec::new()),
        }
    }
}

impl Hypothesizer for RecordingHypothesizer {
    fn propose(&self, request: &HypothesisRequest<'_>) -> Result<Vec<Hypothesis>, OracleError> {
        self.prompts
            .lock()
            .unwrap()
            .push(render_hypothesis_prompt(&self.templates, request));
        self.inner.propose(request)
    }
}

/// Fails every call with a transport error.
#[derive(Debug, Default)]
pub struct Unreachable;

impl Discriminator for Unreachable {
    fn check(&self, _: &str, _: &str) -> Result<CheckVerdict, OracleError> {
        Err(OracleError::Transport("unreachable".into()))
    }
}

impl NliJudge for Unreachable {
    fn judge(&self, _: &str, _: &str) -> Result<NliLabel, OracleError> {
        Err(OracleError::Transport("unreachable".into()))
    }
}

impl TextGenerator for Unreachable {
    fn generate(&self, _: &str) -> Result<String, OracleError> {
        Err(OracleError::Transport("unreachable".into()))
    }
}
