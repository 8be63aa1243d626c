//! Deterministic in-process backend.
//!
//! Replies are looked up by the digest of the exact prompt text; prompts with
//! no scripted reply go to an optional fallback function. Injected failures
//! for a digest are consumed before its scripted reply is returned.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendReply, CompletionRequest};
use crate::digest::Digest;
use crate::model::{CotExemplar, Rubric, ScoreVector, StudentResponse};
use crate::prompt::{
    render_prompt, render_score_block, PromptError, PromptSpec, PromptText, TARGET_HEADER,
};

pub type Fallback = Arc<dyn Fn(&PromptText) -> Result<String, BackendError> + Send + Sync>;

#[derive(Default)]
pub struct MockBackend {
    table: HashMap<Digest, String>,
    failures: Mutex<HashMap<Digest, VecDeque<BackendError>>>,
    fallback: Option<Fallback>,
    calls: AtomicUsize,
}

/// A group of responses the simulated model gets wrong on one subscore
/// until any member of the group appears as a prompt exemplar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub subscore: String,
    pub members: Vec<String>,
}

/// One line of a mock script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub prompt_digest: Digest,
    pub text: String,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_reply(mut self, digest: Digest, text: impl Into<String>) -> Self {
        self.table.insert(digest, text.into());
        self
    }

    pub fn with_script(mut self, entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        for e in entries {
            self.table.insert(e.prompt_digest, e.text);
        }
        self
    }

    pub fn with_fallback(
        mut self,
        f: impl Fn(&PromptText) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        self.fallback = Some(Arc::new(f));
        self
    }

    /// Queues errors to return, in order, before the prompt succeeds.
    pub fn fail_first(self, digest: Digest, errors: Vec<BackendError>) -> Self {
        self.failures
            .lock()
            .expect("mock lock poisoned")
            .entry(digest)
            .or_default()
            .extend(errors);
        self
    }

    /// Number of completion calls received, failed ones included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// A backend that answers every response's prompt with its gold score
    /// block, so scoring through it reproduces the gold labels exactly.
    pub fn echo_gold(
        spec: &PromptSpec,
        responses: &[StudentResponse],
        gold: &[ScoreVector],
    ) -> Result<Self, PromptError> {
        let base = render_prompt(spec)?;
        let gold_by_id: BTreeMap<&str, &ScoreVector> =
            gold.iter().map(|g| (g.response_id.as_str(), g)).collect();
        let mut mock = Self::new();
        for r in responses {
            if let Some(g) = gold_by_id.get(r.id.as_str()) {
                let text = render_score_block(g, &spec.rubric);
                mock.table.insert(base.fill(r).digest(), text);
            }
        }
        Ok(mock)
    }

    /// Simulates a model whose errors are repaired by exemplars: a response
    /// in a cohort has that cohort's subscore flipped unless some member of
    /// the cohort is among the prompt's exemplars. Everything else is
    /// answered with gold.
    pub fn repaired_after_exemplar(
        rubric: &Rubric,
        items: &[(StudentResponse, ScoreVector)],
        cohorts: Vec<Cohort>,
    ) -> Self {
        let rubric = rubric.clone();
        let by_text: HashMap<String, (String, ScoreVector)> = items
            .iter()
            .map(|(r, g)| (r.text.clone(), (r.id.clone(), g.clone())))
            .collect();
        let text_of: HashMap<String, String> =
            items.iter().map(|(r, _)| (r.id.clone(), r.text.clone())).collect();
        Self::new().with_fallback(move |prompt| {
            let target = prompt
                .target_response()
                .ok_or_else(|| BackendError::Refusal("prompt has no target response".into()))?;
            let (id, gold) = by_text
                .get(target)
                .ok_or_else(|| BackendError::Refusal(format!("unknown response {target:?}")))?;
            let head = prompt.as_str().split(TARGET_HEADER).next().unwrap_or("");
            let shown = |member: &String| {
                text_of.get(member).is_some_and(|t| {
                    head.contains(&format!("Student response:\n{t}\n\nScoring:"))
                })
            };
            let mut scores = gold.by_subscore.clone();
            for c in cohorts.iter().filter(|c| c.members.contains(id)) {
                if !c.members.iter().any(shown) {
                    if let Some(v) = scores.get_mut(&c.subscore) {
                        *v = 1 - *v;
                    }
                }
            }
            Ok(render_score_block(&ScoreVector::from_scores(id.clone(), scores), &rubric))
        })
    }

    /// Convenience for exemplar-shaped gold data.
    pub fn echo_exemplars(spec: &PromptSpec, items: &[CotExemplar]) -> Result<Self, PromptError> {
        let responses: Vec<StudentResponse> = items.iter().map(|e| e.response.clone()).collect();
        let gold: Vec<ScoreVector> = items.iter().map(|e| e.gold.clone()).collect();
        Self::echo_gold(spec, &responses, &gold)
    }
}

#[async_trait]
impl Backend for MockBackend {
    async fn complete(&self, request: &CompletionRequest) -> Result<BackendReply, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let digest = request.prompt.digest();
        if let Some(err) = self
            .failures
            .lock()
            .expect("mock lock poisoned")
            .get_mut(&digest)
            .and_then(VecDeque::pop_front)
        {
            return Err(err);
        }
        if let Some(text) = self.table.get(&digest) {
            return Ok(BackendReply::text(text.clone()));
        }
        match &self.fallback {
            Some(f) => f(&request.prompt).map(BackendReply::text),
            None => Err(BackendError::Refusal(format!(
                "mock has no scripted reply for prompt {}",
                digest.short()
            ))),
        }
    }
}
