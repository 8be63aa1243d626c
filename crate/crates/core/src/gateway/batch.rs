use std::collections::{BTreeMap, BTreeSet};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::parse::{parse_generation, ParseError, ParsedScore};
use super::{Gateway, GatewayError};
use crate::digest::Digest;
use crate::model::{Generation, ScoreVector, StudentResponse};
use crate::prompt::{render_prompt, PromptError, PromptSpec};

/// Why one response could not be scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum FailureKind {
    Gateway { error: GatewayError },
    Parse { error: ParseError },
}

impl std::fmt::Display for FailureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FailureKind::Gateway { error } => write!(f, "gateway: {error}"),
            FailureKind::Parse { error } => write!(f, "parse: {error}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringFailure {
    pub response_id: String,
    pub kind: FailureKind,
    /// Present when the model answered but the answer did not parse.
    pub raw: Option<Generation>,
}

/// Scores for a set of responses under one prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringRun {
    pub question_id: String,
    pub spec_digest: Digest,
    pub prompt_digest: Digest,
    pub model_id: String,
    pub scores: BTreeMap<String, ParsedScore>,
    pub failures: BTreeMap<String, ScoringFailure>,
}

impl ScoringRun {
    /// Digest over everything except wall-clock latency, so identical inputs
    /// through a deterministic backend give identical digests.
    pub fn digest(&self) -> Digest {
        let mut canonical = self.clone();
        for s in canonical.scores.values_mut() {
            s.raw.latency_ms = 0;
        }
        for f in canonical.failures.values_mut() {
            if let Some(raw) = f.raw.as_mut() {
                raw.latency_ms = 0;
            }
        }
        Digest::of_json(&canonical)
    }

    pub fn score_vectors(&self) -> Vec<ScoreVector> {
        self.scores.values().map(|s| s.scores.clone()).collect()
    }

    pub fn response_ids(&self) -> BTreeSet<&str> {
        self.scores
            .keys()
            .chain(self.failures.keys())
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BatchError {
    #[error("nothing to score")]
    Empty,
    #[error("response {response_id} belongs to question {question_id}, not {expected}")]
    QuestionMismatch {
        response_id: String,
        question_id: String,
        expected: String,
    },
    #[error("response {0} appears twice in the batch")]
    DuplicateResponse(String),
    #[error("the prior run was scored with a different prompt")]
    PriorMismatch,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("authentication failed, batch aborted: {0}")]
    Auth(String),
}

/// Scores every response with one prompt each.
///
/// Up to the gateway's `max_inflight` completions run concurrently. Failures
/// are isolated per response; only an authentication failure aborts the
/// batch. With a `prior` run, responses it already scored are skipped and its
/// failures are retried.
pub async fn score_batch(
    gateway: &Gateway,
    spec: &PromptSpec,
    responses: &[StudentResponse],
    prior: Option<ScoringRun>,
) -> Result<ScoringRun, BatchError> {
    if responses.is_empty() {
        return Err(BatchError::Empty);
    }
    let expected = &spec.rubric.question_id;
    let mut seen = BTreeSet::new();
    for r in responses {
        if &r.question_id != expected {
            return Err(BatchError::QuestionMismatch {
                response_id: r.id.clone(),
                question_id: r.question_id.clone(),
                expected: expected.clone(),
            });
        }
        if !seen.insert(r.id.as_str()) {
            return Err(BatchError::DuplicateResponse(r.id.clone()));
        }
    }

    let base = render_prompt(spec)?;
    let spec_digest = spec.digest();
    let prompt_digest = base.digest();
    let mut run = match prior {
        Some(prior) => {
            if prior.prompt_digest != prompt_digest || prior.spec_digest != spec_digest {
                return Err(BatchError::PriorMismatch);
            }
            prior
        }
        None => ScoringRun {
            question_id: expected.clone(),
            spec_digest,
            prompt_digest,
            model_id: gateway.config().model_id.clone(),
            scores: BTreeMap::new(),
            failures: BTreeMap::new(),
        },
    };

    // Owned items keep the stream future `Send` for multi-threaded callers.
    let todo: Vec<StudentResponse> = responses
        .iter()
        .filter(|r| !run.scores.contains_key(&r.id))
        .cloned()
        .collect();
    let rubric = &spec.rubric;
    let mut results = stream::iter(todo)
        .map(|r| {
            let prompt = base.fill(&r);
            async move { (r, gateway.complete(&prompt).await) }
        })
        .buffer_unordered(gateway.config().max_inflight);

    while let Some((response, outcome)) = results.next().await {
        let id = response.id.clone();
        run.failures.remove(&id);
        match outcome {
            Ok(generation) => match parse_generation(&generation.raw_text, rubric) {
                Ok(parsed) => {
                    run.scores.insert(id.clone(), parsed.into_score(id, generation));
                }
                Err(error) => {
                    run.failures.insert(
                        id.clone(),
                        ScoringFailure {
                            response_id: id,
                            kind: FailureKind::Parse { error },
                            raw: Some(generation),
                        },
                    );
                }
            },
            Err(GatewayError::AuthFailure { message }) => return Err(BatchError::Auth(message)),
            Err(error) => {
                tracing::warn!(response = %id, %error, "scoring failed");
                run.failures.insert(
                    id.clone(),
                    ScoringFailure {
                        response_id: id,
                        kind: FailureKind::Gateway { error },
                        raw: None,
                    },
                );
            }
        }
    }
    Ok(run)
}
