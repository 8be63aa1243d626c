//! Active-learning loop operations over the persisted loop state.

use std::collections::{BTreeMap, BTreeSet};

use rubric_loop_core::active::{
    self, ALError, ALIteration, ALState, Candidate, ErrorTag, PoolItem, Selection, StopDecision, StopStatus,
};
use rubric_loop_core::digest::Digest;
use rubric_loop_core::gateway::ScoringRun;
use rubric_loop_core::metrics::EvaluationReport;
use rubric_loop_core::model::CotExemplar;
use rubric_loop_core::prompt::PromptMode;
use rubric_loop_core::storage::{AlLog, Experiment, RecordKind};
use serde::{Deserialize, Serialize};

use super::pipeline::resolve_prompt;
use super::{gateway_for, invalid, latest_split, lock, BackendChoice, Result};

pub fn load_state(exp: &Experiment) -> Result<(Digest, ALState)> {
    exp.load_latest(RecordKind::AlState)?
        .ok_or_else(|| invalid("no active-learning state; run `al init` first"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationSummary {
    pub index: u32,
    pub prompt_spec_digest: Digest,
    pub run_digest: Digest,
    pub error_count: usize,
    pub errors_by_subscore: BTreeMap<String, usize>,
    pub unscored: Vec<String>,
    pub tags: usize,
    pub candidates: usize,
    pub added: Vec<String>,
    pub report: Option<EvaluationReport>,
    pub decision: StopDecision,
}

impl From<&ALIteration> for IterationSummary {
    fn from(it: &ALIteration) -> Self {
        Self {
            index: it.index,
            prompt_spec_digest: it.prompt_spec_digest.clone(),
            run_digest: it.run_digest.clone(),
            error_count: it.error_count,
            errors_by_subscore: it.errors_by_subscore(),
            unscored: it.unscored.clone(),
            tags: it.tags.len(),
            candidates: it.candidates().len(),
            added: it.added_exemplars.iter().map(|e| e.id().to_string()).collect(),
            report: it.reports.clone(),
            decision: it.decision.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlStatus {
    pub state: Digest,
    pub spec_digest: Digest,
    pub exemplars: usize,
    pub pool: usize,
    pub validation_ratio: Option<f64>,
    pub iterations: Vec<IterationSummary>,
    pub decision: StopDecision,
}

fn status_of(digest: Digest, state: &ALState) -> AlStatus {
    AlStatus {
        state: digest,
        spec_digest: state.spec.digest(),
        exemplars: state.spec.exemplars.len(),
        pool: state.pool.len(),
        validation_ratio: state.validation_ratio(),
        iterations: state.iterations.iter().map(IterationSummary::from).collect(),
        decision: state.decision(),
    }
}

pub fn status(exp: &Experiment) -> Result<AlStatus> {
    let (digest, state) = load_state(exp)?;
    Ok(status_of(digest, &state))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InitRequest {
    /// Implementation label or digest prefix; defaults to `few_shot_cot`.
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub max_iterations: Option<u32>,
    #[serde(default)]
    pub max_additions: Option<usize>,
}

/// Starts the loop from a chain-of-thought prompt. The validation pool is the
/// train partition minus the prompt's exemplars.
pub fn init(exp: &Experiment, req: InitRequest, expected: Option<&Digest>) -> Result<AlStatus> {
    let mut w = lock(exp, expected)?;
    let config = exp.config()?;
    let dataset = exp.dataset()?;
    let (_, _, spec) = resolve_prompt(exp, req.prompt.as_deref().unwrap_or("few_shot_cot"))?;
    if spec.mode != PromptMode::FewShotCot {
        return Err(invalid("active learning needs a few_shot_cot prompt"));
    }
    let (_, split) = latest_split(exp)?;
    let exemplar_ids: BTreeSet<&str> = spec.exemplar_ids().collect();
    let pool_ids: Vec<&str> = split
        .train_ids
        .iter()
        .map(String::as_str)
        .filter(|id| !exemplar_ids.contains(id))
        .collect();
    let (responses, gold) = dataset.subset(pool_ids)?;
    let pool = responses
        .into_iter()
        .zip(gold)
        .map(|(response, gold)| PoolItem { response, gold })
        .collect();
    let mut al = config.active_learning.clone();
    if let Some(n) = req.max_iterations {
        al.max_iterations = n;
    }
    if let Some(n) = req.max_additions {
        al.max_additions = n;
    }
    let state = ALState::new(spec, pool, split.test_ids, al)?;
    active::IterationLog::record(&mut AlLog { writer: &mut w }, &state, None).map_err(ALError::Log)?;
    drop(w);
    status(exp)
}

/// Scores the validation pool with the current prompt.
pub async fn validate(exp: &Experiment, backend: &BackendChoice, expected: Option<&Digest>) -> Result<IterationSummary> {
    let mut w = lock(exp, expected)?;
    let config = exp.config()?;
    let dataset = exp.dataset()?;
    let (_, mut state) = load_state(exp)?;
    let gateway = gateway_for(&config, backend, &state.spec, &dataset)?;
    let it = active::run_validation(&mut state, &gateway, &mut AlLog { writer: &mut w }).await?;
    Ok(IterationSummary::from(&it))
}

pub fn tag(exp: &Experiment, tags: Vec<ErrorTag>, expected: Option<&Digest>) -> Result<AlStatus> {
    let mut w = lock(exp, expected)?;
    let (_, mut state) = load_state(exp)?;
    active::tag(&mut state, tags, &mut AlLog { writer: &mut w })?;
    drop(w);
    status(exp)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selected {
    pub selection: Selection,
    /// Review sheet, one row per candidate.
    pub worksheet: String,
}

pub fn select(exp: &Experiment, expected: Option<&Digest>) -> Result<Selected> {
    let mut w = lock(exp, expected)?;
    let (_, mut state) = load_state(exp)?;
    let selection = active::select(&mut state, &mut AlLog { writer: &mut w })?;
    let last = state.last().expect("select leaves an iteration");
    Ok(Selected {
        worksheet: active::candidate_worksheet(last),
        selection,
    })
}

/// A human decision to put one candidate into the prompt, with the
/// chain-of-thought text they approved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub response_id: String,
    #[serde(default)]
    pub reasoning: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptRequest {
    #[serde(default)]
    pub accept: Vec<Acceptance>,
    #[serde(default)]
    pub reject: Vec<String>,
}

/// Candidates of the last iteration, or an error if there are none.
pub fn candidates(exp: &Experiment) -> Result<Vec<Candidate>> {
    let (_, state) = load_state(exp)?;
    let last = state.last().ok_or(ALError::NoIteration)?;
    Ok(last.candidates().to_vec())
}

/// Applies accept and reject decisions. Accepted reasoning replaces the
/// draft entirely, so an acceptance without reasoning fails validation.
pub fn accept(exp: &Experiment, req: AcceptRequest, expected: Option<&Digest>) -> Result<AlStatus> {
    let mut w = lock(exp, expected)?;
    let (_, mut state) = load_state(exp)?;
    let last = state.last().ok_or(ALError::NoIteration)?;
    let offered: BTreeMap<&str, &Candidate> = last.candidates().iter().map(|c| (c.exemplar.id(), c)).collect();
    for id in &req.reject {
        if !offered.contains_key(id.as_str()) {
            return Err(ALError::NotACandidate(id.clone()).into());
        }
        if req.accept.iter().any(|a| &a.response_id == id) {
            return Err(invalid(format!("{id} is both accepted and rejected")));
        }
    }
    let mut exemplars: Vec<CotExemplar> = Vec::new();
    for a in req.accept {
        let candidate = offered
            .get(a.response_id.as_str())
            .ok_or_else(|| ALError::NotACandidate(a.response_id.clone()))?;
        let mut e = candidate.exemplar.clone();
        e.reasoning = a.reasoning;
        exemplars.push(e);
    }
    active::advance(&mut state, exemplars, &mut AlLog { writer: &mut w })?;
    drop(w);
    status(exp)
}

/// Restores an earlier prompt; defaults to the stop rule's revert target.
pub fn revert(exp: &Experiment, to: Option<u32>, expected: Option<&Digest>) -> Result<AlStatus> {
    let mut w = lock(exp, expected)?;
    let (_, mut state) = load_state(exp)?;
    let target = match to {
        Some(t) => t,
        None => {
            let d = state.decision();
            match (d.status, d.revert_to) {
                (StopStatus::OverfitRevert, Some(t)) => t,
                _ => return Err(invalid(format!("nothing to revert: loop status is {}", d.status))),
            }
        }
    };
    active::revert(&mut state, target, &mut AlLog { writer: &mut w })?;
    drop(w);
    status(exp)
}

/// A misclassified instance with the generation that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MisclassifiedView {
    pub response_id: String,
    pub text: String,
    pub subscore: String,
    pub pred: Option<u8>,
    pub gold: u8,
    pub model_reasoning: Option<String>,
    pub raw_generation: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationDetail {
    pub iteration: ALIteration,
    pub misclassified: Vec<MisclassifiedView>,
}

pub fn iteration(exp: &Experiment, index: u32) -> Result<IterationDetail> {
    let (_, state) = load_state(exp)?;
    let it = state
        .iterations
        .get(index as usize)
        .cloned()
        .ok_or(ALError::UnknownIteration(index))?;
    let run = exp
        .entries(RecordKind::ScoringRun)?
        .into_iter()
        .rev()
        .filter(|e| e.label == format!("al-iteration-{index}"))
        .map(|e| exp.load::<ScoringRun>(RecordKind::ScoringRun, &e.digest))
        .find(|r| r.as_ref().map_or(true, |r| r.digest() == it.run_digest))
        .transpose()?;
    let misclassified = it
        .misclassified
        .iter()
        .map(|m| {
            let scored = run.as_ref().and_then(|r| r.scores.get(&m.response_id));
            let failed = run.as_ref().and_then(|r| r.failures.get(&m.response_id));
            MisclassifiedView {
                response_id: m.response_id.clone(),
                text: state
                    .pool
                    .get(&m.response_id)
                    .map(|p| p.response.text.clone())
                    .or_else(|| {
                        state
                            .specs
                            .values()
                            .flat_map(|s| &s.exemplars)
                            .find(|e| e.id() == m.response_id)
                            .map(|e| e.response.text.clone())
                    })
                    .unwrap_or_default(),
                subscore: m.subscore.clone(),
                pred: m.pred,
                gold: m.gold,
                model_reasoning: scored.and_then(|s| s.reasoning.get(&m.subscore).cloned()),
                raw_generation: scored
                    .map(|s| s.raw.raw_text.clone())
                    .or_else(|| failed.and_then(|f| f.raw.as_ref().map(|g| g.raw_text.clone()))),
            }
        })
        .collect();
    Ok(IterationDetail {
        iteration: it,
        misclassified,
    })
}
