//! Active-learning loop over a validation pool.
//!
//! Each iteration scores the pool with the current prompt, lists the
//! misclassified (response, subscore) pairs, and waits for a human to tag
//! error patterns. Candidate exemplars are then chosen by greedy weighted set
//! cover over the tagged patterns, a human accepts some of them with edited
//! reasoning, and the accepted ones move from the pool into the prompt.
//!
//! Every transition is handed to an [`IterationLog`] before it returns, so
//! the full history can be replayed from persisted snapshots.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;
use crate::error::MetricError;
use crate::gateway::{score_batch, BatchError, FailureKind, Gateway, ScoringRun};
use crate::metrics::{evaluate_scores, EvaluationReport, TrendReport};
use crate::model::{cot_sentence, CotExemplar, ExemplarSource, Rubric, ScoreVector, StudentResponse};
use crate::prompt::{balance_of, check_balance, render_prompt, BalancePolicy, BalanceReport, PromptError, PromptSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ALError {
    #[error("the validation pool is empty")]
    EmptyPool,
    #[error("{0} appears in more than one of validation pool, prompt exemplars and test set")]
    Overlap(String),
    #[error("no iteration has been run yet")]
    NoIteration,
    #[error("{failures} responses failed at the gateway, tolerance is {tolerance}")]
    TooManyFailures { failures: usize, tolerance: usize },
    #[error("tag {pattern_id}: {reason}")]
    InvalidTag { pattern_id: String, reason: String },
    #[error("iteration {0} has no tags to select from")]
    NoTags(u32),
    #[error("max_additions must be at least 1")]
    ZeroBudget,
    #[error("iteration {0} has no candidates to accept")]
    NoCandidates(u32),
    #[error("{0} is not a current candidate")]
    NotACandidate(String),
    #[error("{response_id} was accepted twice")]
    DuplicateAcceptance { response_id: String },
    #[error("exemplar {response_id} lacks reasoning for {}", .subscores.join(", "))]
    MissingReasoning {
        response_id: String,
        subscores: Vec<String>,
    },
    #[error("accepting these candidates breaks balance: {}", .0.join("; "))]
    Unbalanced(Vec<String>),
    #[error("exemplar {0} changes the human gold label")]
    GoldMismatch(String),
    #[error("iteration {0} does not exist")]
    UnknownIteration(u32),
    #[error("the active prompt already matches iteration {0}")]
    NothingToRevert(u32),
    #[error("prompt spec {0} is missing from the state")]
    MissingSpec(String),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("could not persist iteration log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDirection {
    /// Model awarded a point the human did not.
    Fp,
    Fn,
}

/// One wrong subscore. `pred` is `None` when the generation did not parse.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Misclassification {
    pub response_id: String,
    pub subscore: String,
    pub pred: Option<u8>,
    pub gold: u8,
}

impl Misclassification {
    pub fn direction(&self) -> Option<ErrorDirection> {
        match self.pred {
            Some(1) if self.gold == 0 => Some(ErrorDirection::Fp),
            Some(0) if self.gold == 1 => Some(ErrorDirection::Fn),
            _ => None,
        }
    }
}

/// A human-named reasoning error shared by several instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorTag {
    pub pattern_id: String,
    pub description: String,
    pub instance_ids: BTreeSet<String>,
    pub subscore: String,
    pub direction: ErrorDirection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    /// Draft exemplar; reasoning must be reviewed before acceptance.
    pub exemplar: CotExemplar,
    /// Patterns newly covered when this candidate was picked.
    pub covers: Vec<String>,
    pub gain: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverStop {
    FullCover,
    Budget,
    /// Remaining patterns have no admissible instance left.
    Blocked,
}

/// How the greedy cover was built, for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverCertificate {
    pub order: Vec<String>,
    pub covered: Vec<String>,
    pub uncovered: Vec<String>,
    pub stop: CoverStop,
    /// Candidates skipped because they broke the balance policy.
    pub rejected: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Selection {
    Candidates {
        candidates: Vec<Candidate>,
        certificate: CoverCertificate,
    },
    Exhausted {
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopStatus {
    Continue,
    Converged,
    OverfitRevert,
    Exhausted,
}

impl std::fmt::Display for StopStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopStatus::Continue => "continue",
            StopStatus::Converged => "converged",
            StopStatus::OverfitRevert => "overfit_revert",
            StopStatus::Exhausted => "exhausted",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopDecision {
    pub status: StopStatus,
    pub reason: String,
    /// Set with [`StopStatus::OverfitRevert`].
    pub revert_to: Option<u32>,
    /// Change in error count per subscore against the previous iteration.
    #[serde(default)]
    pub subscore_deltas: BTreeMap<String, i64>,
}

impl StopDecision {
    fn new(status: StopStatus, reason: impl Into<String>) -> Self {
        Self {
            status,
            reason: reason.into(),
            revert_to: None,
            subscore_deltas: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALIteration {
    pub index: u32,
    pub prompt_spec_digest: Digest,
    pub run_digest: Digest,
    pub validation_ids: BTreeSet<String>,
    /// Over the instances that parsed; `None` when none did.
    pub reports: Option<EvaluationReport>,
    pub trends: Vec<TrendReport>,
    pub misclassified: Vec<Misclassification>,
    pub error_count: usize,
    /// Responses lost to gateway failures within tolerance.
    pub unscored: Vec<String>,
    pub tags: Vec<ErrorTag>,
    pub selection: Option<Selection>,
    pub added_exemplars: Vec<CotExemplar>,
    pub decision: StopDecision,
}

impl ALIteration {
    pub fn errors_by_subscore(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for m in &self.misclassified {
            *out.entry(m.subscore.clone()).or_default() += 1;
        }
        out
    }

    pub fn candidates(&self) -> &[Candidate] {
        match &self.selection {
            Some(Selection::Candidates { candidates, .. }) => candidates,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolItem {
    pub response: StudentResponse,
    pub gold: ScoreVector,
}

fn one() -> u32 {
    1
}

fn five() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALConfig {
    /// Iterations after which the loop reports exhausted.
    #[serde(default = "one")]
    pub max_iterations: u32,
    #[serde(default = "five")]
    pub max_additions: usize,
    #[serde(default)]
    pub balance: BalancePolicy,
    /// Gateway failures tolerated per validation run.
    #[serde(default)]
    pub failure_tolerance: usize,
}

impl Default for ALConfig {
    fn default() -> Self {
        Self {
            max_iterations: one(),
            max_additions: five(),
            balance: BalancePolicy::default(),
            failure_tolerance: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ALEvent {
    Validated { iteration: u32 },
    Tagged { iteration: u32, patterns: usize },
    Selected { iteration: u32, candidates: usize },
    Advanced { iteration: u32, added: Vec<String>, spec_digest: Digest },
    NoOp { iteration: u32 },
    Reverted { from: Digest, to_iteration: u32, spec_digest: Digest },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALState {
    pub spec: PromptSpec,
    /// Every prompt spec the loop has used, by digest.
    pub specs: BTreeMap<Digest, PromptSpec>,
    pub pool: BTreeMap<String, PoolItem>,
    pub test_ids: BTreeSet<String>,
    pub iterations: Vec<ALIteration>,
    pub events: Vec<ALEvent>,
    pub config: ALConfig,
}

/// Receives the state after every transition.
pub trait IterationLog {
    fn record(&mut self, state: &ALState, run: Option<&ScoringRun>) -> Result<(), String>;
}

/// Keeps snapshots in memory.
#[derive(Debug, Default)]
pub struct MemoryLog {
    pub snapshots: Vec<ALState>,
    pub runs: Vec<ScoringRun>,
}

impl IterationLog for MemoryLog {
    fn record(&mut self, state: &ALState, run: Option<&ScoringRun>) -> Result<(), String> {
        self.snapshots.push(state.clone());
        self.runs.extend(run.cloned());
        Ok(())
    }
}

impl ALState {
    pub fn new(
        spec: PromptSpec,
        pool: Vec<PoolItem>,
        test_ids: BTreeSet<String>,
        config: ALConfig,
    ) -> Result<Self, ALError> {
        if pool.is_empty() {
            return Err(ALError::EmptyPool);
        }
        let mut by_id = BTreeMap::new();
        for item in pool {
            let id = item.response.id.clone();
            if by_id.insert(id.clone(), item).is_some() {
                return Err(ALError::Overlap(id));
            }
        }
        let state = Self {
            specs: BTreeMap::from([(spec.digest(), spec.clone())]),
            spec,
            pool: by_id,
            test_ids,
            iterations: Vec::new(),
            events: Vec::new(),
            config,
        };
        state.check_disjoint()?;
        Ok(state)
    }

    pub fn rubric(&self) -> &Rubric {
        &self.spec.rubric
    }

    pub fn check_disjoint(&self) -> Result<(), ALError> {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let ids = self
            .pool
            .keys()
            .map(String::as_str)
            .chain(self.spec.exemplar_ids())
            .chain(self.test_ids.iter().map(String::as_str));
        for id in ids {
            if !seen.insert(id) {
                return Err(ALError::Overlap(id.to_string()));
            }
        }
        Ok(())
    }

    /// Validation pool size over prompt exemplar count.
    pub fn validation_ratio(&self) -> Option<f64> {
        let n = self.spec.exemplars.len();
        (n > 0).then(|| self.pool.len() as f64 / n as f64)
    }

    pub fn last(&self) -> Option<&ALIteration> {
        self.iterations.last()
    }

    pub fn decision(&self) -> StopDecision {
        check_stop(&self.iterations, &self.config)
    }

    fn last_mut(&mut self) -> Result<&mut ALIteration, ALError> {
        self.iterations.last_mut().ok_or(ALError::NoIteration)
    }

    fn refresh_decision(&mut self) {
        let decision = check_stop(&self.iterations, &self.config);
        if let Some(last) = self.iterations.last_mut() {
            last.decision = decision;
        }
    }
}

fn persist(log: &mut dyn IterationLog, state: &ALState, run: Option<&ScoringRun>) -> Result<(), ALError> {
    log.record(state, run).map_err(ALError::Log)
}

/// Scores the validation pool with the active prompt and appends an
/// iteration. A response whose generation does not parse counts as
/// misclassified on every subscore.
pub async fn run_validation(
    state: &mut ALState,
    gateway: &Gateway,
    log: &mut (dyn IterationLog + Send),
) -> Result<ALIteration, ALError> {
    if state.pool.is_empty() {
        return Err(ALError::EmptyPool);
    }
    state.check_disjoint()?;
    let responses: Vec<StudentResponse> = state.pool.values().map(|p| p.response.clone()).collect();
    let run = score_batch(gateway, &state.spec, &responses, None).await?;
    let gateway_failures: Vec<String> = run
        .failures
        .values()
        .filter(|f| matches!(f.kind, FailureKind::Gateway { .. }))
        .map(|f| f.response_id.clone())
        .collect();
    if gateway_failures.len() > state.config.failure_tolerance {
        return Err(ALError::TooManyFailures {
            failures: gateway_failures.len(),
            tolerance: state.config.failure_tolerance,
        });
    }

    let rubric = state.spec.rubric.clone();
    let mut misclassified = Vec::new();
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for (id, item) in &state.pool {
        if let Some(scored) = run.scores.get(id) {
            for name in rubric.subscore_names() {
                let (p, g) = (scored.scores.get(name), item.gold.get(name).unwrap_or(0));
                if p != Some(g) {
                    misclassified.push(Misclassification {
                        response_id: id.clone(),
                        subscore: name.to_string(),
                        pred: p,
                        gold: g,
                    });
                }
            }
            pred.push(scored.scores.clone());
            gold.push(item.gold.clone());
        } else if matches!(run.failures.get(id).map(|f| &f.kind), Some(FailureKind::Parse { .. })) {
            for name in rubric.subscore_names() {
                misclassified.push(Misclassification {
                    response_id: id.clone(),
                    subscore: name.to_string(),
                    pred: None,
                    gold: item.gold.get(name).unwrap_or(0),
                });
            }
        }
    }
    let reports = if pred.is_empty() {
        None
    } else {
        Some(evaluate_scores(&pred, &gold, &rubric)?)
    };
    let trends = rubric
        .subscore_names()
        .map(|name| {
            let of = |d| {
                misclassified
                    .iter()
                    .filter(|m| m.subscore == name && m.direction() == Some(d))
                    .count()
            };
            TrendReport::from_counts(name, of(ErrorDirection::Fp), of(ErrorDirection::Fn))
        })
        .collect();

    let index = state.iterations.len() as u32;
    state.iterations.push(ALIteration {
        index,
        prompt_spec_digest: state.spec.digest(),
        run_digest: run.digest(),
        validation_ids: state.pool.keys().cloned().collect(),
        reports,
        trends,
        error_count: misclassified.len(),
        misclassified,
        unscored: gateway_failures,
        tags: Vec::new(),
        selection: None,
        added_exemplars: Vec::new(),
        decision: StopDecision::new(StopStatus::Continue, ""),
    });
    state.refresh_decision();
    state.events.push(ALEvent::Validated { iteration: index });
    persist(log, state, Some(&run))?;
    Ok(state.iterations.last().expect("just pushed").clone())
}

/// Checks that every tag names misclassified instances of `iteration` on
/// its subscore, in its direction.
pub fn validate_tags(iteration: &ALIteration, tags: &[ErrorTag], rubric: &Rubric) -> Result<(), ALError> {
    let wrong: BTreeMap<(&str, &str), &Misclassification> = iteration
        .misclassified
        .iter()
        .map(|m| ((m.response_id.as_str(), m.subscore.as_str()), m))
        .collect();
    let mut ids = BTreeSet::new();
    for tag in tags {
        let bad = |reason: String| ALError::InvalidTag {
            pattern_id: tag.pattern_id.clone(),
            reason,
        };
        if tag.pattern_id.trim().is_empty() {
            return Err(bad("empty pattern id".into()));
        }
        if !ids.insert(tag.pattern_id.as_str()) {
            return Err(bad("pattern id used twice".into()));
        }
        if tag.instance_ids.is_empty() {
            return Err(bad("no instances".into()));
        }
        if rubric.subscore(&tag.subscore).is_none() {
            return Err(bad(format!("unknown subscore {}", tag.subscore)));
        }
        for id in &tag.instance_ids {
            let m = wrong
                .get(&(id.as_str(), tag.subscore.as_str()))
                .ok_or_else(|| bad(format!("{id} is not misclassified on {}", tag.subscore)))?;
            if m.direction().is_some_and(|d| d != tag.direction) {
                return Err(bad(format!("{id} is not a {:?} error", tag.direction)));
            }
        }
    }
    Ok(())
}

pub fn tag(state: &mut ALState, tags: Vec<ErrorTag>, log: &mut dyn IterationLog) -> Result<(), ALError> {
    let rubric = state.spec.rubric.clone();
    let last = state.last_mut()?;
    validate_tags(last, &tags, &rubric)?;
    let (iteration, patterns) = (last.index, tags.len());
    last.tags = tags;
    last.selection = None;
    state.refresh_decision();
    state.events.push(ALEvent::Tagged { iteration, patterns });
    persist(log, state, None)
}

fn draft_reasoning(response: &StudentResponse, gold: &ScoreVector, rubric: &Rubric) -> BTreeMap<String, String> {
    rubric
        .subscores
        .iter()
        .map(|s| {
            let v = gold.get(&s.name).unwrap_or(0);
            (s.name.clone(), cot_sentence(&response.text, &s.criteria, v))
        })
        .collect()
}

/// Greedy weighted set cover over the iteration's tags.
///
/// An instance's gain is the summed size of the still-uncovered tags that
/// contain it. The highest-gain instance whose addition the balance policy
/// admits is picked next; ties go to the smallest response id. Selection
/// stops at full cover, at `max_additions`, or when nothing admissible is
/// left. If nothing at all can be picked the result is
/// [`Selection::Exhausted`].
pub fn select_candidates(
    iteration: &ALIteration,
    exemplars: &[CotExemplar],
    pool: &BTreeMap<String, PoolItem>,
    rubric: &Rubric,
    policy: &BalancePolicy,
    max_additions: usize,
) -> Result<Selection, ALError> {
    if max_additions == 0 {
        return Err(ALError::ZeroBudget);
    }
    if iteration.tags.is_empty() {
        return Err(ALError::NoTags(iteration.index));
    }
    let sizes: BTreeMap<&str, usize> = iteration
        .tags
        .iter()
        .map(|t| (t.pattern_id.as_str(), t.instance_ids.len()))
        .collect();
    let mut patterns_of: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for t in &iteration.tags {
        for id in &t.instance_ids {
            if pool.contains_key(id) {
                patterns_of.entry(id.as_str()).or_default().push(t.pattern_id.as_str());
            }
        }
    }
    if patterns_of.is_empty() {
        return Ok(Selection::Exhausted {
            reason: "no tagged instance remains in the validation pool".into(),
        });
    }

    let mut golds: Vec<&ScoreVector> = exemplars.iter().map(|e| &e.gold).collect();
    let mut uncovered: BTreeSet<&str> = sizes.keys().copied().collect();
    let mut chosen: Vec<Candidate> = Vec::new();
    let mut rejected: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut stop = CoverStop::FullCover;
    while !uncovered.is_empty() {
        if chosen.len() == max_additions {
            stop = CoverStop::Budget;
            break;
        }
        let before: BalanceReport = balance_of(&golds, rubric);
        let mut ranked: Vec<(usize, &str, Vec<&str>)> = patterns_of
            .iter()
            .filter(|(id, _)| !chosen.iter().any(|c| c.exemplar.id() == **id))
            .map(|(id, pats)| {
                let covers: Vec<&str> = pats.iter().copied().filter(|p| uncovered.contains(p)).collect();
                (covers.iter().map(|p| sizes[p]).sum(), *id, covers)
            })
            .filter(|(gain, _, _)| *gain > 0)
            .collect();
        ranked.sort_by_key(|(gain, id, _)| (Reverse(*gain), *id));

        let mut picked = None;
        for (gain, id, covers) in ranked {
            let mut trial = golds.clone();
            trial.push(&pool[id].gold);
            match policy.admits(&before, &balance_of(&trial, rubric)) {
                Ok(()) => {
                    picked = Some((gain, id, covers));
                    break;
                }
                Err(problems) => {
                    rejected.insert(id.to_string(), problems);
                }
            }
        }
        let Some((gain, id, covers)) = picked else {
            stop = CoverStop::Blocked;
            break;
        };
        let item = &pool[id];
        golds.push(&item.gold);
        for p in &covers {
            uncovered.remove(p);
        }
        chosen.push(Candidate {
            exemplar: CotExemplar {
                response: item.response.clone(),
                gold: item.gold.clone(),
                reasoning: draft_reasoning(&item.response, &item.gold, rubric),
                source: ExemplarSource::ActiveLearning,
            },
            covers: covers.iter().map(|p| p.to_string()).collect(),
            gain,
        });
    }

    if chosen.is_empty() {
        let mut reasons: Vec<String> = rejected.values().flatten().cloned().collect();
        reasons.sort();
        reasons.dedup();
        return Ok(Selection::Exhausted {
            reason: format!("no candidate keeps the prompt balanced: {}", reasons.join("; ")),
        });
    }
    let covered: Vec<String> = sizes
        .keys()
        .filter(|p| !uncovered.contains(*p))
        .map(|p| p.to_string())
        .collect();
    let certificate = CoverCertificate {
        order: chosen.iter().map(|c| c.exemplar.id().to_string()).collect(),
        covered,
        uncovered: uncovered.iter().map(|p| p.to_string()).collect(),
        stop,
        rejected,
    };
    Ok(Selection::Candidates {
        candidates: chosen,
        certificate,
    })
}

pub fn select(state: &mut ALState, log: &mut dyn IterationLog) -> Result<Selection, ALError> {
    let last = state.last().ok_or(ALError::NoIteration)?;
    let selection = select_candidates(
        last,
        &state.spec.exemplars,
        &state.pool,
        &state.spec.rubric,
        &state.config.balance,
        state.config.max_additions,
    )?;
    let last = state.last_mut()?;
    last.selection = Some(selection.clone());
    let iteration = last.index;
    let candidates = last.candidates().len();
    state.refresh_decision();
    state.events.push(ALEvent::Selected { iteration, candidates });
    persist(log, state, None)?;
    Ok(selection)
}

/// Moves human-approved candidates into the prompt.
///
/// Each accepted exemplar must be one of the last iteration's candidates,
/// keep its gold label, and carry reasoning for every subscore. Accepting
/// nothing leaves the prompt untouched and logs a no-op.
pub fn advance(
    state: &mut ALState,
    accepted: Vec<CotExemplar>,
    log: &mut dyn IterationLog,
) -> Result<(), ALError> {
    let last = state.last().ok_or(ALError::NoIteration)?;
    let iteration = last.index;
    if !matches!(last.selection, Some(Selection::Candidates { .. })) {
        return Err(ALError::NoCandidates(iteration));
    }
    let offered: BTreeMap<&str, &Candidate> =
        last.candidates().iter().map(|c| (c.exemplar.id(), c)).collect();
    let mut seen = BTreeSet::new();
    let mut additions = Vec::new();
    for mut e in accepted {
        let id = e.id().to_string();
        let candidate = offered.get(id.as_str()).ok_or_else(|| ALError::NotACandidate(id.clone()))?;
        if !seen.insert(id.clone()) {
            return Err(ALError::DuplicateAcceptance { response_id: id });
        }
        if e.gold.by_subscore != candidate.exemplar.gold.by_subscore {
            return Err(ALError::GoldMismatch(id));
        }
        let missing = e.missing_reasoning(&state.spec.rubric);
        if !missing.is_empty() {
            return Err(ALError::MissingReasoning {
                response_id: id,
                subscores: missing.into_iter().map(str::to_string).collect(),
            });
        }
        e.response = candidate.exemplar.response.clone();
        e.gold = candidate.exemplar.gold.clone();
        e.source = ExemplarSource::ActiveLearning;
        additions.push(e);
    }

    if additions.is_empty() {
        state.events.push(ALEvent::NoOp { iteration });
        return persist(log, state, None);
    }
    let mut spec = state.spec.clone();
    spec.exemplars.extend(additions.iter().cloned());
    let before = check_balance(&state.spec.exemplars, &state.spec.rubric);
    let after = check_balance(&spec.exemplars, &spec.rubric);
    state.config.balance.admits(&before, &after).map_err(ALError::Unbalanced)?;
    render_prompt(&spec)?;
    let digest = spec.digest();
    let mut next = state.clone();
    for e in &additions {
        next.pool.remove(e.id());
    }
    next.spec = spec.clone();
    next.specs.insert(digest.clone(), spec);
    next.check_disjoint()?;
    let last = next.last_mut()?;
    last.added_exemplars.extend(additions.iter().cloned());
    next.events.push(ALEvent::Advanced {
        iteration,
        added: additions.iter().map(|e| e.id().to_string()).collect(),
        spec_digest: digest,
    });
    persist(log, &next, None)?;
    *state = next;
    Ok(())
}

/// Restores the prompt used by iteration `to`. Exemplars added since then
/// return to the validation pool; the iteration history is kept.
pub fn revert(state: &mut ALState, to: u32, log: &mut dyn IterationLog) -> Result<(), ALError> {
    let target = state
        .iterations
        .get(to as usize)
        .ok_or(ALError::UnknownIteration(to))?
        .prompt_spec_digest
        .clone();
    let from = state.spec.digest();
    if from == target {
        return Err(ALError::NothingToRevert(to));
    }
    let spec = state
        .specs
        .get(&target)
        .cloned()
        .ok_or_else(|| ALError::MissingSpec(target.to_string()))?;
    let kept: BTreeSet<&str> = spec.exemplar_ids().collect();
    let mut next = state.clone();
    for e in state.spec.exemplars.iter().filter(|e| !kept.contains(e.id())) {
        next.pool.insert(
            e.id().to_string(),
            PoolItem {
                response: e.response.clone(),
                gold: e.gold.clone(),
            },
        );
    }
    next.spec = spec;
    next.check_disjoint()?;
    debug_assert_eq!(next.spec.digest(), target);
    next.events.push(ALEvent::Reverted {
        from,
        to_iteration: to,
        spec_digest: target,
    });
    persist(log, &next, None)?;
    *state = next;
    Ok(())
}

/// Stop rule, checked in priority order: converged when the last iteration
/// has no errors; overfit when errors rose against the previous iteration;
/// exhausted when selection found nothing admissible or the iteration budget
/// is spent; otherwise continue.
pub fn check_stop(history: &[ALIteration], config: &ALConfig) -> StopDecision {
    let Some(last) = history.last() else {
        return StopDecision::new(StopStatus::Continue, "no iteration has run");
    };
    if last.error_count == 0 {
        return StopDecision::new(
            StopStatus::Converged,
            format!("iteration {} has no misclassified subscores", last.index),
        );
    }
    if let [.., prev, _] = history {
        if last.error_count > prev.error_count {
            let before = prev.errors_by_subscore();
            let after = last.errors_by_subscore();
            let names: BTreeSet<&String> = before.keys().chain(after.keys()).collect();
            let subscore_deltas = names
                .into_iter()
                .map(|n| {
                    let d = *after.get(n).unwrap_or(&0) as i64 - *before.get(n).unwrap_or(&0) as i64;
                    (n.clone(), d)
                })
                .collect();
            return StopDecision {
                status: StopStatus::OverfitRevert,
                reason: format!(
                    "errors rose from {} to {}; revert to iteration {}",
                    prev.error_count, last.error_count, prev.index
                ),
                revert_to: Some(prev.index),
                subscore_deltas,
            };
        }
    }
    if let Some(Selection::Exhausted { reason }) = &last.selection {
        return StopDecision::new(StopStatus::Exhausted, reason.clone());
    }
    if last.index >= config.max_iterations {
        return StopDecision::new(
            StopStatus::Exhausted,
            format!("iteration budget of {} used", config.max_iterations),
        );
    }
    StopDecision::new(
        StopStatus::Continue,
        format!("{} misclassified subscores remain", last.error_count),
    )
}

/// Recomputes the decision after each iteration of a persisted history.
pub fn replay(history: &[ALIteration], config: &ALConfig) -> Vec<StopDecision> {
    (1..=history.len()).map(|n| check_stop(&history[..n], config)).collect()
}

/// Review worksheet: one row per candidate.
pub fn candidate_worksheet(iteration: &ALIteration) -> String {
    let descriptions: BTreeMap<&str, &str> = iteration
        .tags
        .iter()
        .map(|t| (t.pattern_id.as_str(), t.description.as_str()))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pattern_id", "description", "covered_instances", "proposed_exemplar", "draft_cot"])
        .expect("writing to memory cannot fail");
    for c in iteration.candidates() {
        let cot: Vec<String> = c
            .exemplar
            .reasoning
            .iter()
            .map(|(k, v)| format!("{k}: {v}"))
            .collect();
        w.write_record([
            c.covers.join(" "),
            c.covers
                .iter()
                .map(|p| descriptions.get(p.as_str()).copied().unwrap_or(""))
                .collect::<Vec<_>>()
                .join(" | "),
            c.gain.to_string(),
            c.exemplar.id().to_string(),
            cot.join("\n"),
        ])
        .expect("writing to memory cannot fail");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

#[cfg(test)]
mod tests;
