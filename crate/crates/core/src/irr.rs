//! Inter-rater reliability rounds between two human raters.
//!
//! A round compares both raters' subscores over the same sample, reports
//! per-subscore Cohen's kappa, lists every disagreement, and passes only when
//! each kappa is strictly above the threshold. Consensus records resolve the
//! disagreements; the resolved sample becomes the first prompt exemplars.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{MetricError, ModelError};
use crate::metrics::cohen_kappa;
use crate::model::{
    validate_score_vector, CotExemplar, ExemplarSource, RaterScores, Rubric, ScoreVector,
    StudentResponse, Violation,
};
use crate::sampling::canonical_shuffle;

pub const IRR_THRESHOLD: f64 = 0.7;
pub const DEFAULT_IRR_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IrrError {
    #[error("nothing to sample from")]
    EmptyDataset,
    #[error("sample fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("round index must be at least 1")]
    BadRoundIndex,
    #[error("raters scored different responses (only {rater_a}: {only_a:?}; only {rater_b}: {only_b:?})")]
    IdSetMismatch {
        rater_a: String,
        rater_b: String,
        only_a: Vec<String>,
        only_b: Vec<String>,
    },
    #[error("rater {rater} scored no responses")]
    EmptyRater { rater: String },
    #[error("rater {rater}, response {response_id}: {}", join(.violations))]
    InvalidScores {
        rater: String,
        response_id: String,
        violations: Vec<Violation>,
    },
    #[error("no consensus for {}", pairs(.0))]
    UncoveredDisagreements(Vec<(String, String)>),
    #[error("consensus for {response_id}/{subscore} does not match any disagreement")]
    UnmatchedConsensus { response_id: String, subscore: String },
    #[error("consensus for {response_id}/{subscore} given twice")]
    DuplicateConsensus { response_id: String, subscore: String },
    #[error("consensus for {response_id}/{subscore}: {reason}")]
    InvalidConsensus {
        response_id: String,
        subscore: String,
        reason: String,
    },
    #[error("response {0} is not in the dataset")]
    UnknownResponse(String),
    #[error("worksheet row {row}: {reason}")]
    Worksheet { row: usize, reason: String },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

fn pairs(v: &[(String, String)]) -> String {
    v.iter().map(|(id, s)| format!("{id}/{s}")).collect::<Vec<_>>().join(", ")
}

/// Strict gate: a kappa equal to the threshold fails.
pub fn passes_gate(kappa: f64, threshold: f64) -> bool {
    kappa > threshold
}

/// Draws `ceil(fraction * n)` ids with a seeded shuffle of the sorted ids.
/// The result is sorted.
pub fn sample_for_irr(
    ids: impl IntoIterator<Item = String>,
    fraction: f64,
    seed: u64,
) -> Result<Vec<String>, IrrError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(IrrError::BadFraction(fraction));
    }
    let shuffled = canonical_shuffle(ids, seed);
    if shuffled.is_empty() {
        return Err(IrrError::EmptyDataset);
    }
    // the epsilon keeps 0.2 * 100 from becoming 21 through representation error
    let k = ((fraction * shuffled.len() as f64 - 1e-9).ceil() as usize).clamp(1, shuffled.len());
    let mut sample: Vec<String> = shuffled.into_iter().take(k).collect();
    sample.sort();
    Ok(sample)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Disagreement {
    pub response_id: String,
    pub subscore: String,
    pub rater_a: u8,
    pub rater_b: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrrRound {
    pub round_index: u32,
    pub rater_a: RaterScores,
    pub rater_b: RaterScores,
    pub threshold: f64,
    pub kappa_by_subscore: BTreeMap<String, f64>,
    /// Ordered by response id, then rubric order.
    pub disagreements: Vec<Disagreement>,
    pub passed: bool,
}

impl IrrRound {
    /// Subscores at or below the threshold, with their kappa.
    pub fn failing_subscores(&self) -> Vec<(&str, f64)> {
        self.kappa_by_subscore
            .iter()
            .filter(|(_, &k)| !passes_gate(k, self.threshold))
            .map(|(s, &k)| (s.as_str(), k))
            .collect()
    }

    pub fn sample_ids(&self) -> BTreeSet<&str> {
        self.rater_a.response_ids()
    }
}

pub fn compute_round(
    round_index: u32,
    a: RaterScores,
    b: RaterScores,
    rubric: &Rubric,
    threshold: f64,
) -> Result<IrrRound, IrrError> {
    if round_index == 0 {
        return Err(IrrError::BadRoundIndex);
    }
    for rater in [&a, &b] {
        if rater.scores.is_empty() {
            return Err(IrrError::EmptyRater {
                rater: rater.rater_id.clone(),
            });
        }
        for s in &rater.scores {
            validate_score_vector(s, rubric).map_err(|violations| IrrError::InvalidScores {
                rater: rater.rater_id.clone(),
                response_id: s.response_id.clone(),
                violations,
            })?;
        }
    }
    let (ids_a, ids_b) = (a.response_ids(), b.response_ids());
    if ids_a != ids_b {
        return Err(IrrError::IdSetMismatch {
            rater_a: a.rater_id.clone(),
            rater_b: b.rater_id.clone(),
            only_a: ids_a.difference(&ids_b).map(|s| s.to_string()).collect(),
            only_b: ids_b.difference(&ids_a).map(|s| s.to_string()).collect(),
        });
    }

    let (by_a, by_b) = (a.by_id(), b.by_id());
    let mut kappa_by_subscore = BTreeMap::new();
    for name in rubric.subscore_names() {
        let la: Vec<u32> = by_a.values().map(|v| u32::from(v.by_subscore[name])).collect();
        let lb: Vec<u32> = by_b.values().map(|v| u32::from(v.by_subscore[name])).collect();
        kappa_by_subscore.insert(name.to_string(), cohen_kappa(&la, &lb)?);
    }
    let mut disagreements = Vec::new();
    for (id, va) in &by_a {
        let vb = by_b[id];
        for name in rubric.subscore_names() {
            let (x, y) = (va.by_subscore[name], vb.by_subscore[name]);
            if x != y {
                disagreements.push(Disagreement {
                    response_id: id.to_string(),
                    subscore: name.to_string(),
                    rater_a: x,
                    rater_b: y,
                });
            }
        }
    }
    let passed = kappa_by_subscore.values().all(|&k| passes_gate(k, threshold));
    Ok(IrrRound {
        round_index,
        rater_a: a,
        rater_b: b,
        threshold,
        kappa_by_subscore,
        disagreements,
        passed,
    })
}

/// The raters' agreed value for one disagreement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusRecord {
    pub response_id: String,
    pub subscore: String,
    pub resolved_value: u8,
    pub rationale: String,
    #[serde(default)]
    pub resolved_by: Vec<String>,
}

impl ConsensusRecord {
    pub fn validate(&self) -> Result<(), IrrError> {
        let bad = |reason: &str| IrrError::InvalidConsensus {
            response_id: self.response_id.clone(),
            subscore: self.subscore.clone(),
            reason: reason.to_string(),
        };
        if self.resolved_value > 1 {
            return Err(bad("resolved value must be 0 or 1"));
        }
        if self.rationale.trim().is_empty() {
            return Err(bad("rationale is empty"));
        }
        Ok(())
    }
}

/// Disagreements in `round` that no record resolves.
pub fn uncovered(round: &IrrRound, consensus: &[ConsensusRecord]) -> Vec<(String, String)> {
    let covered: BTreeSet<(&str, &str)> = consensus
        .iter()
        .map(|c| (c.response_id.as_str(), c.subscore.as_str()))
        .collect();
    round
        .disagreements
        .iter()
        .filter(|d| !covered.contains(&(d.response_id.as_str(), d.subscore.as_str())))
        .map(|d| (d.response_id.clone(), d.subscore.clone()))
        .collect()
}

/// Turns a round's sample into exemplars.
///
/// Fully agreed responses come first, then responses with at least one
/// resolved disagreement, each group in id order. Consensus values replace
/// both raters' values. Reasoning comes from `drafts` when present; otherwise
/// a consensus rationale seeds it, and anything else is left empty for a
/// human to write before the exemplar can enter a chain-of-thought prompt.
pub fn emit_exemplars(
    round: &IrrRound,
    consensus: &[ConsensusRecord],
    responses: &[StudentResponse],
    drafts: &BTreeMap<String, BTreeMap<String, String>>,
) -> Result<Vec<CotExemplar>, IrrError> {
    let disputed: BTreeSet<(&str, &str)> = round
        .disagreements
        .iter()
        .map(|d| (d.response_id.as_str(), d.subscore.as_str()))
        .collect();
    let mut resolved: BTreeMap<(&str, &str), &ConsensusRecord> = BTreeMap::new();
    for c in consensus {
        c.validate()?;
        let key = (c.response_id.as_str(), c.subscore.as_str());
        if !disputed.contains(&key) {
            return Err(IrrError::UnmatchedConsensus {
                response_id: c.response_id.clone(),
                subscore: c.subscore.clone(),
            });
        }
        if resolved.insert(key, c).is_some() {
            return Err(IrrError::DuplicateConsensus {
                response_id: c.response_id.clone(),
                subscore: c.subscore.clone(),
            });
        }
    }
    let missing = uncovered(round, consensus);
    if !missing.is_empty() {
        return Err(IrrError::UncoveredDisagreements(missing));
    }

    let texts: BTreeMap<&str, &StudentResponse> =
        responses.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut agreed = Vec::new();
    let mut settled = Vec::new();
    for (id, rater_a) in round.rater_a.by_id() {
        let response = *texts
            .get(id)
            .ok_or_else(|| IrrError::UnknownResponse(id.to_string()))?;
        let mut values = rater_a.by_subscore.clone();
        let mut reasoning = BTreeMap::new();
        let mut had_dispute = false;
        for (name, value) in values.iter_mut() {
            let draft = drafts.get(id).and_then(|d| d.get(name));
            if let Some(c) = resolved.get(&(id, name.as_str())) {
                *value = c.resolved_value;
                had_dispute = true;
                reasoning.insert(name.clone(), draft.cloned().unwrap_or_else(|| c.rationale.clone()));
            } else {
                reasoning.insert(name.clone(), draft.cloned().unwrap_or_default());
            }
        }
        let exemplar = CotExemplar {
            response: response.clone(),
            gold: ScoreVector::from_scores(id, values),
            reasoning,
            source: if had_dispute {
                ExemplarSource::IrrDisagreedConsensus
            } else {
                ExemplarSource::IrrAgreed
            },
        };
        if had_dispute {
            settled.push(exemplar);
        } else {
            agreed.push(exemplar);
        }
    }
    agreed.extend(settled);
    Ok(agreed)
}

/// One row of the disagreement worksheet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorksheetRow {
    pub response_id: String,
    pub subscore: String,
    pub rater_a: u8,
    pub rater_b: u8,
    pub consensus: Option<u8>,
    pub rationale: String,
}

/// CSV with one row per disagreement, prefilled from any existing consensus.
pub fn write_worksheet(round: &IrrRound, consensus: &[ConsensusRecord]) -> String {
    let known: BTreeMap<(&str, &str), &ConsensusRecord> = consensus
        .iter()
        .map(|c| ((c.response_id.as_str(), c.subscore.as_str()), c))
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    for d in &round.disagreements {
        let c = known.get(&(d.response_id.as_str(), d.subscore.as_str()));
        w.serialize(WorksheetRow {
            response_id: d.response_id.clone(),
            subscore: d.subscore.clone(),
            rater_a: d.rater_a,
            rater_b: d.rater_b,
            consensus: c.map(|c| c.resolved_value),
            rationale: c.map(|c| c.rationale.clone()).unwrap_or_default(),
        })
        .expect("writing to memory cannot fail");
    }
    if round.disagreements.is_empty() {
        w.write_record(["response_id", "subscore", "rater_a", "rater_b", "consensus", "rationale"])
            .expect("writing to memory cannot fail");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// Reads a filled worksheet. Rows with an empty consensus cell are skipped;
/// filled rows must carry a rationale.
pub fn read_worksheet(text: &str, resolved_by: &[String]) -> Result<Vec<ConsensusRecord>, IrrError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<WorksheetRow>().enumerate() {
        // header is row 1
        let row_no = i + 2;
        let row = row.map_err(|e| IrrError::Worksheet {
            row: row_no,
            reason: e.to_string(),
        })?;
        let Some(value) = row.consensus else { continue };
        let record = ConsensusRecord {
            response_id: row.response_id,
            subscore: row.subscore,
            resolved_value: value,
            rationale: row.rationale,
            resolved_by: resolved_by.to_vec(),
        };
        record.validate().map_err(|e| IrrError::Worksheet {
            row: row_no,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Reads a rater file: CSV with a `response_id` column and one 0/1 column per
/// subscore (header names are folded like rubric names).
pub fn read_rater_csv(rater_id: &str, text: &str, rubric: &Rubric) -> Result<RaterScores, IrrError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r
        .headers()
        .map_err(|e| IrrError::Worksheet { row: 1, reason: e.to_string() })?
        .clone();
    let mut columns = Vec::new();
    let mut id_col = None;
    for (i, h) in headers.iter().enumerate() {
        if h.trim() == "response_id" {
            id_col = Some(i);
        } else {
            let name = rubric.resolve_name(h).ok_or_else(|| IrrError::Worksheet {
                row: 1,
                reason: format!("column {h:?} is not a rubric subscore"),
            })?;
            columns.push((i, name.to_string()));
        }
    }
    let id_col = id_col.ok_or_else(|| IrrError::Worksheet {
        row: 1,
        reason: "no response_id column".into(),
    })?;
    let mut scores = Vec::new();
    for (i, record) in r.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| IrrError::Worksheet { row, reason: e.to_string() })?;
        let mut values = Vec::new();
        for (col, name) in &columns {
            let cell = record.get(*col).unwrap_or("").trim();
            let v = match cell {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(IrrError::Worksheet {
                        row,
                        reason: format!("{name} must be 0 or 1, got {other:?}"),
                    })
                }
            };
            values.push((name.clone(), v));
        }
        let id = record.get(id_col).unwrap_or("").trim().to_string();
        scores.push(ScoreVector::from_scores(id, values));
    }
    Ok(RaterScores::new(rater_id, scores)?)
}
