//! Inter-rater reliability rounds and consensus resolution.

use std::collections::{BTreeMap, BTreeSet};

use rubric_loop_core::digest::Digest;
use rubric_loop_core::irr::{
    compute_round, emit_exemplars, read_rater_csv, sample_for_irr, uncovered, write_worksheet, ConsensusRecord,
    IrrError, IrrRound, IRR_THRESHOLD,
};
use rubric_loop_core::model::{CotExemplar, RaterScores, ScoreVector};
use rubric_loop_core::storage::{Experiment, ManifestEntry, RecordKind};
use serde::{Deserialize, Serialize};

use super::{invalid, latest_split, lock, OpsError, Result};

const RESOLVED_SUFFIX: &str = " resolved";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrrSample {
    pub ids: Vec<String>,
    /// Blank rater sheet: `response_id` plus one column per subscore.
    pub template: String,
}

/// Draws the IRR sample from the train partition.
pub fn sample(exp: &Experiment, fraction: Option<f64>, seed: Option<u64>) -> Result<IrrSample> {
    let config = exp.config()?;
    let (_, split) = latest_split(exp)?;
    let ids = sample_for_irr(
        split.train_ids,
        fraction.unwrap_or(config.irr_fraction),
        seed.unwrap_or(config.seed),
    )?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["response_id".to_string()];
    header.extend(config.rubric.subscore_names().map(str::to_string));
    let blanks = vec![String::new(); header.len() - 1];
    let write = |w: &mut csv::Writer<Vec<u8>>, row: &[String]| {
        w.write_record(row).expect("writing to memory cannot fail");
    };
    write(&mut w, &header);
    for id in &ids {
        let mut row = vec![id.clone()];
        row.extend(blanks.iter().cloned());
        write(&mut w, &row);
    }
    let template = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8");
    Ok(IrrSample { ids, template })
}

/// One rater's sheet as uploaded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaterSheet {
    pub rater_id: String,
    pub csv: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Computed {
    pub digest: Digest,
    pub round: IrrRound,
    pub worksheet: String,
}

fn check_known(exp: &Experiment, raters: &[&RaterScores]) -> Result<()> {
    let dataset = exp.dataset()?;
    let known: BTreeSet<&str> = dataset.ids().collect();
    for r in raters {
        if let Some(id) = r.response_ids().into_iter().find(|id| !known.contains(id)) {
            return Err(IrrError::UnknownResponse(id.to_string()).into());
        }
    }
    Ok(())
}

/// Scores a round from two rater sheets and persists it, gate pass or not.
pub fn compute(
    exp: &Experiment,
    a: RaterSheet,
    b: RaterSheet,
    threshold: Option<f64>,
    expected: Option<&Digest>,
) -> Result<Computed> {
    let config = exp.config()?;
    let rubric = &config.rubric;
    let rater_a = read_rater_csv(&a.rater_id, &a.csv, rubric)?;
    let rater_b = read_rater_csv(&b.rater_id, &b.csv, rubric)?;
    check_known(exp, &[&rater_a, &rater_b])?;
    let mut w = lock(exp, expected)?;
    let index = exp.entries(RecordKind::IrrRound)?.len() as u32 + 1;
    let round = compute_round(index, rater_a, rater_b, rubric, threshold.unwrap_or(IRR_THRESHOLD))?;
    let digest = w.append(RecordKind::IrrRound, &format!("round-{index}"), &round, None)?;
    Ok(Computed {
        digest,
        worksheet: write_worksheet(&round, &[]),
        round,
    })
}

/// Consensus decisions collected so far for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSet {
    pub round: Digest,
    pub records: Vec<ConsensusRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrrView {
    pub round_digest: Digest,
    pub round: IrrRound,
    pub resolved: bool,
    pub consensus: Vec<ConsensusRecord>,
    /// Disagreements still lacking a consensus value.
    pub uncovered: Vec<(String, String)>,
    pub can_advance: bool,
    pub worksheet: String,
}

fn latest_round(exp: &Experiment) -> Result<(ManifestEntry, IrrRound)> {
    let entry = exp
        .latest(RecordKind::IrrRound)?
        .ok_or_else(|| invalid("no IRR round yet; run `irr compute` first"))?;
    let round = exp.load(RecordKind::IrrRound, &entry.digest)?;
    Ok((entry, round))
}

fn consensus_for(exp: &Experiment, round: &Digest) -> Result<Vec<ConsensusRecord>> {
    for entry in exp.entries(RecordKind::Consensus)?.into_iter().rev() {
        let set: ConsensusSet = exp.load(RecordKind::Consensus, &entry.digest)?;
        if &set.round == round {
            return Ok(set.records);
        }
    }
    Ok(Vec::new())
}

pub fn view(exp: &Experiment) -> Result<IrrView> {
    let (entry, round) = latest_round(exp)?;
    let consensus = consensus_for(exp, &entry.digest)?;
    let open = uncovered(&round, &consensus);
    let resolved = entry.label.ends_with(RESOLVED_SUFFIX);
    Ok(IrrView {
        worksheet: write_worksheet(&round, &consensus),
        can_advance: round.passed && open.is_empty() && !resolved,
        round_digest: entry.digest,
        resolved,
        uncovered: open,
        consensus,
        round,
    })
}

/// Adds or replaces consensus decisions for the latest round. Partial
/// submissions are kept so disagreements can be resolved one at a time.
pub fn submit_consensus(
    exp: &Experiment,
    records: Vec<ConsensusRecord>,
    expected: Option<&Digest>,
) -> Result<IrrView> {
    let mut w = lock(exp, expected)?;
    let (entry, round) = latest_round(exp)?;
    let disputed: BTreeSet<(&str, &str)> = round
        .disagreements
        .iter()
        .map(|d| (d.response_id.as_str(), d.subscore.as_str()))
        .collect();
    let mut incoming = BTreeSet::new();
    for r in &records {
        r.validate()?;
        let key = (r.response_id.as_str(), r.subscore.as_str());
        if !disputed.contains(&key) {
            return Err(IrrError::UnmatchedConsensus {
                response_id: r.response_id.clone(),
                subscore: r.subscore.clone(),
            }
            .into());
        }
        if !incoming.insert(key) {
            return Err(IrrError::DuplicateConsensus {
                response_id: r.response_id.clone(),
                subscore: r.subscore.clone(),
            }
            .into());
        }
    }
    let mut merged: BTreeMap<(String, String), ConsensusRecord> = consensus_for(exp, &entry.digest)?
        .into_iter()
        .map(|r| ((r.response_id.clone(), r.subscore.clone()), r))
        .collect();
    for r in records {
        merged.insert((r.response_id.clone(), r.subscore.clone()), r);
    }
    let set = ConsensusSet {
        round: entry.digest.clone(),
        records: merged.into_values().collect(),
    };
    w.append(RecordKind::Consensus, &entry.label, &set, None)?;
    drop(w);
    view(exp)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrrAdvanced {
    /// The round recomputed with consensus values applied to both raters.
    pub resolved_round: Digest,
    pub exemplars_digest: Digest,
    pub exemplars: Vec<CotExemplar>,
}

fn apply_consensus(rater: &RaterScores, consensus: &[ConsensusRecord]) -> Result<RaterScores> {
    let mut scores: Vec<ScoreVector> = rater.scores.clone();
    for v in &mut scores {
        let mut values = v.by_subscore.clone();
        for c in consensus.iter().filter(|c| c.response_id == v.response_id) {
            values.insert(c.subscore.clone(), c.resolved_value);
        }
        *v = ScoreVector::from_scores(v.response_id.clone(), values);
    }
    Ok(RaterScores::new(rater.rater_id.clone(), scores).map_err(IrrError::from)?)
}

/// Closes the latest round: every disagreement needs consensus and the gate
/// must have passed. Emits the round's exemplars.
pub fn advance(
    exp: &Experiment,
    drafts: BTreeMap<String, BTreeMap<String, String>>,
    expected: Option<&Digest>,
) -> Result<IrrAdvanced> {
    let mut w = lock(exp, expected)?;
    let config = exp.config()?;
    let dataset = exp.dataset()?;
    let (entry, round) = latest_round(exp)?;
    if entry.label.ends_with(RESOLVED_SUFFIX) {
        return Err(invalid(format!("{} is already resolved", entry.label)));
    }
    if !round.passed {
        return Err(OpsError::GateFailed {
            failing: round.failing_subscores().into_iter().map(|(s, k)| (s.to_string(), k)).collect(),
            threshold: round.threshold,
        });
    }
    let consensus = consensus_for(exp, &entry.digest)?;
    let exemplars = emit_exemplars(&round, &consensus, &dataset.responses, &drafts)?;
    let resolved = compute_round(
        round.round_index + 1,
        apply_consensus(&round.rater_a, &consensus)?,
        apply_consensus(&round.rater_b, &consensus)?,
        &config.rubric,
        round.threshold,
    )?;
    let label = format!("round-{}{RESOLVED_SUFFIX}", round.round_index + 1);
    let resolved_round = w.append(RecordKind::IrrRound, &label, &resolved, None)?;
    let exemplars_digest = w.append(RecordKind::Exemplars, &entry.label, &exemplars, None)?;
    Ok(IrrAdvanced {
        resolved_round,
        exemplars_digest,
        exemplars,
    })
}
