//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is plain data: construction validates, nothing does I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::error::ModelError;

/// Upper bound on rubric size.
pub const MAX_SUBSCORES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubscoreKind {
    Concept,
    Reasoning,
}

impl fmt::Display for SubscoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubscoreKind::Concept => f.write_str("concept"),
            SubscoreKind::Reasoning => f.write_str("reasoning"),
        }
    }
}

fn one_point() -> u8 {
    1
}

/// A single binary rubric item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscore {
    pub name: String,
    pub kind: SubscoreKind,
    pub criteria: String,
    #[serde(default = "one_point")]
    pub points: u8,
}

impl Subscore {
    pub fn new(name: impl Into<String>, kind: SubscoreKind, criteria: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind,
            criteria: criteria.into(),
            points: 1,
        }
    }
}

#[derive(Deserialize)]
struct RubricDef {
    question_id: String,
    question_text: String,
    subscores: Vec<Subscore>,
    #[serde(default)]
    max_total: Option<u32>,
}

impl TryFrom<RubricDef> for Rubric {
    type Error = ModelError;

    fn try_from(def: RubricDef) -> Result<Self, Self::Error> {
        let rubric = Rubric::new(def.question_id, def.question_text, def.subscores)?;
        if let Some(declared) = def.max_total {
            if declared != rubric.max_total {
                return Err(ModelError::InvalidRubric(format!(
                    "max_total {declared} does not match {} subscores",
                    rubric.max_total
                )));
            }
        }
        Ok(rubric)
    }
}

/// The scoring contract for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RubricDef")]
pub struct Rubric {
    pub question_id: String,
    pub question_text: String,
    pub subscores: Vec<Subscore>,
    pub max_total: u32,
}

impl Rubric {
    pub fn new(
        question_id: impl Into<String>,
        question_text: impl Into<String>,
        subscores: Vec<Subscore>,
    ) -> Result<Self, ModelError> {
        let question_id = question_id.into();
        if question_id.trim().is_empty() {
            return Err(ModelError::InvalidRubric("empty question id".into()));
        }
        if subscores.is_empty() || subscores.len() > MAX_SUBSCORES {
            return Err(ModelError::InvalidRubric(format!(
                "a rubric needs between 1 and {MAX_SUBSCORES} subscores, got {}",
                subscores.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for s in &subscores {
            if s.points != 1 {
                return Err(ModelError::InvalidRubric(format!(
                    "subscore {} awards {} points; only binary subscores are supported",
                    s.name, s.points
                )));
            }
            if s.name.trim().is_empty() {
                return Err(ModelError::InvalidRubric("empty subscore name".into()));
            }
            if !seen.insert(fold_name(&s.name)) {
                return Err(ModelError::InvalidRubric(format!(
                    "duplicate subscore name {}",
                    s.name
                )));
            }
        }
        let max_total = subscores.len() as u32;
        Ok(Self {
            question_id,
            question_text: question_text.into(),
            subscores,
            max_total,
        })
    }

    pub fn subscore_names(&self) -> impl Iterator<Item = &str> {
        self.subscores.iter().map(|s| s.name.as_str())
    }

    pub fn subscore(&self, name: &str) -> Option<&Subscore> {
        self.subscores.iter().find(|s| s.name == name)
    }

    /// Resolves a name as written by a model or a human to the rubric's
    /// canonical spelling (case-insensitive, spaces folded to underscores).
    pub fn resolve_name(&self, raw: &str) -> Option<&str> {
        let folded = fold_name(raw);
        self.subscores
            .iter()
            .find(|s| fold_name(&s.name) == folded)
            .map(|s| s.name.as_str())
    }
}

/// Lowercase and fold runs of whitespace to a single underscore.
pub fn fold_name(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
        .to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StudentResponse {
    pub id: String,
    pub question_id: String,
    pub text: String,
}

impl StudentResponse {
    /// Trims outer whitespace only; spelling and casing are kept verbatim.
    pub fn new(
        id: impl Into<String>,
        question_id: impl Into<String>,
        text: impl AsRef<str>,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        let text = text.as_ref().trim().to_string();
        if id.trim().is_empty() {
            return Err(ModelError::InvalidResponse {
                id,
                reason: "empty id".into(),
            });
        }
        if text.is_empty() {
            return Err(ModelError::InvalidResponse {
                id,
                reason: "response text is empty".into(),
            });
        }
        Ok(Self {
            id,
            question_id: question_id.into(),
            text,
        })
    }
}

/// Binary subscore assignments for one response.
///
/// `total` is carried for serialization and cross-checking but the subscore
/// values are authoritative.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreVector {
    pub response_id: String,
    pub by_subscore: BTreeMap<String, u8>,
    pub total: u32,
}

impl ScoreVector {
    /// Builds a vector whose total is derived from the values.
    pub fn from_scores<I, K>(response_id: impl Into<String>, scores: I) -> Self
    where
        I: IntoIterator<Item = (K, u8)>,
        K: Into<String>,
    {
        let by_subscore: BTreeMap<String, u8> =
            scores.into_iter().map(|(k, v)| (k.into(), v)).collect();
        let total = by_subscore.values().map(|&v| u32::from(v)).sum();
        Self {
            response_id: response_id.into(),
            by_subscore,
            total,
        }
    }

    pub fn get(&self, subscore: &str) -> Option<u8> {
        self.by_subscore.get(subscore).copied()
    }
}

/// Sum of the binary subscores.
pub fn total_of(v: &ScoreVector) -> u32 {
    v.by_subscore.values().map(|&x| u32::from(x)).sum()
}

/// One broken invariant of a [`ScoreVector`] against a [`Rubric`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    MissingSubscore { subscore: String },
    ExtraSubscore { subscore: String },
    NonBinary { subscore: String, value: u8 },
    TotalMismatch { declared: u32, sum: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingSubscore { subscore } => write!(f, "missing subscore {subscore}"),
            Violation::ExtraSubscore { subscore } => write!(f, "unknown subscore {subscore}"),
            Violation::NonBinary { subscore, value } => {
                write!(f, "non-binary value {value} for subscore {subscore}")
            }
            Violation::TotalMismatch { declared, sum } => {
                write!(f, "total mismatch: declared {declared}, sum {sum}")
            }
        }
    }
}

/// Returns every violation; an empty list means the vector is valid.
pub fn validate_score_vector(v: &ScoreVector, rubric: &Rubric) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    for name in rubric.subscore_names() {
        if !v.by_subscore.contains_key(name) {
            violations.push(Violation::MissingSubscore {
                subscore: name.to_string(),
            });
        }
    }
    for (name, &value) in &v.by_subscore {
        if rubric.subscore(name).is_none() {
            violations.push(Violation::ExtraSubscore {
                subscore: name.clone(),
            });
        }
        if value > 1 {
            violations.push(Violation::NonBinary {
                subscore: name.clone(),
                value,
            });
        }
    }
    let sum = total_of(v);
    if sum != v.total {
        violations.push(Violation::TotalMismatch {
            declared: v.total,
            sum,
        });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// All scores one human rater assigned over a sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterScores {
    pub rater_id: String,
    pub scores: Vec<ScoreVector>,
}

impl RaterScores {
    pub fn new(rater_id: impl Into<String>, scores: Vec<ScoreVector>) -> Result<Self, ModelError> {
        let rater_id = rater_id.into();
        let mut seen = BTreeSet::new();
        for s in &scores {
            if !seen.insert(s.response_id.as_str()) {
                return Err(ModelError::DuplicateId(format!(
                    "rater {rater_id} scored response {} twice",
                    s.response_id
                )));
            }
        }
        Ok(Self { rater_id, scores })
    }

    pub fn response_ids(&self) -> BTreeSet<&str> {
        self.scores.iter().map(|s| s.response_id.as_str()).collect()
    }

    pub fn by_id(&self) -> BTreeMap<&str, &ScoreVector> {
        self.scores
            .iter()
            .map(|s| (s.response_id.as_str(), s))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarSource {
    IrrAgreed,
    IrrDisagreedConsensus,
    ActiveLearning,
}

/// A labeled response with per-subscore reasoning for the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CotExemplar {
    pub response: StudentResponse,
    pub gold: ScoreVector,
    #[serde(default)]
    pub reasoning: BTreeMap<String, String>,
    pub source: ExemplarSource,
}

impl CotExemplar {
    pub fn id(&self) -> &str {
        &self.response.id
    }

    /// Subscores of `rubric` with absent or blank reasoning, in rubric order.
    pub fn missing_reasoning<'r>(&self, rubric: &'r Rubric) -> Vec<&'r str> {
        rubric
            .subscore_names()
            .filter(|name| {
                self.reasoning
                    .get(*name)
                    .is_none_or(|text| text.trim().is_empty())
            })
            .collect()
    }
}

/// Builds one reasoning chain in the evidence, rubric reference, verdict order.
pub fn cot_sentence(evidence: &str, rubric_reference: &str, score: u8) -> String {
    format!(
        "The student says \"{}\". The rubric states \"{}\". Based on the rubric, the student earned a score of {}.",
        evidence.trim(),
        rubric_reference.trim(),
        score
    )
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u32,
    pub completion: u32,
}

/// Raw model output, kept verbatim for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub prompt_hash: Digest,
    pub raw_text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub token_usage: TokenUsage,
    #[serde(default = "one_attempt")]
    pub attempts: u32,
}

fn one_attempt() -> u32 {
    1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rubric(names: &[&str]) -> Rubric {
        Rubric::new(
            "q",
            "question",
            names
                .iter()
                .map(|n| Subscore::new(*n, SubscoreKind::Concept, format!("criteria {n}")))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_subscore_vector_is_valid() {
        let v = ScoreVector::from_scores("r1", [("a", 1)]);
        assert_eq!(validate_score_vector(&v, &rubric(&["a"])), Ok(()));
    }

    #[test]
    fn declared_total_is_checked() {
        let mut v = ScoreVector::from_scores("r1", [("a", 1), ("b", 0)]);
        v.total = 2;
        let err = validate_score_vector(&v, &rubric(&["a", "b"])).unwrap_err();
        assert_eq!(err.len(), 1);
        assert_eq!(err[0].to_string(), "total mismatch: declared 2, sum 1");
    }

    #[test]
    fn missing_subscore_is_reported() {
        let v = ScoreVector::from_scores("r1", [("a", 1)]);
        let err = validate_score_vector(&v, &rubric(&["a", "b"])).unwrap_err();
        assert_eq!(err[0].to_string(), "missing subscore b");
    }

    #[test]
    fn extra_and_non_binary_are_reported_together() {
        let v = ScoreVector::from_scores("r1", [("a", 2), ("z", 0)]);
        let err = validate_score_vector(&v, &rubric(&["a"])).unwrap_err();
        assert!(err.contains(&Violation::ExtraSubscore { subscore: "z".into() }));
        assert!(err.contains(&Violation::NonBinary { subscore: "a".into(), value: 2 }));
    }

    #[test]
    fn totals() {
        let v = ScoreVector::from_scores("r", [("concept", 1), ("reasoning", 0)]);
        assert_eq!(total_of(&v), 1);
        let empty = ScoreVector::from_scores("r", Vec::<(String, u8)>::new());
        assert_eq!(total_of(&empty), 0);
        let q3 = ScoreVector::from_scores("r", [("rd", 1), ("rd_r", 1), ("as", 1), ("as_r", 0)]);
        assert_eq!(total_of(&q3), 3);
    }

    #[test]
    fn rubric_limits() {
        assert!(Rubric::new("q", "t", vec![]).is_err());
        let nine: Vec<_> = (0..9)
            .map(|i| Subscore::new(format!("s{i}"), SubscoreKind::Concept, "c"))
            .collect();
        assert!(Rubric::new("q", "t", nine).is_err());
        let dup = vec![
            Subscore::new("Arrow Size", SubscoreKind::Concept, "c"),
            Subscore::new("arrow_size", SubscoreKind::Reasoning, "c"),
        ];
        assert!(Rubric::new("q", "t", dup).is_err());
        let mut heavy = Subscore::new("a", SubscoreKind::Concept, "c");
        heavy.points = 2;
        assert!(Rubric::new("q", "t", vec![heavy]).is_err());
    }

    #[test]
    fn rubric_deserialization_validates() {
        let ok = r#"{"question_id":"q1","question_text":"t","subscores":[{"name":"a","kind":"concept","criteria":"c"}]}"#;
        let r: Rubric = serde_json::from_str(ok).unwrap();
        assert_eq!(r.max_total, 1);
        let bad = r#"{"question_id":"q1","question_text":"t","subscores":[{"name":"a","kind":"concept","criteria":"c"}],"max_total":3}"#;
        assert!(serde_json::from_str::<Rubric>(bad).is_err());
    }

    #[test]
    fn name_resolution_folds_case_and_spaces() {
        let r = rubric(&["arrow_size", "runoff_direction"]);
        assert_eq!(r.resolve_name("Arrow Size"), Some("arrow_size"));
        assert_eq!(r.resolve_name("RUNOFF   direction"), Some("runoff_direction"));
        assert_eq!(r.resolve_name("arrow"), None);
    }

    #[test]
    fn response_text_keeps_internal_spelling() {
        let r = StudentResponse::new("r1", "q", "  the run off goes Down  ").unwrap();
        assert_eq!(r.text, "the run off goes Down");
        assert!(StudentResponse::new("r2", "q", "   \n").is_err());
    }

    #[test]
    fn cot_sentence_follows_template_order() {
        let s = cot_sentence("arrows show amounts", "size shows quantity", 1);
        let evidence = s.find("The student says").unwrap();
        let rubric = s.find("The rubric states").unwrap();
        let verdict = s.find("earned a score of 1").unwrap();
        assert!(evidence < rubric && rubric < verdict);
    }

    #[test]
    fn duplicate_rater_entries_rejected() {
        let v = ScoreVector::from_scores("r1", [("a", 1)]);
        assert!(RaterScores::new("alice", vec![v.clone(), v]).is_err());
    }

    proptest! {
        #[test]
        fn total_ignores_insertion_order(values in proptest::collection::vec(0u8..=1, 1..8)) {
            let pairs: Vec<(String, u8)> =
                values.iter().enumerate().map(|(i, v)| (format!("s{i}"), *v)).collect();
            let forward = ScoreVector::from_scores("r", pairs.clone());
            let backward = ScoreVector::from_scores("r", pairs.into_iter().rev());
            prop_assert_eq!(total_of(&forward), total_of(&backward));
            prop_assert_eq!(forward, backward);
        }

        #[test]
        fn score_vector_json_round_trip(values in proptest::collection::vec(0u8..=1, 0..8)) {
            let v = ScoreVector::from_scores(
                "r",
                values.iter().enumerate().map(|(i, v)| (format!("s{i}"), *v)),
            );
            let back: ScoreVector = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
