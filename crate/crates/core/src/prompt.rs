//! Persona-pattern prompt rendering with balanced few-shot exemplars.
//!
//! A prompt is rendered once per [`PromptSpec`] with a slot where the response
//! under evaluation goes; [`PromptText::fill`] produces the per-response prompt.
//! Rendering is byte-deterministic: equal specs give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::Digest;
use crate::model::{validate_score_vector, CotExemplar, Rubric, ScoreVector, StudentResponse};

/// Starts every few-shot exemplar block. Zero-shot prompts never contain it.
pub const EXEMPLAR_DELIMITER: &str = "=== EXAMPLE";
pub const TARGET_HEADER: &str = "=== RESPONSE TO SCORE ===";
pub const RESPONSE_SLOT: &str = "{{STUDENT_RESPONSE}}";

pub const DEFAULT_PERSONA: &str = "You are a middle school science teacher scoring your students' answers to a formative assessment question. \
Read each student response carefully and score it with the rubric below. Award a subscore only when the response meets its criterion.";

pub const DEFAULT_FORMAT_COT: &str = "Respond in exactly this format so that your scores can be parsed. \
For each subscore, in the order {subscore_list}, write one line `SUBSCORE <name>: <0 or 1>` followed by one line \
`REASONING: <quote the evidence in the student's response, state what the rubric requires, then state the score>`. \
After the last subscore write one line `TOTAL: <sum of the subscores>`. Write nothing after the TOTAL line.";

pub const DEFAULT_FORMAT_SCORES: &str = "Respond in exactly this format so that your scores can be parsed. \
For each subscore, in the order {subscore_list}, write one line `SUBSCORE <name>: <0 or 1>`. \
After the last subscore write one line `TOTAL: <sum of the subscores>`. Write nothing after the TOTAL line.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    ZeroShot,
    FewShot,
    FewShotCot,
}

impl PromptMode {
    pub fn default_format(self) -> &'static str {
        match self {
            PromptMode::FewShotCot => DEFAULT_FORMAT_COT,
            PromptMode::ZeroShot | PromptMode::FewShot => DEFAULT_FORMAT_SCORES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub rubric: Rubric,
    pub persona_preamble: String,
    pub exemplars: Vec<CotExemplar>,
    pub mode: PromptMode,
    pub format_instructions: String,
    /// Render even when [`check_balance`] is not satisfied.
    #[serde(default)]
    pub allow_unbalanced: bool,
}

impl PromptSpec {
    /// Spec with the default persona and the mode's default format block.
    pub fn new(rubric: Rubric, mode: PromptMode, exemplars: Vec<CotExemplar>) -> Self {
        Self {
            rubric,
            persona_preamble: DEFAULT_PERSONA.to_string(),
            exemplars,
            mode,
            format_instructions: mode.default_format().to_string(),
            allow_unbalanced: false,
        }
    }

    pub fn digest(&self) -> Digest {
        Digest::of_json(self)
    }

    pub fn exemplar_ids(&self) -> impl Iterator<Item = &str> {
        self.exemplars.iter().map(|e| e.response.id.as_str())
    }
}

/// Rendered prompt text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptText(String);

impl PromptText {
    pub fn new(text: impl Into<String>) -> Self {
        Self(text.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn digest(&self) -> Digest {
        Digest::of_bytes(self.0.as_bytes())
    }

    /// Substitutes the response under evaluation into the slot.
    pub fn fill(&self, response: &StudentResponse) -> PromptText {
        match self.0.rfind(RESPONSE_SLOT) {
            Some(at) => {
                let mut out = String::with_capacity(self.0.len() + response.text.len());
                out.push_str(&self.0[..at]);
                out.push_str(&response.text);
                out.push_str(&self.0[at + RESPONSE_SLOT.len()..]);
                PromptText(out)
            }
            None => self.clone(),
        }
    }

    /// Text of the response under evaluation in a filled prompt.
    pub fn target_response(&self) -> Option<&str> {
        let header = format!("{TARGET_HEADER}\nStudent response:\n");
        let start = self.0.rfind(&header)? + header.len();
        let rest = &self.0[start..];
        let end = rest.rfind("\n\nScoring:").unwrap_or(rest.len());
        Some(&rest[..end])
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl std::fmt::Display for PromptText {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PromptError {
    #[error("prompt is unbalanced: {}", .0.violations.join("; "))]
    Unbalanced(BalanceReport),
    #[error("exemplar {response_id} has no reasoning for subscore {subscore}")]
    MissingReasoning { response_id: String, subscore: String },
    #[error("zero-shot prompts cannot carry exemplars ({0} given)")]
    ExemplarsInZeroShot(usize),
    #[error("exemplar {response_id} does not fit the rubric: {reason}")]
    InvalidExemplar { response_id: String, reason: String },
    #[error("prompt needs about {estimate} tokens, budget is {budget}")]
    BudgetExceeded { estimate: usize, budget: usize },
    #[error("could not read template {path}: {reason}")]
    Template { path: String, reason: String },
}

/// Loads a persona or format template from a UTF-8 text file.
pub fn load_template(path: &Path) -> Result<String, PromptError> {
    std::fs::read_to_string(path).map_err(|e| PromptError::Template {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn rubric_listing(rubric: &Rubric) -> String {
    let mut out = String::new();
    for s in &rubric.subscores {
        let _ = writeln!(out, "- {} ({}, 1 point): {}", s.name, s.kind, s.criteria.trim());
    }
    out.truncate(out.trim_end().len());
    out
}

fn substitute(template: &str, rubric: &Rubric) -> String {
    let names: Vec<&str> = rubric.subscore_names().collect();
    template
        .replace("{question}", rubric.question_text.trim())
        .replace("{rubric}", &rubric_listing(rubric))
        .replace("{subscore_list}", &names.join(", "))
}

/// Collapses whitespace so a reasoning paragraph occupies one line.
fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn score_lines(gold: &ScoreVector, rubric: &Rubric, reasoning: Option<&BTreeMap<String, String>>) -> String {
    let mut out = String::new();
    for name in rubric.subscore_names() {
        let value = gold.get(name).unwrap_or(0);
        let _ = writeln!(out, "SUBSCORE {name}: {value}");
        if let Some(reasoning) = reasoning {
            let text = reasoning.get(name).map(|t| one_line(t)).unwrap_or_default();
            let _ = writeln!(out, "REASONING: {text}");
        }
    }
    let _ = write!(out, "TOTAL: {}", crate::model::total_of(gold));
    out
}

/// Score block with one reasoning paragraph per subscore in rubric order,
/// in the same grammar the model is asked to emit.
pub fn render_cot_block(exemplar: &CotExemplar, rubric: &Rubric) -> Result<String, PromptError> {
    if let Some(missing) = exemplar.missing_reasoning(rubric).first() {
        return Err(PromptError::MissingReasoning {
            response_id: exemplar.response.id.clone(),
            subscore: missing.to_string(),
        });
    }
    Ok(score_lines(&exemplar.gold, rubric, Some(&exemplar.reasoning)))
}

/// Score lines only, as used by the scores-only few-shot baseline.
pub fn render_score_block(gold: &ScoreVector, rubric: &Rubric) -> String {
    score_lines(gold, rubric, None)
}

pub fn render_prompt(spec: &PromptSpec) -> Result<PromptText, PromptError> {
    let rubric = &spec.rubric;
    if spec.mode == PromptMode::ZeroShot && !spec.exemplars.is_empty() {
        return Err(PromptError::ExemplarsInZeroShot(spec.exemplars.len()));
    }
    for e in &spec.exemplars {
        if e.response.question_id != rubric.question_id {
            return Err(PromptError::InvalidExemplar {
                response_id: e.response.id.clone(),
                reason: format!("belongs to question {}", e.response.question_id),
            });
        }
        if let Err(v) = validate_score_vector(&e.gold, rubric) {
            return Err(PromptError::InvalidExemplar {
                response_id: e.response.id.clone(),
                reason: v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "),
            });
        }
    }
    if spec.mode != PromptMode::ZeroShot {
        let report = check_balance(&spec.exemplars, rubric);
        if !report.satisfied {
            if spec.allow_unbalanced {
                tracing::warn!(violations = ?report.violations, "rendering unbalanced prompt by override");
            } else {
                return Err(PromptError::Unbalanced(report));
            }
        }
    }

    let mut out = String::new();
    out.push_str(substitute(&spec.persona_preamble, rubric).trim());
    let _ = write!(out, "\n\nQUESTION:\n{}\n\nRUBRIC:\n{}\n\n", rubric.question_text.trim(), rubric_listing(rubric));
    out.push_str(substitute(&spec.format_instructions, rubric).trim());
    out.push_str("\n\n");

    for (i, e) in spec.exemplars.iter().enumerate() {
        let block = match spec.mode {
            PromptMode::FewShotCot => render_cot_block(e, rubric)?,
            _ => render_score_block(&e.gold, rubric),
        };
        let _ = write!(
            out,
            "{EXEMPLAR_DELIMITER} {} ===\nStudent response:\n{}\n\nScoring:\n{block}\n\n",
            i + 1,
            e.response.text
        );
    }
    let _ = write!(out, "{TARGET_HEADER}\nStudent response:\n{RESPONSE_SLOT}\n\nScoring:\n");
    Ok(PromptText(out))
}

/// Characters divided by four, rounded up.
pub fn estimate_tokens(prompt: &str) -> usize {
    prompt.chars().count().div_ceil(4)
}

pub fn check_budget(prompt: &PromptText, budget: usize) -> Result<usize, PromptError> {
    let estimate = estimate_tokens(prompt.as_str());
    if estimate > budget {
        Err(PromptError::BudgetExceeded { estimate, budget })
    } else {
        Ok(estimate)
    }
}

/// Renders and enforces a token budget on the prompt with an empty slot.
pub fn render_prompt_within(spec: &PromptSpec, budget: usize) -> Result<PromptText, PromptError> {
    let prompt = render_prompt(spec)?;
    check_budget(&prompt, budget)?;
    Ok(prompt)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceCount {
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub per_subscore: BTreeMap<String, BalanceCount>,
    pub satisfied: bool,
    pub violations: Vec<String>,
}

/// Every subscore needs at least one positive and one negative exemplar.
pub fn check_balance(exemplars: &[CotExemplar], rubric: &Rubric) -> BalanceReport {
    let golds: Vec<&ScoreVector> = exemplars.iter().map(|e| &e.gold).collect();
    balance_of(&golds, rubric)
}

pub(crate) fn balance_of(golds: &[&ScoreVector], rubric: &Rubric) -> BalanceReport {
    let mut per_subscore = BTreeMap::new();
    let mut violations = Vec::new();
    for name in rubric.subscore_names() {
        let mut count = BalanceCount::default();
        for g in golds {
            match g.get(name) {
                Some(1) => count.positives += 1,
                Some(0) => count.negatives += 1,
                _ => {}
            }
        }
        if count.positives == 0 {
            violations.push(format!("subscore {name} lacks a positive instance"));
        }
        if count.negatives == 0 {
            violations.push(format!("subscore {name} lacks a negative instance"));
        }
        per_subscore.insert(name.to_string(), count);
    }
    BalanceReport {
        satisfied: violations.is_empty(),
        per_subscore,
        violations,
    }
}

/// Target label distribution beyond the one-positive-one-negative minimum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceStrategy {
    #[default]
    MinConstraint,
    Uniform,
    Empirical,
}

/// Decides whether adding exemplars keeps the prompt acceptably balanced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancePolicy {
    pub strategy: BalanceStrategy,
    /// Largest tolerated deviation from the target, in exemplars.
    pub max_skew: f64,
    /// Dataset positive rate per subscore, used by [`BalanceStrategy::Empirical`].
    #[serde(default)]
    pub positive_rates: BTreeMap<String, f64>,
}

impl Default for BalancePolicy {
    fn default() -> Self {
        Self {
            strategy: BalanceStrategy::MinConstraint,
            max_skew: 0.0,
            positive_rates: BTreeMap::new(),
        }
    }
}

impl BalancePolicy {
    pub fn uniform(max_skew: f64) -> Self {
        Self {
            strategy: BalanceStrategy::Uniform,
            max_skew,
            positive_rates: BTreeMap::new(),
        }
    }

    pub fn skew(&self, subscore: &str, count: BalanceCount) -> f64 {
        let pos = count.positives as f64;
        let n = (count.positives + count.negatives) as f64;
        match self.strategy {
            BalanceStrategy::MinConstraint => 0.0,
            BalanceStrategy::Uniform => (pos - n / 2.0).abs() * 2.0,
            BalanceStrategy::Empirical => {
                let rate = self.positive_rates.get(subscore).copied().unwrap_or(0.5);
                (pos - rate * n).abs()
            }
        }
    }

    /// A move is admitted when, for every subscore, the skew afterwards is
    /// within `max_skew` or no worse than before.
    pub fn admits(&self, before: &BalanceReport, after: &BalanceReport) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        for (name, &count_after) in &after.per_subscore {
            let count_before = before.per_subscore.get(name).copied().unwrap_or_default();
            let skew_after = self.skew(name, count_after);
            let skew_before = self.skew(name, count_before);
            if skew_after > self.max_skew + 1e-9 && skew_after > skew_before + 1e-9 {
                problems.push(format!(
                    "subscore {name} would be unbalanced ({} positive, {} negative)",
                    count_after.positives, count_after.negatives
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExemplarSource, Subscore, SubscoreKind};

    fn rubric(names: &[&str]) -> Rubric {
        Rubric::new(
            "q1",
            "What do the different-sized arrows mean?",
            names
                .iter()
                .map(|n| Subscore::new(*n, SubscoreKind::Concept, format!("criterion for {n}")))
                .collect(),
        )
        .unwrap()
    }

    fn exemplar(id: &str, scores: &[(&str, u8)], with_reasoning: bool) -> CotExemplar {
        let gold = ScoreVector::from_scores(id, scores.iter().map(|(k, v)| (*k, *v)));
        let reasoning = if with_reasoning {
            scores
                .iter()
                .map(|(k, v)| (k.to_string(), crate::model::cot_sentence("some words", "criterion", *v)))
                .collect()
        } else {
            BTreeMap::new()
        };
        CotExemplar {
            response: StudentResponse::new(id, "q1", format!("answer {id}")).unwrap(),
            gold,
            reasoning,
            source: ExemplarSource::IrrAgreed,
        }
    }

    #[test]
    fn zero_shot_has_rubric_and_no_examples() {
        let spec = PromptSpec::new(rubric(&["arrow_size"]), PromptMode::ZeroShot, vec![]);
        let p = render_prompt(&spec).unwrap();
        assert!(p.as_str().contains("criterion for arrow_size"));
        assert!(p.as_str().contains("SUBSCORE <name>"));
        assert!(!p.as_str().contains(EXEMPLAR_DELIMITER));
        assert!(p.as_str().contains(RESPONSE_SLOT));
    }

    #[test]
    fn zero_shot_rejects_exemplars() {
        let mut spec = PromptSpec::new(rubric(&["a"]), PromptMode::ZeroShot, vec![]);
        spec.exemplars.push(exemplar("e1", &[("a", 1)], false));
        assert_eq!(render_prompt(&spec), Err(PromptError::ExemplarsInZeroShot(1)));
    }

    #[test]
    fn few_shot_blocks_have_scores_only() {
        let r = rubric(&["a"]);
        let ex = vec![
            exemplar("e1", &[("a", 1)], true),
            exemplar("e2", &[("a", 0)], true),
            exemplar("e3", &[("a", 1)], false),
            exemplar("e4", &[("a", 0)], false),
        ];
        let p = render_prompt(&PromptSpec::new(r, PromptMode::FewShot, ex)).unwrap();
        assert_eq!(p.as_str().matches(EXEMPLAR_DELIMITER).count(), 4);
        assert!(!p.as_str().contains("REASONING:"));
    }

    #[test]
    fn cot_mode_requires_reasoning() {
        let r = rubric(&["a"]);
        let ex = vec![exemplar("e1", &[("a", 1)], true), exemplar("e2", &[("a", 0)], false)];
        assert_eq!(
            render_prompt(&PromptSpec::new(r, PromptMode::FewShotCot, ex)),
            Err(PromptError::MissingReasoning { response_id: "e2".into(), subscore: "a".into() })
        );
    }

    #[test]
    fn rendering_is_deterministic_and_order_sensitive() {
        let r = rubric(&["a", "b"]);
        let ex = vec![
            exemplar("e1", &[("a", 1), ("b", 0)], true),
            exemplar("e2", &[("a", 0), ("b", 1)], true),
        ];
        let spec = PromptSpec::new(r, PromptMode::FewShotCot, ex);
        let first = render_prompt(&spec).unwrap();
        assert_eq!(first, render_prompt(&spec.clone()).unwrap());
        let mut swapped = spec.clone();
        swapped.exemplars.reverse();
        assert_ne!(first, render_prompt(&swapped).unwrap());
        assert_ne!(spec.digest(), swapped.digest());
    }

    #[test]
    fn cot_block_single_subscore() {
        let r = rubric(&["arrow_size"]);
        let e = exemplar("e1", &[("arrow_size", 1)], true);
        let block = render_cot_block(&e, &r).unwrap();
        assert_eq!(block.matches("REASONING:").count(), 1);
        assert!(block.contains("SUBSCORE arrow_size: 1"));
        assert!(block.ends_with("TOTAL: 1"));
    }

    #[test]
    fn cot_block_follows_rubric_order() {
        let r = rubric(&["rd", "rd_r", "as", "as_r"]);
        let e = exemplar("e1", &[("as", 1), ("as_r", 0), ("rd", 1), ("rd_r", 1)], true);
        let block = render_cot_block(&e, &r).unwrap();
        let pos: Vec<usize> = ["SUBSCORE rd:", "SUBSCORE rd_r:", "SUBSCORE as:", "SUBSCORE as_r:"]
            .iter()
            .map(|needle| block.find(needle).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(block.matches("REASONING:").count(), 4);
    }

    #[test]
    fn multiline_reasoning_is_flattened() {
        let r = rubric(&["a"]);
        let mut e = exemplar("e1", &[("a", 1)], true);
        e.reasoning.insert("a".into(), "line one\nSUBSCORE a: 0\n line three".into());
        let block = render_cot_block(&e, &r).unwrap();
        assert_eq!(block.lines().count(), 3);
    }

    #[test]
    fn balance_examples() {
        let r = rubric(&["a"]);
        let ok = check_balance(&[exemplar("1", &[("a", 1)], false), exemplar("2", &[("a", 0)], false)], &r);
        assert!(ok.satisfied);
        let bad = check_balance(&[exemplar("1", &[("a", 1)], false), exemplar("2", &[("a", 1)], false)], &r);
        assert!(!bad.satisfied);
        assert_eq!(bad.violations, vec!["subscore a lacks a negative instance".to_string()]);
    }

    #[test]
    fn five_exemplars_cover_four_subscores() {
        let r = rubric(&["ad", "ad_r", "as", "as_r"]);
        let ex = vec![
            exemplar("1", &[("ad", 1), ("ad_r", 1), ("as", 0), ("as_r", 0)], false),
            exemplar("2", &[("ad", 0), ("ad_r", 0), ("as", 1), ("as_r", 1)], false),
            exemplar("3", &[("ad", 1), ("ad_r", 0), ("as", 1), ("as_r", 0)], false),
            exemplar("4", &[("ad", 0), ("ad_r", 0), ("as", 0), ("as_r", 0)], false),
            exemplar("5", &[("ad", 1), ("ad_r", 1), ("as", 1), ("as_r", 1)], false),
        ];
        assert!(check_balance(&ex, &r).satisfied);
    }

    #[test]
    fn unbalanced_needs_override() {
        let r = rubric(&["a"]);
        let ex = vec![exemplar("1", &[("a", 1)], false)];
        let mut spec = PromptSpec::new(r, PromptMode::FewShot, ex);
        assert!(matches!(render_prompt(&spec), Err(PromptError::Unbalanced(_))));
        spec.allow_unbalanced = true;
        assert!(render_prompt(&spec).is_ok());
    }

    #[test]
    fn balance_is_additive() {
        let r = rubric(&["a", "b"]);
        let base = vec![exemplar("1", &[("a", 1), ("b", 0)], false)];
        let x = exemplar("2", &[("a", 1), ("b", 1)], false);
        let before = check_balance(&base, &r);
        let mut more = base.clone();
        more.push(x);
        let after = check_balance(&more, &r);
        assert_eq!(after.per_subscore["a"].positives, before.per_subscore["a"].positives + 1);
        assert_eq!(after.per_subscore["b"].positives, before.per_subscore["b"].positives + 1);
        assert_eq!(after.per_subscore["b"].negatives, before.per_subscore["b"].negatives);
    }

    #[test]
    fn token_estimates() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens(&"x".repeat(400)), 100);
        assert_eq!(estimate_tokens("abcde"), 2);
        let long = PromptText::new("y".repeat(8200 * 4));
        assert_eq!(
            check_budget(&long, 8000),
            Err(PromptError::BudgetExceeded { estimate: 8200, budget: 8000 })
        );
    }

    #[test]
    fn fill_and_extract_target() {
        let spec = PromptSpec::new(rubric(&["a"]), PromptMode::ZeroShot, vec![]);
        let p = render_prompt(&spec).unwrap();
        let resp = StudentResponse::new("r9", "q1", "the big arrow is more water").unwrap();
        let filled = p.fill(&resp);
        assert!(!filled.as_str().contains(RESPONSE_SLOT));
        assert_eq!(filled.target_response(), Some("the big arrow is more water"));
    }

    #[test]
    fn template_slots() {
        let mut spec = PromptSpec::new(rubric(&["a", "b"]), PromptMode::ZeroShot, vec![]);
        spec.persona_preamble = "Teacher for: {question}\n{rubric}".into();
        spec.format_instructions = "Order: {subscore_list}".into();
        let p = render_prompt(&spec).unwrap();
        assert!(p.as_str().starts_with("Teacher for: What do the different-sized arrows mean?\n- a (concept"));
        assert!(p.as_str().contains("Order: a, b"));
    }

    #[test]
    fn uniform_policy_blocks_growing_skew() {
        let r = rubric(&["a", "b"]);
        let base = vec![
            exemplar("1", &[("a", 1), ("b", 1)], false),
            exemplar("2", &[("a", 0), ("b", 0)], false),
        ];
        let before = check_balance(&base, &r);
        let mut more = base.clone();
        more.push(exemplar("3", &[("a", 1), ("b", 1)], false));
        let after = check_balance(&more, &r);
        let policy = BalancePolicy::uniform(0.0);
        let err = policy.admits(&before, &after).unwrap_err();
        assert_eq!(err.len(), 2);
        assert!(BalancePolicy::uniform(1.0).admits(&before, &after).is_ok());
        assert!(BalancePolicy::default().admits(&before, &after).is_ok());
    }
}
