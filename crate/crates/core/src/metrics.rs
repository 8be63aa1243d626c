//! Agreement and classification metrics.
//!
//! Labels are small non-negative integers: `0`/`1` for subscores, `0..=max_total`
//! for totals. Every metric is computed in `f64`; rounding happens only when a
//! report is rendered.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::MetricError;
use crate::model::{Rubric, ScoreVector};

pub type Label = u32;

fn check_pairs(a: &[Label], b: &[Label]) -> Result<usize, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(a.len())
}

/// Exact-match fraction.
pub fn accuracy(pred: &[Label], gold: &[Label]) -> Result<f64, MetricError> {
    let n = check_pairs(pred, gold)?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / n as f64)
}

fn ratio_or_zero(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 for every class seen in either list. A 0/0 precision or recall counts
/// as zero, and so does an F1 whose precision and recall are both zero.
pub fn per_class_f1(pred: &[Label], gold: &[Label]) -> Result<BTreeMap<Label, f64>, MetricError> {
    check_pairs(pred, gold)?;
    let classes: BTreeSet<Label> = pred.iter().chain(gold).copied().collect();
    Ok(classes
        .into_iter()
        .map(|class| {
            let mut tp = 0;
            let mut fp = 0;
            let mut fn_ = 0;
            for (&p, &g) in pred.iter().zip(gold) {
                match (p == class, g == class) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let precision = ratio_or_zero(tp, tp + fp);
            let recall = ratio_or_zero(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            (class, f1)
        })
        .collect())
}

/// Unweighted mean of per-class F1 over the classes in `gold ∪ pred`.
pub fn macro_f1(pred: &[Label], gold: &[Label]) -> Result<f64, MetricError> {
    let per_class = per_class_f1(pred, gold)?;
    Ok(per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// Unweighted Cohen's kappa. When chance agreement is 1 (both raters constant
/// on the same label) the result is 1.0 for perfect observed agreement and
/// 0.0 otherwise.
pub fn cohen_kappa(a: &[Label], b: &[Label]) -> Result<f64, MetricError> {
    let n = check_pairs(a, b)? as f64;
    let mut count_a: BTreeMap<Label, usize> = BTreeMap::new();
    let mut count_b: BTreeMap<Label, usize> = BTreeMap::new();
    let mut agree = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        *count_a.entry(x).or_default() += 1;
        *count_b.entry(y).or_default() += 1;
        if x == y {
            agree += 1;
        }
    }
    let observed = agree as f64 / n;
    let expected: f64 = count_a
        .iter()
        .filter_map(|(label, &ca)| count_b.get(label).map(|&cb| (ca as f64 / n) * (cb as f64 / n)))
        .sum();
    Ok(degenerate_or(observed, expected, |o, e| (o - e) / (1.0 - e)))
}

fn degenerate_or(observed: f64, expected: f64, f: impl Fn(f64, f64) -> f64) -> f64 {
    if expected >= 1.0 {
        if observed >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        f(observed, expected)
    }
}

/// Quadratic weighted kappa over the explicit label range
/// `[label_min, label_max]`.
///
/// `1 - Σ w·O / Σ w·E` with `w_ij = (i - j)² / (k - 1)²`, `O` the observed
/// joint proportions and `E` the outer product of the two marginals.
pub fn quadratic_weighted_kappa(
    a: &[Label],
    b: &[Label],
    label_min: Label,
    label_max: Label,
) -> Result<f64, MetricError> {
    let n = check_pairs(a, b)?;
    if label_max < label_min {
        return Err(MetricError::InvalidRange {
            min: label_min,
            max: label_max,
        });
    }
    for &label in a.iter().chain(b) {
        if label < label_min || label > label_max {
            return Err(MetricError::LabelOutOfRange {
                label,
                min: label_min,
                max: label_max,
            });
        }
    }
    let k = (label_max - label_min + 1) as usize;
    if k == 1 {
        // every label is identical
        return Ok(1.0);
    }

    let mut observed = vec![vec![0.0f64; k]; k];
    let mut hist_a = vec![0.0f64; k];
    let mut hist_b = vec![0.0f64; k];
    let unit = 1.0 / n as f64;
    for (&x, &y) in a.iter().zip(b) {
        let i = (x - label_min) as usize;
        let j = (y - label_min) as usize;
        observed[i][j] += unit;
        hist_a[i] += unit;
        hist_b[j] += unit;
    }

    let scale = ((k - 1) * (k - 1)) as f64;
    let mut weighted_observed = 0.0;
    let mut weighted_expected = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d = i as f64 - j as f64;
            let w = d * d / scale;
            weighted_observed += w * observed[i][j];
            weighted_expected += w * hist_a[i] * hist_b[j];
        }
    }

    if weighted_expected == 0.0 {
        // both raters constant on the same label
        return Ok(if weighted_observed == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - weighted_observed / weighted_expected)
}

/// Qualitative agreement band for a QWK value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementBand {
    NoneToWeak,
    Moderate,
    Strong,
    AlmostPerfect,
}

impl fmt::Display for AgreementBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgreementBand::NoneToWeak => "none-to-weak",
            AgreementBand::Moderate => "moderate",
            AgreementBand::Strong => "strong",
            AgreementBand::AlmostPerfect => "almost perfect",
        })
    }
}

pub const MODERATE_QWK: f64 = 0.6;
pub const STRONG_QWK: f64 = 0.8;
/// Strictly above this is "almost perfect".
pub const ALMOST_PERFECT_QWK: f64 = 0.9;

pub fn agreement_band(qwk: f64) -> Result<AgreementBand, MetricError> {
    if !(-1.0..=1.0).contains(&qwk) {
        return Err(MetricError::KappaOutOfRange(qwk));
    }
    Ok(if qwk > ALMOST_PERFECT_QWK {
        AgreementBand::AlmostPerfect
    } else if qwk >= STRONG_QWK {
        AgreementBand::Strong
    } else if qwk >= MODERATE_QWK {
        AgreementBand::Moderate
    } else {
        AgreementBand::NoneToWeak
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Binary confusion counts with `1` as the positive class.
pub fn confusion(pred: &[Label], gold: &[Label]) -> Result<ConfusionCounts, MetricError> {
    if pred.len() != gold.len() {
        return Err(MetricError::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            (1, other) | (0, other) => return Err(MetricError::NonBinary(other)),
            (other, _) => return Err(MetricError::NonBinary(other)),
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendDirection {
    Overscoring,
    Underscoring,
    Balanced,
}

/// Which way a subscore's errors lean.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrendReport {
    pub subscore: String,
    pub fp_count: usize,
    pub fn_count: usize,
    pub direction: TrendDirection,
}

impl TrendReport {
    pub fn from_counts(subscore: impl Into<String>, fp_count: usize, fn_count: usize) -> Self {
        let direction = match fp_count.cmp(&fn_count) {
            std::cmp::Ordering::Greater => TrendDirection::Overscoring,
            std::cmp::Ordering::Less => TrendDirection::Underscoring,
            std::cmp::Ordering::Equal => TrendDirection::Balanced,
        };
        Self {
            subscore: subscore.into(),
            fp_count,
            fn_count,
            direction,
        }
    }
}

pub fn error_trend(pred: &[Label], gold: &[Label], subscore: &str) -> Result<TrendReport, MetricError> {
    let c = confusion(pred, gold)?;
    Ok(TrendReport::from_counts(subscore, c.fp, c.fn_))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub qwk: f64,
    pub kappa: f64,
    pub per_class_f1: BTreeMap<Label, f64>,
}

impl MetricReport {
    pub fn compute(
        pred: &[Label],
        gold: &[Label],
        label_min: Label,
        label_max: Label,
    ) -> Result<Self, MetricError> {
        Ok(Self {
            n: check_pairs(pred, gold)?,
            accuracy: accuracy(pred, gold)?,
            macro_f1: macro_f1(pred, gold)?,
            qwk: quadratic_weighted_kappa(pred, gold, label_min, label_max)?,
            kappa: cohen_kappa(pred, gold)?,
            per_class_f1: per_class_f1(pred, gold)?,
        })
    }
}

/// Per-subscore reports plus one for the total score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub by_subscore: BTreeMap<String, MetricReport>,
    pub total: MetricReport,
}

/// Aligns predictions with gold by response id and scores every subscore and
/// the total. Totals use the fixed range `[0, max_total]` for QWK.
pub fn evaluate_scores(
    pred: &[ScoreVector],
    gold: &[ScoreVector],
    rubric: &Rubric,
) -> Result<EvaluationReport, MetricError> {
    let pred_by_id = index_unique(pred, "prediction")?;
    let gold_by_id = index_unique(gold, "gold")?;
    let pred_ids: BTreeSet<&str> = pred_by_id.keys().copied().collect();
    let gold_ids: BTreeSet<&str> = gold_by_id.keys().copied().collect();
    if pred_ids != gold_ids {
        let only_pred: Vec<_> = pred_ids.difference(&gold_ids).collect();
        let only_gold: Vec<_> = gold_ids.difference(&pred_ids).collect();
        return Err(MetricError::IdMismatch(format!(
            "only in predictions {only_pred:?}, only in gold {only_gold:?}"
        )));
    }

    let mut by_subscore = BTreeMap::new();
    for name in rubric.subscore_names() {
        let mut p = Vec::with_capacity(gold_ids.len());
        let mut g = Vec::with_capacity(gold_ids.len());
        for id in &gold_ids {
            p.push(binary_value(pred_by_id[id], name)?);
            g.push(binary_value(gold_by_id[id], name)?);
        }
        by_subscore.insert(name.to_string(), MetricReport::compute(&p, &g, 0, 1)?);
    }
    let p_total: Vec<Label> = gold_ids.iter().map(|id| crate::model::total_of(pred_by_id[id])).collect();
    let g_total: Vec<Label> = gold_ids.iter().map(|id| crate::model::total_of(gold_by_id[id])).collect();
    let total = MetricReport::compute(&p_total, &g_total, 0, rubric.max_total)?;
    Ok(EvaluationReport { by_subscore, total })
}

fn index_unique<'a>(
    vectors: &'a [ScoreVector],
    side: &str,
) -> Result<BTreeMap<&'a str, &'a ScoreVector>, MetricError> {
    let mut out = BTreeMap::new();
    for v in vectors {
        if out.insert(v.response_id.as_str(), v).is_some() {
            return Err(MetricError::IdMismatch(format!(
                "{side} contains response {} twice",
                v.response_id
            )));
        }
    }
    Ok(out)
}

fn binary_value(v: &ScoreVector, subscore: &str) -> Result<Label, MetricError> {
    let value = v.get(subscore).ok_or_else(|| {
        MetricError::IdMismatch(format!(
            "response {} has no value for subscore {subscore}",
            v.response_id
        ))
    })?;
    if value > 1 {
        return Err(MetricError::NonBinary(u32::from(value)));
    }
    Ok(u32::from(value))
}
