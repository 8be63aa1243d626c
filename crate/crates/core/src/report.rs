//! Comparison tables across prompt implementations.
//!
//! One block per subscore and one for the total, each listing every
//! implementation with `n`, accuracy, macro F1 and QWK rounded to two
//! decimals.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::{EvaluationReport, MetricReport};
use crate::model::Rubric;

/// Canonical implementation labels, in report order.
pub const IMPLEMENTATIONS: [&str; 4] = ["zero_shot", "few_shot", "few_shot_cot", "cot_al"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub implementation: String,
    pub evaluation: EvaluationReport,
}

fn two(x: f64) -> String {
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn targets(rubric: &Rubric) -> Vec<String> {
    rubric
        .subscore_names()
        .map(str::to_string)
        .chain(std::iter::once("total".to_string()))
        .collect()
}

fn pick<'a>(row: &'a ReportRow, target: &str) -> Option<&'a MetricReport> {
    if target == "total" {
        Some(&row.evaluation.total)
    } else {
        row.evaluation.by_subscore.get(target)
    }
}

pub fn render_table(rows: &[ReportRow], rubric: &Rubric) -> String {
    let width = rows
        .iter()
        .map(|r| r.implementation.len())
        .chain(std::iter::once("implementation".len()))
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    for (i, target) in targets(rubric).iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "{target}");
        let _ = writeln!(out, "{:<width$}  {:>5}  {:>5}  {:>5}  {:>5}", "implementation", "n", "Acc", "F1", "QWK");
        for row in rows {
            if let Some(m) = pick(row, target) {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>5}  {:>5}  {:>5}  {:>5}",
                    row.implementation,
                    m.n,
                    two(m.accuracy),
                    two(m.macro_f1),
                    two(m.qwk)
                );
            }
        }
    }
    out
}

pub fn render_csv(rows: &[ReportRow], rubric: &Rubric) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["implementation", "target", "n", "acc", "f1", "qwk"])
        .expect("writing to memory cannot fail");
    for target in targets(rubric) {
        for row in rows {
            if let Some(m) = pick(row, &target) {
                w.write_record([
                    row.implementation.clone(),
                    target.clone(),
                    m.n.to_string(),
                    two(m.accuracy),
                    two(m.macro_f1),
                    two(m.qwk),
                ])
                .expect("writing to memory cannot fail");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}
