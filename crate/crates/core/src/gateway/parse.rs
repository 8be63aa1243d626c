//! Strict parser for the score grammar.
//!
//! ```text
//! SUBSCORE <name>: <0|1>
//! REASONING: <text, continuing until the next keyword line>
//! ...
//! TOTAL: <int>
//! ```
//!
//! Keywords are matched case-insensitively after trimming; subscore names are
//! matched after lowercasing and folding spaces to underscores. Prose that is
//! not inside a REASONING block is attributed to the next SUBSCORE line.
//! Scanning stops at the first TOTAL line.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Generation, Rubric, ScoreVector};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseError {
    #[error("missing subscore {subscore}")]
    MissingSubscore { subscore: String },
    #[error("subscore {subscore} has non-binary value {value:?}")]
    NonBinaryValue { subscore: String, value: String },
    #[error("subscore {subscore} appears more than once")]
    DuplicateSubscore { subscore: String },
    #[error("subscore {subscore:?} is not in the rubric")]
    UnknownSubscore { subscore: String },
    #[error("line {line}: malformed score line {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("TOTAL value {value:?} is not an integer")]
    MalformedTotal { value: String },
}

/// Recoverable irregularities; the generation is still usable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseFlag {
    /// The declared TOTAL disagreed with the subscores; the sum was used.
    TotalMismatch { declared: u32, computed: u32 },
    MissingTotal,
}

/// What the grammar yields from raw text, before it is tied to a response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub by_subscore: BTreeMap<String, u8>,
    pub total: u32,
    /// One entry per rubric subscore; empty when the model gave no reasoning.
    pub reasoning: BTreeMap<String, String>,
    pub flags: Vec<ParseFlag>,
}

impl ParsedOutput {
    pub fn into_score(self, response_id: impl Into<String>, raw: Generation) -> ParsedScore {
        ParsedScore {
            scores: ScoreVector {
                response_id: response_id.into(),
                by_subscore: self.by_subscore,
                total: self.total,
            },
            reasoning: self.reasoning,
            flags: self.flags,
            raw,
        }
    }
}

/// A scored generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedScore {
    pub scores: ScoreVector,
    pub reasoning: BTreeMap<String, String>,
    #[serde(default)]
    pub flags: Vec<ParseFlag>,
    pub raw: Generation,
}

impl ParsedScore {
    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

enum Line<'a> {
    Subscore { name: &'a str, value: &'a str },
    Reasoning(&'a str),
    Total(&'a str),
    Prose(&'a str),
}

fn strip_keyword<'a>(line: &'a str, keyword: &str) -> Option<&'a str> {
    let head = line.get(..keyword.len())?;
    if !head.eq_ignore_ascii_case(keyword) {
        return None;
    }
    Some(&line[keyword.len()..])
}

/// `KEYWORD:` with optional spaces before the colon.
fn colon_field<'a>(line: &'a str, keyword: &str) -> Option<&'a str> {
    strip_keyword(line, keyword)?
        .trim_start()
        .strip_prefix(':')
        .map(str::trim)
}

fn classify(raw: &str, line_no: usize) -> Result<Line<'_>, ParseError> {
    let line = raw.trim().trim_matches(|c| c == '*' || c == '`').trim();
    if let Some(rest) = strip_keyword(line, "SUBSCORE") {
        if rest.starts_with(char::is_whitespace) {
            if let Some((name, value)) = rest.rsplit_once(':') {
                return Ok(Line::Subscore {
                    name: name.trim(),
                    value: value.trim(),
                });
            }
            // only the upper-case keyword is unambiguous without its colon
            if line.starts_with("SUBSCORE") {
                return Err(ParseError::MalformedLine {
                    line: line_no,
                    text: raw.to_string(),
                });
            }
        }
    }
    if let Some(text) = colon_field(line, "REASONING") {
        return Ok(Line::Reasoning(text));
    }
    if let Some(text) = colon_field(line, "TOTAL") {
        return Ok(Line::Total(text));
    }
    Ok(Line::Prose(raw.trim()))
}

fn join_paragraph(parts: &[&str]) -> String {
    let text = parts.join("\n");
    text.trim().to_string()
}

/// Parses a raw generation against `rubric`.
pub fn parse_generation(raw: &str, rubric: &Rubric) -> Result<ParsedOutput, ParseError> {
    let mut by_subscore: BTreeMap<String, u8> = BTreeMap::new();
    let mut reasoning: BTreeMap<String, Vec<&str>> = BTreeMap::new();
    let mut pending: Vec<&str> = Vec::new();
    // subscore whose REASONING block is open
    let mut open: Option<String> = None;
    let mut last_subscore: Option<String> = None;
    let mut declared_total: Option<u32> = None;

    for (i, raw_line) in raw.lines().enumerate() {
        match classify(raw_line, i + 1)? {
            Line::Subscore { name, value } => {
                open = None;
                let canonical = rubric
                    .resolve_name(name)
                    .ok_or_else(|| ParseError::UnknownSubscore {
                        subscore: name.to_string(),
                    })?
                    .to_string();
                let v = match value {
                    "0" => 0,
                    "1" => 1,
                    other => {
                        return Err(ParseError::NonBinaryValue {
                            subscore: canonical,
                            value: other.to_string(),
                        })
                    }
                };
                if by_subscore.insert(canonical.clone(), v).is_some() {
                    return Err(ParseError::DuplicateSubscore { subscore: canonical });
                }
                reasoning.insert(canonical.clone(), std::mem::take(&mut pending));
                last_subscore = Some(canonical);
            }
            Line::Reasoning(text) => match &last_subscore {
                Some(name) => {
                    let entry = reasoning.entry(name.clone()).or_default();
                    if !text.is_empty() {
                        entry.push(text);
                    }
                    open = Some(name.clone());
                }
                None => {
                    if !text.is_empty() {
                        pending.push(text);
                    }
                }
            },
            Line::Total(value) => {
                let parsed = value.parse::<u32>().map_err(|_| ParseError::MalformedTotal {
                    value: value.to_string(),
                })?;
                declared_total = Some(parsed);
                break;
            }
            Line::Prose(text) => match &open {
                Some(name) => reasoning.entry(name.clone()).or_default().push(text),
                None if !text.is_empty() => pending.push(text),
                None => {}
            },
        }
    }

    for name in rubric.subscore_names() {
        if !by_subscore.contains_key(name) {
            return Err(ParseError::MissingSubscore {
                subscore: name.to_string(),
            });
        }
    }

    let computed: u32 = by_subscore.values().map(|&v| u32::from(v)).sum();
    let mut flags = Vec::new();
    match declared_total {
        Some(declared) if declared != computed => {
            flags.push(ParseFlag::TotalMismatch { declared, computed })
        }
        Some(_) => {}
        None => flags.push(ParseFlag::MissingTotal),
    }

    let reasoning = rubric
        .subscore_names()
        .map(|name| {
            let text = reasoning.get(name).map(|p| join_paragraph(p)).unwrap_or_default();
            (name.to_string(), text)
        })
        .collect();

    Ok(ParsedOutput {
        by_subscore,
        total: computed,
        reasoning,
        flags,
    })
}
