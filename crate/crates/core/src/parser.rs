//! Turns a model reply into an [`AiEvaluation`].
//!
//! The reply must contain exactly one JSON object of the shape
//!
//! ```json
//! {"transcription": "...", "items": [{"item_id": "...", "selected": true, "justification": "..."}]}
//! ```
//!
//! Prose around the object is tolerated. Code fences are not: a fenced reply
//! violates the response contract and is only accepted through
//! [`repair_pass`], which marks the result as repaired. Nothing is ever
//! defaulted; an item the reply does not decide is a defect.

use std::collections::HashSet;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::codec::sha256_hex;
use crate::domain::{AiEvaluation, ItemSelection, ModelConfig, QualityFlag, Rubric};
use crate::gateway::RawModelResponse;

/// Version of the response contract and of this grammar; they change together.
pub const CONTRACT_VERSION: &str = "grading-response/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DefectKind {
    Malformed,
    MissingItem,
    UnknownItem,
    DuplicateItem,
    EmptyTranscription,
}

impl DefectKind {
    /// Whether this defect prevents producing an evaluation.
    pub fn is_blocking(self) -> bool {
        !matches!(self, DefectKind::EmptyTranscription)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Defect {
    pub kind: DefectKind,
    pub detail: String,
}

impl fmt::Display for Defect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = serde_json::to_value(self.kind).ok();
        let kind = kind.as_ref().and_then(Value::as_str).unwrap_or("DEFECT");
        write!(f, "{kind}({})", self.detail)
    }
}

impl Defect {
    fn new(kind: DefectKind, detail: impl Into<String>) -> Self {
        Defect {
            kind,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub evaluation: Option<AiEvaluation>,
    pub defects: Vec<Defect>,
    pub repaired: bool,
}

impl ParseOutcome {
    pub fn is_blocked(&self) -> bool {
        self.defects.iter().any(|d| d.kind.is_blocking())
    }

    pub fn has(&self, kind: DefectKind) -> bool {
        self.defects.iter().any(|d| d.kind == kind)
    }

    pub fn summary(&self) -> String {
        self.defects.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
    }
}

/// Identifiers and metadata stamped onto a successful evaluation.
#[derive(Debug, Clone)]
pub struct ParseContext<'a> {
    pub evaluation_id: &'a str,
    pub submission_id: &'a str,
    pub model_config: &'a ModelConfig,
    pub prompt_fingerprint: &'a str,
    pub created_at: DateTime<Utc>,
}

/// Spans of balanced top-level `{...}` regions. Quotes are only tracked
/// inside a region so apostrophes in prose do not confuse the scan.
fn object_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut depth = 0usize;
    let mut start = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, b) in text.bytes().enumerate() {
        if depth > 0 && in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' if depth > 0 => in_string = true,
            b'{' => {
                if depth == 0 {
                    start = i;
                }
                depth += 1;
            }
            b'}' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    spans.push((start, i + 1));
                }
            }
            _ => {}
        }
    }
    spans
}

fn locate_block(body: &str) -> Result<Map<String, Value>, Defect> {
    if body.contains("```") {
        return Err(Defect::new(DefectKind::Malformed, "structured block is wrapped in a code fence"));
    }
    let mut found: Vec<Map<String, Value>> = object_spans(body)
        .into_iter()
        .filter_map(|(s, e)| match serde_json::from_str::<Value>(&body[s..e]) {
            Ok(Value::Object(map)) => Some(map),
            _ => None,
        })
        .collect();
    match found.len() {
        1 => Ok(found.pop().expect("one block")),
        0 if body.trim().is_empty() => Err(Defect::new(DefectKind::Malformed, "empty response")),
        0 => Err(Defect::new(DefectKind::Malformed, "no complete structured block found")),
        n => Err(Defect::new(DefectKind::Malformed, format!("{n} structured blocks found, expected one"))),
    }
}

struct Extracted {
    transcription: String,
    selections: Vec<ItemSelection>,
}

fn extract(block: &Map<String, Value>) -> Result<Extracted, Defect> {
    let malformed = |d: String| Defect::new(DefectKind::Malformed, d);
    let transcription = match block.get("transcription") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(malformed("transcription is not a string".into())),
        None => return Err(malformed("missing key transcription".into())),
    };
    let items = match block.get("items") {
        Some(Value::Array(items)) => items,
        Some(_) => return Err(malformed("items is not a list".into())),
        None => return Err(malformed("missing key items".into())),
    };
    let mut selections = Vec::with_capacity(items.len());
    for (n, item) in items.iter().enumerate() {
        let Value::Object(item) = item else {
            return Err(malformed(format!("items[{n}] is not an object")));
        };
        let Some(Value::String(item_id)) = item.get("item_id") else {
            return Err(malformed(format!("items[{n}].item_id missing or not a string")));
        };
        let Some(Value::Bool(selected)) = item.get("selected") else {
            return Err(malformed(format!("items[{n}].selected missing or not a boolean")));
        };
        let Some(Value::String(justification)) = item.get("justification") else {
            return Err(malformed(format!("items[{n}].justification missing or not a string")));
        };
        selections.push(ItemSelection {
            item_id: item_id.clone(),
            selected: *selected,
            justification: justification.clone(),
        });
    }
    Ok(Extracted {
        transcription,
        selections,
    })
}

fn coverage_defects(rubric: &Rubric, selections: &[ItemSelection]) -> Vec<Defect> {
    let mut defects = Vec::new();
    let mut seen = HashSet::new();
    for s in selections {
        if rubric.item(&s.item_id).is_none() {
            defects.push(Defect::new(DefectKind::UnknownItem, s.item_id.clone()));
        } else if !seen.insert(s.item_id.as_str()) {
            defects.push(Defect::new(DefectKind::DuplicateItem, s.item_id.clone()));
        }
    }
    for item in rubric.ordered_items() {
        if !seen.contains(item.item_id.as_str()) {
            defects.push(Defect::new(DefectKind::MissingItem, item.item_id.clone()));
        }
    }
    defects
}

fn parse_text(body: &str, raw: &RawModelResponse, rubric: &Rubric, ctx: &ParseContext<'_>) -> ParseOutcome {
    let extracted = match locate_block(body).and_then(|block| extract(&block)) {
        Ok(e) => e,
        Err(defect) => {
            return ParseOutcome {
                evaluation: None,
                defects: vec![defect],
                repaired: false,
            }
        }
    };
    let mut defects = coverage_defects(rubric, &extracted.selections);
    if extracted.transcription.trim().is_empty() {
        defects.push(Defect::new(DefectKind::EmptyTranscription, "transcription is empty"));
    }
    let evaluation = if defects.iter().any(|d| d.kind.is_blocking()) {
        None
    } else {
        let mut quality_flags = Vec::new();
        if !defects.is_empty() {
            quality_flags.push(QualityFlag::EmptyTranscription);
        }
        Some(AiEvaluation {
            evaluation_id: ctx.evaluation_id.to_string(),
            submission_id: ctx.submission_id.to_string(),
            model_config_id: ctx.model_config.model_config_id.clone(),
            model_config: ctx.model_config.clone(),
            rubric: rubric.reference(),
            transcription: extracted.transcription,
            selections: extracted.selections,
            raw_response_digest: sha256_hex(raw.body.as_bytes()),
            usage: raw.usage,
            contract_version: CONTRACT_VERSION.to_string(),
            prompt_fingerprint: ctx.prompt_fingerprint.to_string(),
            quality_flags,
            created_at: ctx.created_at,
        })
    };
    ParseOutcome {
        evaluation,
        defects,
        repaired: false,
    }
}

pub fn parse_evaluation(raw: &RawModelResponse, rubric: &Rubric, ctx: &ParseContext<'_>) -> ParseOutcome {
    parse_text(&raw.body, raw, rubric, ctx)
}

/// Drops fence marker lines (```` ``` ```` or ```` ```json ````), keeping their content.
fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Keeps only the span from the first `{` to the last `}`.
fn trim_prose(text: &str) -> String {
    match (text.find('{'), text.rfind('}')) {
        (Some(s), Some(e)) if s < e => text[s..=e].to_string(),
        _ => text.to_string(),
    }
}

/// Removes commas directly preceding `}` or `]` outside string literals.
fn drop_trailing_commas(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text.char_indices() {
        if in_string {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        if c == '"' {
            in_string = true;
        } else if c == ',' {
            let next = bytes[i + 1..].iter().find(|b| !b.is_ascii_whitespace());
            if matches!(next, Some(b'}') | Some(b']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Bounded normalizations for a reply that failed as MALFORMED, applied
/// cumulatively until one parses: strip code fences, trim surrounding prose,
/// drop trailing commas. Never adds content.
pub fn repair_pass(raw: &RawModelResponse, rubric: &Rubric, ctx: &ParseContext<'_>) -> ParseOutcome {
    let first = parse_evaluation(raw, rubric, ctx);
    if !first.has(DefectKind::Malformed) {
        return first;
    }
    let steps: [fn(&str) -> String; 3] = [strip_fences, trim_prose, drop_trailing_commas];
    let mut text = raw.body.clone();
    let mut last = first;
    for step in steps {
        let next = step(&text);
        if next == text {
            continue;
        }
        text = next;
        let outcome = parse_text(&text, raw, rubric, ctx);
        if !outcome.has(DefectKind::Malformed) {
            let mut outcome = outcome;
            if let Some(e) = outcome.evaluation.as_mut() {
                e.quality_flags.push(QualityFlag::Repaired);
                outcome.repaired = true;
            }
            return outcome;
        }
        last = outcome;
    }
    last
}

/// The reply text a model would send for `evaluation` under this contract.
pub fn serialize_evaluation_body(transcription: &str, selections: &[ItemSelection]) -> String {
    let items: Vec<Value> = selections
        .iter()
        .map(|s| {
            serde_json::json!({
                "item_id": s.item_id,
                "selected": s.selected,
                "justification": s.justification,
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({
        "transcription": transcription,
        "items": items,
    }))
    .expect("json values serialize")
}
