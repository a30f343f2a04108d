//! Parser totality and traceability under random and mutated replies.
//!
//! The traceability oracle collects every `(item_id, selected)` pair that
//! appears in any JSON object anywhere in the body (after the only textual
//! normalization the parser is allowed, dropping trailing commas) and
//! requires every parsed selection to be one of them.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};

use chrono::DateTime;
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use regex::Regex;
use serde_json::Value;

use inkgrade_core::domain::{
    check_coverage, CostRates, ItemSelection, ModelConfig, Provider, Rational, RetryPolicy, Rubric, RubricItem,
    TokenUsage,
};
use inkgrade_core::gateway::RawModelResponse;
use inkgrade_core::parser::{parse_evaluation, repair_pass, serialize_evaluation_body, ParseContext, ParseOutcome};

pub const BODIES: usize = 10_000;
const IDS: [&str; 6] = ["dot", "norm", "answer", "e", "u-1", "step_2"];
const NOISE: [&str; 14] = [
    "{", "}", "[", "]", "\"", ",", ":", "\\", "true", "false", "null", "\n", "```", "é",
];

fn rubric(n: usize) -> Rubric {
    Rubric {
        rubric_id: "fuzz".into(),
        question_id: "F".into(),
        items: IDS[..n]
            .iter()
            .enumerate()
            .map(|(i, id)| RubricItem {
                item_id: id.to_string(),
                description: format!("{id} holds"),
                points: Rational::integer(1),
                order: i as i64,
            })
            .collect(),
        max_points: Rational::integer(n as i64),
        finalized: true,
        version: 1,
    }
}

fn text(rng: &mut StdRng) -> String {
    let pieces = ["x = 3", "{a}", "\"quoted\"", "back\\slash", "é∑", "}", "\n", " ", "true", "[1, 2]"];
    (0..rng.random_range(0..5)).map(|_| *pieces.choose(rng).unwrap()).collect()
}

/// A contract-shaped body, optionally with structural defects.
fn structured(rng: &mut StdRng, items: usize) -> String {
    let mut sels: Vec<ItemSelection> = IDS[..items]
        .iter()
        .map(|id| ItemSelection {
            item_id: id.to_string(),
            selected: rng.random_bool(0.5),
            justification: text(rng),
        })
        .collect();
    match rng.random_range(0..8) {
        0 if !sels.is_empty() => {
            sels.remove(rng.random_range(0..sels.len()));
        }
        1 if !sels.is_empty() => {
            let mut dup = sels[rng.random_range(0..sels.len())].clone();
            dup.selected = !dup.selected;
            sels.push(dup);
        }
        2 => sels.push(ItemSelection {
            item_id: "invented".into(),
            selected: true,
            justification: String::new(),
        }),
        3 => sels.reverse(),
        _ => {}
    }
    serialize_evaluation_body(&text(rng), &sels)
}

fn mutate(rng: &mut StdRng, body: String) -> String {
    let mut chars: Vec<char> = body.chars().collect();
    let edits = rng.random_range(1..=3);
    let mut wrapped = None;
    for _ in 0..edits {
        let len = chars.len();
        match rng.random_range(0..10) {
            0 if len > 0 => {
                let at = rng.random_range(0..len);
                let n = rng.random_range(1..=8.min(len - at));
                chars.drain(at..at + n);
            }
            1 => {
                let at = rng.random_range(0..=len);
                let noise = NOISE.choose(rng).unwrap();
                chars.splice(at..at, noise.chars());
            }
            2 if len > 0 => {
                let at = rng.random_range(0..len);
                chars[at] = NOISE.choose(rng).unwrap().chars().next().unwrap();
            }
            3 if len > 0 => chars.truncate(rng.random_range(0..len)),
            4 => {
                let s: String = chars.iter().collect();
                let s = if rng.random_bool(0.5) {
                    s.replacen("true", "false", 1)
                } else {
                    s.replacen("false", "true", 1)
                };
                chars = s.chars().collect();
            }
            5 => {
                let s: String = chars.iter().collect();
                let s = s.replacen('}', ",}", 1).replacen(']', ",]", 1);
                chars = s.chars().collect();
            }
            6 => wrapped = Some(["```json\n", "\n```"]),
            7 => wrapped = Some(["Here is my assessment:\n", "\nLet me know if you need more."]),
            8 => {
                let s: String = chars.iter().collect();
                chars = format!("{s}\n{s}").chars().collect();
            }
            _ => {
                let s: String = chars.iter().collect();
                let s = s.replacen("\"item_id\"", "\"itemid\"", 1);
                chars = s.chars().collect();
            }
        }
    }
    let s: String = chars.into_iter().collect();
    match wrapped {
        Some([before, after]) => format!("{before}{s}{after}"),
        None => s,
    }
}

fn random_body(rng: &mut StdRng) -> String {
    match rng.random_range(0..3) {
        0 => {
            let bytes: Vec<u8> = (0..rng.random_range(0..200)).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        }
        1 => (0..rng.random_range(0..60)).map(|_| *NOISE.choose(rng).unwrap()).collect(),
        _ => {
            let v = serde_json::json!({
                "transcription": rng.random_bool(0.5),
                "items": [{"item_id": IDS[0], "selected": "yes"}],
            });
            v.to_string()
        }
    }
}

fn pairs_in(value: &Value, out: &mut BTreeSet<(String, bool)>) {
    match value {
        Value::Object(map) => {
            if let (Some(Value::String(id)), Some(Value::Bool(b))) = (map.get("item_id"), map.get("selected")) {
                out.insert((id.clone(), *b));
            }
            map.values().for_each(|v| pairs_in(v, out));
        }
        Value::Array(items) => items.iter().for_each(|v| pairs_in(v, out)),
        _ => {}
    }
}

/// Every `(item_id, selected)` pair present in some JSON object of `body`.
fn present_pairs(body: &str, trailing_commas: &Regex) -> BTreeSet<(String, bool)> {
    let mut out = BTreeSet::new();
    let cleaned = trailing_commas.replace_all(body, "$1");
    for text in [body, cleaned.as_ref()] {
        for (at, _) in text.match_indices('{') {
            let mut stream = serde_json::Deserializer::from_str(&text[at..]).into_iter::<Value>();
            if let Some(Ok(v)) = stream.next() {
                pairs_in(&v, &mut out);
            }
        }
    }
    out
}

fn config() -> ModelConfig {
    ModelConfig {
        model_config_id: "fuzz".into(),
        provider: Provider::Replay,
        model_name: "fuzz".into(),
        max_output_tokens: 100,
        request_timeout_ms: 1000,
        retry: RetryPolicy::default(),
        cost_rates: CostRates {
            input_per_token: Rational::zero(),
            output_per_token: Rational::zero(),
        },
        temperature: None,
        base_url: None,
    }
}

fn check_outcome(outcome: &ParseOutcome, body: &str, rubric: &Rubric, re: &Regex) -> Result<bool, String> {
    if outcome.evaluation.is_some() == outcome.is_blocked() {
        return Err(format!("evaluation presence disagrees with defects {:?}", outcome.defects));
    }
    let Some(evaluation) = &outcome.evaluation else {
        return Ok(false);
    };
    check_coverage(rubric, &evaluation.selections).map_err(|e| format!("coverage: {e}"))?;
    let present = present_pairs(body, re);
    for s in &evaluation.selections {
        if !present.contains(&(s.item_id.clone(), s.selected)) {
            return Err(format!("invented selection {}={}", s.item_id, s.selected));
        }
    }
    Ok(true)
}

pub fn parser_fuzz() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0xf022);
    let trailing_commas = Regex::new(r",(\s*[}\]])").unwrap();
    let cfg = config();
    let ctx = ParseContext {
        evaluation_id: "e",
        submission_id: "s",
        model_config: &cfg,
        prompt_fingerprint: "fp",
        created_at: DateTime::UNIX_EPOCH,
    };
    let rubrics: Vec<Rubric> = (1..=IDS.len()).map(rubric).collect();
    let (mut mutated, mut survivors, mut repaired) = (0, 0, 0);
    for n in 0..BODIES {
        let rubric = &rubrics[rng.random_range(0..rubrics.len())];
        let items = rubric.items.len();
        let is_mutation = rng.random_bool(0.8);
        let body = if is_mutation {
            mutated += 1;
            let base = structured(&mut rng, items);
            if rng.random_bool(0.1) {
                base
            } else {
                mutate(&mut rng, base)
            }
        } else {
            random_body(&mut rng)
        };
        let raw = RawModelResponse {
            body: body.clone(),
            usage: TokenUsage::default(),
            latency_ms: 0,
            attempts_used: 1,
            provider_echo: String::new(),
        };
        let outcomes = catch_unwind(AssertUnwindSafe(|| {
            (parse_evaluation(&raw, rubric, &ctx), repair_pass(&raw, rubric, &ctx))
        }))
        .map_err(|_| format!("body {n} panicked the parser: {body:?}"))?;
        for (outcome, is_repair) in [(&outcomes.0, false), (&outcomes.1, true)] {
            let ok = check_outcome(outcome, &body, rubric, &trailing_commas)
                .map_err(|e| format!("body {n}{}: {e}\n{body}", if is_repair { " (repair)" } else { "" }))?;
            if ok && is_mutation && !is_repair {
                survivors += 1;
            }
            if ok && is_repair && outcome.repaired {
                repaired += 1;
            }
        }
    }
    Ok(format!(
        "{BODIES} bodies ({mutated} mutated), no panics; {survivors} survivors + {repaired} repaired outcomes all traceable"
    ))
}
