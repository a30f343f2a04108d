//! Reproduces the reference per-question breakdown through the real
//! pipeline: 600 submissions over five questions, graded by three models
//! (1,800 jobs), human grades, reviewer tags, then the rendered report.
//!
//! Each row's integer composition (matches, FP, FN, TE, RAE) was derived
//! offline from the published percentages; `composition_rounds_to_target`
//! re-derives the percentages from those integers with plain integer
//! arithmetic so the derivation itself is checked too.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use inkgrade_core::domain::{
    CostRates, HumanEvaluation, ItemSelection, ModelConfig, Provider, QuestionInstance, Rational, ReferenceAnswer,
    RetryPolicy, Rubric, RubricItem, Submission, SubmissionImage, TokenUsage,
};
use inkgrade_core::gateway::{FnProvider, Gateway, ProviderReply};
use inkgrade_core::metrics::{self, categorize_disagreement, render_table, Category, Grouping, TableFormat};
use inkgrade_core::orchestrator::Orchestrator;
use inkgrade_core::parser::serialize_evaluation_body;
use inkgrade_core::prompt::{PromptBundle, PromptTemplate};
use inkgrade_core::store::{Change, DocKind, EventKind, Store, StoreOptions};

pub struct Target {
    pub question: &'static str,
    pub submissions: usize,
    pub items: usize,
    pub model: &'static str,
    /// matches, false positives, false negatives, TE tags, RAE tags
    pub counts: [usize; 5],
    /// %RIA, %FP, %FN, %TE, %RAE as printed in the reference table
    pub percent: [&'static str; 5],
}

const fn t(
    question: &'static str,
    submissions: usize,
    items: usize,
    model: &'static str,
    counts: [usize; 5],
    percent: [&'static str; 5],
) -> Target {
    Target {
        question,
        submissions,
        items,
        model,
        counts,
        percent,
    }
}

pub const MODELS: [&str; 3] = ["GPT-5-mini", "GPT-5.1", "Gemini-3-flash"];

#[rustfmt::skip]
pub const TARGETS: [Target; 15] = [
    t("C1-Q1", 55, 6, "GPT-5-mini", [314, 13, 3, 11, 4], ["95", "4", "1", "73", "27"]),
    t("C1-Q1", 55, 6, "GPT-5.1", [288, 3, 39, 10, 32], ["87", "1", "12", "24", "76"]),
    t("C1-Q1", 55, 6, "Gemini-3-flash", [317, 10, 3, 12, 1], ["96", "3", "1", "92", "8"]),
    t("C1-Q2", 69, 7, "GPT-5-mini", [473, 5, 5, 7, 3], ["98", "1", "1", "70", "30"]),
    t("C1-Q2", 69, 7, "GPT-5.1", [459, 5, 19, 18, 6], ["95", "1", "4", "75", "25"]),
    t("C1-Q2", 69, 7, "Gemini-3-flash", [478, 5, 0, 5, 0], ["99", "1", "0", "100", "0"]),
    t("C1-Q3", 122, 9, "GPT-5-mini", [1065, 22, 11, 33, 0], ["97", "2", "1", "100", "0"]),
    t("C1-Q3", 122, 9, "GPT-5.1", [1032, 55, 11, 57, 9], ["94", "5", "1", "86", "14"]),
    t("C1-Q3", 122, 9, "Gemini-3-flash", [1087, 0, 11, 11, 0], ["99", "0", "1", "100", "0"]),
    t("C2-Q1", 242, 5, "GPT-5-mini", [1077, 85, 48, 105, 28], ["89", "7", "4", "79", "21"]),
    t("C2-Q1", 242, 5, "GPT-5.1", [1064, 73, 73, 118, 28], ["88", "6", "6", "81", "19"]),
    t("C2-Q1", 242, 5, "Gemini-3-flash", [1077, 109, 24, 94, 39], ["89", "9", "2", "71", "29"]),
    t("C2-Q2", 112, 7, "GPT-5-mini", [721, 31, 32, 49, 14], ["92", "4", "4", "78", "22"]),
    t("C2-Q2", 112, 7, "GPT-5.1", [690, 47, 47, 71, 23], ["88", "6", "6", "76", "24"]),
    t("C2-Q2", 112, 7, "Gemini-3-flash", [729, 31, 24, 41, 14], ["93", "4", "3", "75", "25"]),
];

fn half_up(part: usize, whole: usize) -> String {
    ((200 * part + whole) / (2 * whole)).to_string()
}

/// Integer-only check that every composition is consistent and rounds to
/// its target percentages.
pub fn composition_rounds_to_target() -> Result<(), String> {
    for target in &TARGETS {
        let [m, fp, fn_, te, rae] = target.counts;
        let total = target.submissions * target.items;
        if m + fp + fn_ != total {
            return Err(format!("{} {}: {m}+{fp}+{fn_} != {total}", target.question, target.model));
        }
        if te + rae > fp + fn_ {
            return Err(format!("{} {}: more tags than disagreements", target.question, target.model));
        }
        let got = [
            half_up(m, total),
            half_up(fp, total),
            half_up(fn_, total),
            half_up(te, te + rae),
            half_up(rae, te + rae),
        ];
        if got != target.percent.map(String::from) {
            return Err(format!("{} {}: {got:?} != {:?}", target.question, target.model, target.percent));
        }
    }
    Ok(())
}

fn at() -> DateTime<Utc> {
    DateTime::from_timestamp(1_760_000_000, 0).unwrap()
}

fn model_config(id: &str) -> ModelConfig {
    ModelConfig {
        model_config_id: id.into(),
        provider: Provider::Replay,
        model_name: id.to_lowercase(),
        max_output_tokens: 2000,
        request_timeout_ms: 1000,
        retry: RetryPolicy::default(),
        cost_rates: CostRates {
            input_per_token: Rational::zero(),
            output_per_token: Rational::zero(),
        },
        temperature: Some(0.0),
        base_url: None,
    }
}

fn selections(picks: &[bool]) -> Vec<ItemSelection> {
    picks
        .iter()
        .enumerate()
        .map(|(i, &selected)| ItemSelection {
            item_id: format!("i{i}"),
            selected,
            justification: format!("item {i}"),
        })
        .collect()
}

struct Question {
    id: &'static str,
    submissions: usize,
    items: usize,
}

fn questions() -> Vec<Question> {
    let mut out: Vec<Question> = Vec::new();
    for target in &TARGETS {
        if out.last().is_none_or(|q| q.id != target.question) {
            out.push(Question {
                id: target.question,
                submissions: target.submissions,
                items: target.items,
            });
        }
    }
    out
}

/// Human grade: a fixed checkerboard of selected items.
fn human_picks(sub: usize, items: usize) -> Vec<bool> {
    (0..items).map(|i| (sub + i) % 2 == 0).collect()
}

/// AI grade for every submission of a question: the human grade with
/// `fp` unselected cells and `fn_` selected cells flipped, chosen at random.
fn ai_picks(q: &Question, target: &Target, seed: u64) -> Vec<Vec<bool>> {
    let mut picks: Vec<Vec<bool>> = (0..q.submissions).map(|s| human_picks(s, q.items)).collect();
    let cells: Vec<(usize, usize)> = (0..q.submissions)
        .flat_map(|s| (0..q.items).map(move |i| (s, i)))
        .collect();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut off: Vec<_> = cells.iter().copied().filter(|&(s, i)| !picks[s][i]).collect();
    let mut on: Vec<_> = cells.iter().copied().filter(|&(s, i)| picks[s][i]).collect();
    off.shuffle(&mut rng);
    on.shuffle(&mut rng);
    for &(s, i) in off.iter().take(target.counts[1]) {
        picks[s][i] = true;
    }
    for &(s, i) in on.iter().take(target.counts[2]) {
        picks[s][i] = false;
    }
    picks
}

pub fn reference_table() -> Result<String, String> {
    composition_rounds_to_target()?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = Arc::new(Store::open_exclusive(dir.path(), StoreOptions { fsync: false }).map_err(|e| e.to_string())?);
    let orch = Orchestrator::new(store.clone(), PromptTemplate::builtin()).with_clock(at);
    let setup = || Change::new("setup", EventKind::SubmissionIngested);

    // replies keyed by (final image digest, model)
    let mut replies: HashMap<(String, String), String> = HashMap::new();
    let mut jobs = 0;
    for (qn, q) in questions().iter().enumerate() {
        let instance = QuestionInstance {
            question_id: q.id.into(),
            variant_seed: "1".into(),
            statement: format!("Question {}", q.id),
            reference_answers: vec![ReferenceAnswer {
                label: "answer".into(),
                value: "42".into(),
            }],
            grading_instructions: None,
        };
        store
            .put_json(DocKind::Instance, &instance.reference().document_id(), &instance, setup())
            .map_err(|e| e.to_string())?;
        let rubric = Rubric {
            rubric_id: q.id.to_lowercase(),
            question_id: q.id.into(),
            items: (0..q.items)
                .map(|i| RubricItem {
                    item_id: format!("i{i}"),
                    description: format!("condition {i}"),
                    points: Rational::integer(1),
                    order: i as i64,
                })
                .collect(),
            max_points: Rational::integer(q.items as i64),
            finalized: false,
            version: 1,
        };
        store
            .put_json(DocKind::Rubric, &rubric.reference().document_id(), &rubric, setup())
            .map_err(|e| e.to_string())?;
        let rubric = orch.finalize_rubric(&rubric.reference()).map_err(|e| e.to_string())?;

        let mut ids = Vec::new();
        let mut blobs = Vec::new();
        for s in 0..q.submissions {
            let id = format!("{}-s{s:03}", q.id);
            let blob = store
                .put_blob(format!("image of {id}").as_bytes(), "setup")
                .map_err(|e| e.to_string())?;
            let submission = Submission {
                submission_id: id.clone(),
                instance: instance.reference(),
                submitter: format!("group-{s}"),
                images: vec![SubmissionImage {
                    blob: blob.clone(),
                    media_type: "image/png".into(),
                    captured_at: at(),
                }],
                final_image_index: 0,
                closed_at: Some(at()),
            };
            store
                .put_json(DocKind::Submission, &id, &submission, setup())
                .map_err(|e| e.to_string())?;
            let human = HumanEvaluation {
                submission_id: id.clone(),
                grader_id: "ta-1".into(),
                rubric: rubric.reference(),
                selections: selections(&human_picks(s, q.items)),
                created_at: at(),
            };
            orch.record_override(&id, &human).map_err(|e| e.to_string())?;
            ids.push(id);
            blobs.push(blob);
        }
        for (mn, model) in MODELS.iter().enumerate() {
            let target = TARGETS
                .iter()
                .find(|t| t.question == q.id && t.model == *model)
                .expect("target per question and model");
            for (s, picks) in ai_picks(q, target, (qn * 10 + mn) as u64).iter().enumerate() {
                let body = serialize_evaluation_body(&format!("work of {}", ids[s]), &selections(picks));
                replies.insert((blobs[s].clone(), model.to_string()), body);
            }
            jobs += orch
                .enqueue_assessment(&ids, &rubric, &model_config(model))
                .map_err(|e| e.to_string())?
                .len();
        }
    }

    let replies = Arc::new(replies);
    let provider = FnProvider(move |bundle: &PromptBundle, config: &ModelConfig| {
        let (blob, _) = bundle.image_parts().next().expect("one image part");
        let body = replies[&(blob.to_string(), config.model_config_id.clone())].clone();
        Ok(ProviderReply {
            body,
            usage: TokenUsage::default(),
            provider_echo: "fixture".into(),
        })
    });
    let summary = orch
        .run_pending(&Gateway::new(Arc::new(provider)), 4, None)
        .map_err(|e| e.to_string())?;
    if summary.done != jobs || jobs != 1800 {
        return Err(format!("{jobs} jobs enqueued, {summary:?}"));
    }

    // reviewers tag the first TE + RAE disagreements of each row, in id order
    let data = metrics::collect(&orch).map_err(|e| e.to_string())?;
    for target in &TARGETS {
        let mut ids: Vec<String> = data
            .outcomes
            .iter()
            .filter(|o| o.question_id == target.question && o.model_config_id == target.model)
            .filter(|o| o.outcome.is_disagreement())
            .map(|o| o.disagreement_id())
            .collect();
        ids.sort();
        let [_, _, _, te, rae] = target.counts;
        let plan = ids
            .iter()
            .take(te)
            .map(|id| (id, Category::Te))
            .chain(ids.iter().skip(te).take(rae).map(|id| (id, Category::Rae)));
        for (id, category) in plan {
            categorize_disagreement(&orch, id, category, "", "ta-1", false, at()).map_err(|e| e.to_string())?;
        }
    }

    let data = metrics::collect(&orch).map_err(|e| e.to_string())?;
    let reports = data.report(Grouping::question_model());
    let table = render_table(&reports, TableFormat::Text);
    let mut lines = table.lines().skip(1);
    let mut uncategorized = 0;
    for target in &TARGETS {
        let expected = format!(
            "{} | {} | {} | {} | {}",
            target.question,
            target.submissions,
            target.items,
            target.model,
            target.percent.join(" | ")
        );
        let line = lines.next().unwrap_or_default();
        if line != expected {
            return Err(format!("rendered {line:?}, expected {expected:?}"));
        }
        let report = reports
            .iter()
            .find(|r| {
                r.question_id.as_deref() == Some(target.question) && r.model_config_id.as_deref() == Some(target.model)
            })
            .ok_or("row missing from report")?;
        let counts = [report.matches, report.false_positives, report.false_negatives, report.te, report.rae];
        if counts != target.counts {
            return Err(format!("{expected}: counts {counts:?} != {:?}", target.counts));
        }
        uncategorized += report.uncategorized;
    }
    if let Some(extra) = lines.next() {
        return Err(format!("unexpected row {extra:?}"));
    }
    Ok(format!(
        "{jobs} jobs, 15 rows match exactly (integer oracle agrees; {uncategorized} disagreement left uncategorized)"
    ))
}
