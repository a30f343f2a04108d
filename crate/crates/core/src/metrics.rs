//! AI–human agreement at rubric-item level, disagreement tagging, and the
//! summary table.
//!
//! Every rubric item of every paired (AI, human) evaluation is one cell:
//! MATCH when both made the same choice, FP when only the AI selected it, FN
//! when only the human did. FP and FN cells are disagreements; a reviewer
//! tags each as a transcription error (TE) or a rubric-application error
//! (RAE). The engine never classifies on its own, it only offers a
//! suggestion.
//!
//! Percentages are exact rationals. Display rounds half-up to whole percent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use serde::{Deserialize, Serialize};

use crate::domain::{check_coverage, AiEvaluation, DomainError, HumanEvaluation, QualityFlag, Rational, Rubric};
use crate::orchestrator::{JobStatus, Orchestrator, OrchestratorError};
use crate::store::{Change, DocKind, EventKind, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Match,
    Fp,
    Fn,
}

impl Outcome {
    pub fn classify(ai_selected: bool, human_selected: bool) -> Outcome {
        match (ai_selected, human_selected) {
            (true, false) => Outcome::Fp,
            (false, true) => Outcome::Fn,
            _ => Outcome::Match,
        }
    }

    pub fn is_disagreement(self) -> bool {
        self != Outcome::Match
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub evaluation_id: String,
    pub submission_id: String,
    pub question_id: String,
    pub model_config_id: String,
    pub item_id: String,
    pub ai_selected: bool,
    pub human_selected: bool,
    pub outcome: Outcome,
}

impl ItemOutcome {
    pub fn disagreement_id(&self) -> String {
        disagreement_id(&self.evaluation_id, &self.item_id)
    }
}

pub fn disagreement_id(evaluation_id: &str, item_id: &str) -> String {
    format!("{evaluation_id}::{item_id}")
}

fn split_disagreement_id(id: &str) -> Option<(&str, &str)> {
    id.rsplit_once("::").filter(|(e, i)| !e.is_empty() && !i.is_empty())
}

/// One cell per rubric item, in rubric order.
pub fn item_outcomes(
    ai: &AiEvaluation,
    human: &HumanEvaluation,
    rubric: &Rubric,
) -> Result<Vec<ItemOutcome>, DomainError> {
    let reference = rubric.reference();
    if ai.rubric != reference || human.rubric != reference {
        return Err(DomainError::Invalid(format!(
            "evaluations were made against {} and {}, not {reference}",
            ai.rubric, human.rubric
        )));
    }
    if ai.submission_id != human.submission_id {
        return Err(DomainError::Invalid(format!(
            "AI evaluation is for {}, human evaluation for {}",
            ai.submission_id, human.submission_id
        )));
    }
    check_coverage(rubric, &ai.selections)?;
    check_coverage(rubric, &human.selections)?;
    Ok(rubric
        .ordered_items()
        .into_iter()
        .map(|item| {
            let a = ai.selection(&item.item_id).map(|s| s.selected).unwrap_or_default();
            let h = human.selection(&item.item_id).map(|s| s.selected).unwrap_or_default();
            ItemOutcome {
                evaluation_id: ai.evaluation_id.clone(),
                submission_id: ai.submission_id.clone(),
                question_id: rubric.question_id.clone(),
                model_config_id: ai.model_config_id.clone(),
                item_id: item.item_id.clone(),
                ai_selected: a,
                human_selected: h,
                outcome: Outcome::classify(a, h),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    Uncategorized,
    /// Transcription error: misread, missing or hallucinated text.
    Te,
    /// Rubric-application error: correct transcription, wrong rubric logic.
    Rae,
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TE" => Ok(Category::Te),
            "RAE" => Ok(Category::Rae),
            "UNCATEGORIZED" => Ok(Category::Uncategorized),
            other => Err(format!("unknown category {other:?} (expected TE or RAE)")),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Uncategorized => "UNCATEGORIZED",
            Category::Te => "TE",
            Category::Rae => "RAE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagRecord {
    pub category: Category,
    pub note: String,
    pub tagger: String,
    pub tagged_at: DateTime<Utc>,
}

/// A categorized FP/FN cell. The outcome and selections it was tagged
/// against are kept so that a tag goes stale, rather than silently moving,
/// when a later human grade changes the cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disagreement {
    pub disagreement_id: String,
    pub evaluation_id: String,
    pub submission_id: String,
    pub item_id: String,
    pub outcome: Outcome,
    pub ai_selected: bool,
    pub human_selected: bool,
    pub category: Category,
    /// Free text; failure-mode words such as "blur" or "hallucination" go here.
    pub note: String,
    pub tagger: String,
    pub tagged_at: Option<DateTime<Utc>>,
    /// Earlier tags, oldest first.
    #[serde(default)]
    pub history: Vec<TagRecord>,
}

impl Disagreement {
    pub fn untagged(outcome: &ItemOutcome) -> Disagreement {
        Disagreement {
            disagreement_id: outcome.disagreement_id(),
            evaluation_id: outcome.evaluation_id.clone(),
            submission_id: outcome.submission_id.clone(),
            item_id: outcome.item_id.clone(),
            outcome: outcome.outcome,
            ai_selected: outcome.ai_selected,
            human_selected: outcome.human_selected,
            category: Category::Uncategorized,
            note: String::new(),
            tagger: String::new(),
            tagged_at: None,
            history: Vec::new(),
        }
    }

    /// True when this tag was made against the same cell state as `outcome`.
    pub fn applies_to(&self, outcome: &ItemOutcome) -> bool {
        self.disagreement_id == outcome.disagreement_id()
            && self.outcome == outcome.outcome
            && self.ai_selected == outcome.ai_selected
            && self.human_selected == outcome.human_selected
    }
}

/// Heuristic hint shown to reviewers; never applied automatically.
pub fn suggest_category(evaluation: &AiEvaluation) -> Option<Category> {
    evaluation
        .quality_flags
        .contains(&QualityFlag::EmptyTranscription)
        .then_some(Category::Te)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub question_id: Option<String>,
    pub model_config_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Grouping {
    pub by_question: bool,
    pub by_model: bool,
    /// Groups that must appear in the report even when they have no cells.
    pub declared: BTreeSet<GroupKey>,
}

impl Grouping {
    pub fn question_model() -> Grouping {
        Grouping {
            by_question: true,
            by_model: true,
            declared: BTreeSet::new(),
        }
    }

    pub fn key(&self, question_id: &str, model_config_id: &str) -> GroupKey {
        GroupKey {
            question_id: self.by_question.then(|| question_id.to_string()),
            model_config_id: self.by_model.then(|| model_config_id.to_string()),
        }
    }

    pub fn declare(&mut self, question_id: &str, model_config_id: &str) {
        let key = self.key(question_id, model_config_id);
        self.declared.insert(key);
    }
}

impl FromStr for Grouping {
    type Err = String;

    /// Parses a comma-separated list of `question` and `model`; `none`
    /// (or an empty string) gives a single overall group.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut g = Grouping::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "question" => g.by_question = true,
                "model" => g.by_model = true,
                "none" => {}
                other => return Err(format!("unknown grouping key {other:?} (expected question, model)")),
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub question_id: Option<String>,
    pub model_config_id: Option<String>,
    pub n_submissions: usize,
    /// `None` when submissions in the group have different rubric sizes.
    pub n_rubric_items_per_submission: Option<usize>,
    pub total_items: usize,
    pub matches: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Percent values in [0, 100]; `None` for an empty group.
    pub ria_pct: Option<Rational>,
    pub fp_pct: Option<Rational>,
    pub fn_pct: Option<Rational>,
    pub te: usize,
    pub rae: usize,
    pub uncategorized: usize,
    /// Over categorized disagreements only; `None` when none are categorized.
    pub te_pct: Option<Rational>,
    pub rae_pct: Option<Rational>,
    /// Explicit marker for a group with no cells.
    pub empty: bool,
}

impl AgreementReport {
    pub fn disagreements(&self) -> usize {
        self.false_positives + self.false_negatives
    }
}

fn percent(part: usize, whole: usize) -> Option<Rational> {
    (whole > 0).then(|| Rational::from(BigRational::new(BigInt::from(part) * 100, BigInt::from(whole))))
}

/// Rounds a non-negative value to the nearest integer, halves going up.
pub fn round_half_up(value: &Rational) -> BigInt {
    let r = value.as_rational();
    let (numer, denom) = (r.numer(), r.denom());
    let twice: BigInt = numer * 2 + denom;
    twice.div_floor(&(denom * 2))
}

#[derive(Default)]
struct Tally {
    submissions: BTreeMap<String, usize>,
    matches: usize,
    fp: usize,
    fn_: usize,
    te: usize,
    rae: usize,
}

/// Aggregates cells into one report per group. Tags that no longer match
/// their cell are ignored (the cell counts as uncategorized).
pub fn compute_report(
    outcomes: &[ItemOutcome],
    disagreements: &[Disagreement],
    grouping: &Grouping,
) -> Vec<AgreementReport> {
    let tags: BTreeMap<&str, &Disagreement> = disagreements
        .iter()
        .filter(|d| d.category != Category::Uncategorized)
        .map(|d| (d.disagreement_id.as_str(), d))
        .collect();
    let mut groups: BTreeMap<GroupKey, Tally> =
        grouping.declared.iter().map(|k| (k.clone(), Tally::default())).collect();
    for o in outcomes {
        let tally = groups.entry(grouping.key(&o.question_id, &o.model_config_id)).or_default();
        // items per submission, counted per evaluation so that several
        // models grading the same submission do not inflate it
        *tally
            .submissions
            .entry(format!("{}\u{0}{}", o.submission_id, o.evaluation_id))
            .or_default() += 1;
        match o.outcome {
            Outcome::Match => tally.matches += 1,
            Outcome::Fp => tally.fp += 1,
            Outcome::Fn => tally.fn_ += 1,
        }
        if o.outcome.is_disagreement() {
            match tags.get(o.disagreement_id().as_str()).filter(|d| d.applies_to(o)) {
                Some(d) if d.category == Category::Te => tally.te += 1,
                Some(d) if d.category == Category::Rae => tally.rae += 1,
                _ => {}
            }
        }
    }

    groups
        .into_iter()
        .map(|(key, t)| {
            let total = t.matches + t.fp + t.fn_;
            let categorized = t.te + t.rae;
            let sizes: BTreeSet<usize> = t.submissions.values().copied().collect();
            let subs: BTreeSet<&str> = t
                .submissions
                .keys()
                .map(|k| k.split('\u{0}').next().unwrap_or_default())
                .collect();
            AgreementReport {
                question_id: key.question_id,
                model_config_id: key.model_config_id,
                n_submissions: subs.len(),
                n_rubric_items_per_submission: if sizes.len() == 1 { sizes.first().copied() } else { None },
                total_items: total,
                matches: t.matches,
                false_positives: t.fp,
                false_negatives: t.fn_,
                ria_pct: percent(t.matches, total),
                fp_pct: percent(t.fp, total),
                fn_pct: percent(t.fn_, total),
                te: t.te,
                rae: t.rae,
                uncategorized: t.fp + t.fn_ - categorized,
                te_pct: percent(t.te, categorized),
                rae_pct: percent(t.rae, categorized),
                empty: total == 0,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(TableFormat::Text),
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(format!("unknown format {other:?} (expected text, csv, markdown)")),
        }
    }
}

pub const TABLE_HEADER: [&str; 9] = [
    "Question",
    "#Subs",
    "#Rubric Items",
    "Model",
    "%RIA",
    "%FP",
    "%FN",
    "%TE",
    "%RAE",
];

/// Placeholder for values that are undefined (empty group, nothing tagged).
pub const UNDEFINED: &str = "-";

fn cells(r: &AgreementReport) -> [String; 9] {
    let pct = |v: &Option<Rational>| v.as_ref().map_or(UNDEFINED.to_string(), |v| round_half_up(v).to_string());
    [
        r.question_id.clone().unwrap_or_else(|| "all".into()),
        r.n_submissions.to_string(),
        r.n_rubric_items_per_submission
            .map_or(UNDEFINED.to_string(), |n| n.to_string()),
        r.model_config_id.clone().unwrap_or_else(|| "all".into()),
        pct(&r.ria_pct),
        pct(&r.fp_pct),
        pct(&r.fn_pct),
        pct(&r.te_pct),
        pct(&r.rae_pct),
    ]
}

/// Renders reports as a table in the fixed column order, rows sorted by
/// question then model.
pub fn render_table(reports: &[AgreementReport], format: TableFormat) -> String {
    let mut rows: Vec<&AgreementReport> = reports.iter().collect();
    rows.sort_by(|a, b| (&a.question_id, &a.model_config_id).cmp(&(&b.question_id, &b.model_config_id)));
    let rows: Vec<[String; 9]> = rows.into_iter().map(cells).collect();
    match format {
        TableFormat::Text => {
            let mut out = TABLE_HEADER.join(" | ");
            out.push('\n');
            for row in rows {
                out.push_str(&row.join(" | "));
                out.push('\n');
            }
            out
        }
        TableFormat::Markdown => {
            let line = |cells: &[&str]| format!("| {} |\n", cells.join(" | "));
            let mut out = line(&TABLE_HEADER);
            let rule: Vec<&str> = TABLE_HEADER
                .iter()
                .enumerate()
                .map(|(i, _)| if i == 0 || i == 3 { "---" } else { "---:" })
                .collect();
            out.push_str(&line(&rule));
            for row in &rows {
                let row: Vec<&str> = row.iter().map(String::as_str).collect();
                out.push_str(&line(&row));
            }
            out
        }
        TableFormat::Csv => {
            let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
            writer.write_record(TABLE_HEADER).expect("in-memory write");
            for row in &rows {
                writer.write_record(row).expect("in-memory write");
            }
            String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv of utf-8 cells is utf-8")
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
}

impl From<DomainError> for MetricsError {
    fn from(e: DomainError) -> Self {
        MetricsError::Validation(e.to_string())
    }
}

/// Everything the report needs, read from one store snapshot.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub outcomes: Vec<ItemOutcome>,
    pub disagreements: Vec<Disagreement>,
    /// (question, model) pairs that have grading jobs.
    pub graded_groups: BTreeSet<(String, String)>,
}

impl Dataset {
    pub fn report(&self, mut grouping: Grouping) -> Vec<AgreementReport> {
        for (q, m) in &self.graded_groups {
            grouping.declare(q, m);
        }
        compute_report(&self.outcomes, &self.disagreements, &grouping)
    }
}

/// The cell a disagreement id refers to, evaluated against the current
/// grade of record.
pub struct Cell {
    pub outcome: ItemOutcome,
    pub evaluation: AiEvaluation,
}

/// Pairs each DONE AI evaluation with the latest human evaluation of the
/// same submission, when that human grade uses the same rubric version.
pub fn collect(orch: &Orchestrator) -> Result<Dataset, MetricsError> {
    let store = orch.store();
    let mut data = Dataset::default();
    let mut humans: BTreeMap<String, Option<HumanEvaluation>> = BTreeMap::new();
    let mut rubrics: BTreeMap<String, Rubric> = BTreeMap::new();
    for job in orch.jobs()? {
        let doc_id = job.rubric.document_id();
        if !rubrics.contains_key(&doc_id) {
            rubrics.insert(doc_id.clone(), orch.load_rubric(&job.rubric)?);
        }
        let rubric = &rubrics[&doc_id];
        data.graded_groups
            .insert((rubric.question_id.clone(), job.model_config_id.clone()));
        if job.status != JobStatus::Done {
            continue;
        }
        let ai: AiEvaluation = store.get_json(DocKind::AiEvaluation, &job.job_id)?;
        let human = match humans.get(&job.submission_id) {
            Some(h) => h.clone(),
            None => {
                let h = orch.latest_human(&job.submission_id)?;
                humans.insert(job.submission_id.clone(), h.clone());
                h
            }
        };
        let Some(human) = human.filter(|h| h.rubric == ai.rubric) else {
            continue;
        };
        data.outcomes.extend(item_outcomes(&ai, &human, rubric)?);
    }
    data.disagreements = store
        .load_all::<Disagreement>(DocKind::Disagreement)?
        .into_iter()
        .map(|(_, d)| d)
        .collect();
    Ok(data)
}

/// Resolves a disagreement id to its cell under the current grade of record.
pub fn resolve_cell(orch: &Orchestrator, disagreement_id: &str) -> Result<Cell, MetricsError> {
    let (evaluation_id, item_id) = split_disagreement_id(disagreement_id)
        .ok_or_else(|| MetricsError::Validation(format!("malformed disagreement id {disagreement_id:?}")))?;
    let evaluation: AiEvaluation = orch
        .store()
        .find_json(DocKind::AiEvaluation, evaluation_id)?
        .ok_or_else(|| MetricsError::NotFound(format!("evaluation {evaluation_id}")))?;
    let human = orch
        .latest_human(&evaluation.submission_id)?
        .filter(|h| h.rubric == evaluation.rubric)
        .ok_or_else(|| {
            MetricsError::Validation(format!(
                "submission {} has no human grade on {}",
                evaluation.submission_id, evaluation.rubric
            ))
        })?;
    let rubric = orch.load_rubric(&evaluation.rubric)?;
    let outcome = item_outcomes(&evaluation, &human, &rubric)?
        .into_iter()
        .find(|o| o.item_id == item_id)
        .ok_or_else(|| MetricsError::NotFound(format!("item {item_id} in {}", evaluation.rubric)))?;
    Ok(Cell { outcome, evaluation })
}

/// The current tag state of a disagreement cell, untagged if never tagged or
/// if its tag went stale.
pub fn disagreement_for(orch: &Orchestrator, cell: &Cell) -> Result<Disagreement, MetricsError> {
    let stored: Option<Disagreement> = orch
        .store()
        .find_json(DocKind::Disagreement, &cell.outcome.disagreement_id())?;
    Ok(match stored {
        Some(d) if d.applies_to(&cell.outcome) => d,
        Some(d) => Disagreement {
            history: d.history,
            ..Disagreement::untagged(&cell.outcome)
        },
        None => Disagreement::untagged(&cell.outcome),
    })
}

/// Records a reviewer's TE/RAE tag. A cell that already carries a current
/// tag is only changed when `retag` is set; the previous tag moves to the
/// history and the change is audited like any other write.
pub fn categorize_disagreement(
    orch: &Orchestrator,
    disagreement_id: &str,
    category: Category,
    note: &str,
    tagger: &str,
    retag: bool,
    at: DateTime<Utc>,
) -> Result<Disagreement, MetricsError> {
    if category == Category::Uncategorized {
        return Err(MetricsError::Validation("category must be TE or RAE".into()));
    }
    if tagger.trim().is_empty() {
        return Err(MetricsError::Validation("tagger is required".into()));
    }
    let cell = resolve_cell(orch, disagreement_id)?;
    if !cell.outcome.outcome.is_disagreement() {
        return Err(MetricsError::Validation(format!(
            "{disagreement_id} is a MATCH; only FP and FN cells can be categorized"
        )));
    }
    let current = disagreement_for(orch, &cell)?;
    if current.category != Category::Uncategorized {
        if current.category == category && current.note == note {
            return Ok(current);
        }
        if !retag {
            return Err(MetricsError::Conflict(format!(
                "{disagreement_id} is already tagged {}; retag explicitly to change it",
                current.category
            )));
        }
    }
    let mut history = current.history.clone();
    if let Some(tagged_at) = current.tagged_at.filter(|_| current.category != Category::Uncategorized) {
        history.push(TagRecord {
            category: current.category,
            note: current.note.clone(),
            tagger: current.tagger.clone(),
            tagged_at,
        });
    }
    let updated = Disagreement {
        category,
        note: note.to_string(),
        tagger: tagger.to_string(),
        tagged_at: Some(at),
        history,
        ..Disagreement::untagged(&cell.outcome)
    };
    orch.store().put_json(
        DocKind::Disagreement,
        disagreement_id,
        &updated,
        Change::new(tagger, EventKind::DisagreementTagged),
    )?;
    Ok(updated)
}
