use serde::{Deserialize, Serialize};

use super::{check_known_items, AiEvaluation, DomainError, HumanEvaluation, ItemSelection, Rational, Rubric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GradeSource {
    Ai,
    Human,
}

/// The grade of record for a submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveGrade {
    pub submission_id: String,
    pub source: GradeSource,
    pub selections: Vec<ItemSelection>,
    pub score: Rational,
}

/// Sum of points over selected items, clamped to `[0, max_points]`.
pub fn compute_score(rubric: &Rubric, selections: &[ItemSelection]) -> Result<Rational, DomainError> {
    check_known_items(rubric, selections)?;
    let raw: Rational = selections
        .iter()
        .filter(|s| s.selected)
        .filter_map(|s| rubric.item(&s.item_id))
        .map(|item| &item.points)
        .sum();
    Ok(raw.clamp_to(&Rational::zero(), &rubric.max_points))
}

/// Human evaluations always take precedence over the AI evaluation.
pub fn resolve_effective_grade(
    ai: Option<&AiEvaluation>,
    human: Option<&HumanEvaluation>,
    rubric: &Rubric,
) -> Result<EffectiveGrade, DomainError> {
    let (submission_id, source, selections) = match (human, ai) {
        (Some(h), _) => (&h.submission_id, GradeSource::Human, &h.selections),
        (None, Some(a)) => (&a.submission_id, GradeSource::Ai, &a.selections),
        (None, None) => return Err(DomainError::NoEvaluation),
    };
    let score = compute_score(rubric, selections)?;
    Ok(EffectiveGrade {
        submission_id: submission_id.clone(),
        source,
        selections: selections.clone(),
        score,
    })
}
