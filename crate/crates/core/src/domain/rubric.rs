use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Points;

/// One instructor-defined condition worth signed points.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricItem {
    pub item_id: String,
    pub description: String,
    pub points: Points,
    pub order: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rubric {
    pub rubric_id: String,
    pub question_id: String,
    pub items: Vec<RubricItem>,
    pub max_points: Points,
    pub finalized: bool,
    pub version: u32,
}

/// Identifies one version of a rubric.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RubricRef {
    pub rubric_id: String,
    pub version: u32,
}

impl RubricRef {
    /// Store document id, `<rubric_id>@v<version>`.
    pub fn document_id(&self) -> String {
        format!("{}@v{}", self.rubric_id, self.version)
    }
}

impl fmt::Display for RubricRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@v{}", self.rubric_id, self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RubricViolation {
    EmptyRubric,
    EmptyRubricId,
    EmptyQuestionId,
    DuplicateItemId(String),
    EmptyItemId { position: usize },
    EmptyDescription(String),
    NegativeMaxPoints,
}

impl fmt::Display for RubricViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RubricViolation::EmptyRubric => write!(f, "empty rubric"),
            RubricViolation::EmptyRubricId => write!(f, "empty rubric_id"),
            RubricViolation::EmptyQuestionId => write!(f, "empty question_id"),
            RubricViolation::DuplicateItemId(id) => write!(f, "duplicate item_id {id}"),
            RubricViolation::EmptyItemId { position } => {
                write!(f, "empty item_id at position {position}")
            }
            RubricViolation::EmptyDescription(id) => write!(f, "empty description on item {id}"),
            RubricViolation::NegativeMaxPoints => write!(f, "max_points is negative"),
        }
    }
}

/// Checks every rubric invariant and reports all violations found.
pub fn validate_rubric(rubric: &Rubric) -> Result<(), Vec<RubricViolation>> {
    let mut violations = Vec::new();
    if rubric.rubric_id.trim().is_empty() {
        violations.push(RubricViolation::EmptyRubricId);
    }
    if rubric.question_id.trim().is_empty() {
        violations.push(RubricViolation::EmptyQuestionId);
    }
    if rubric.items.is_empty() {
        violations.push(RubricViolation::EmptyRubric);
    }
    let mut seen = HashSet::new();
    for (position, item) in rubric.items.iter().enumerate() {
        if item.item_id.trim().is_empty() {
            violations.push(RubricViolation::EmptyItemId { position });
        } else if !seen.insert(item.item_id.as_str()) {
            violations.push(RubricViolation::DuplicateItemId(item.item_id.clone()));
        }
        if item.description.trim().is_empty() {
            violations.push(RubricViolation::EmptyDescription(item.item_id.clone()));
        }
    }
    if rubric.max_points.is_negative() {
        violations.push(RubricViolation::NegativeMaxPoints);
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

impl Rubric {
    pub fn reference(&self) -> RubricRef {
        RubricRef {
            rubric_id: self.rubric_id.clone(),
            version: self.version,
        }
    }

    pub fn item(&self, item_id: &str) -> Option<&RubricItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    /// Items sorted by `order`; ties keep their list position.
    pub fn ordered_items(&self) -> Vec<&RubricItem> {
        let mut items: Vec<&RubricItem> = self.items.iter().collect();
        items.sort_by_key(|i| i.order);
        items
    }

    /// Returns the finalized form of this draft. Already-finalized rubrics
    /// are returned unchanged.
    pub fn finalize(mut self) -> Result<Rubric, Vec<RubricViolation>> {
        validate_rubric(&self)?;
        self.finalized = true;
        Ok(self)
    }

    /// Starts an editable draft one version above this rubric.
    pub fn revise(&self) -> Rubric {
        Rubric {
            finalized: false,
            version: self.version + 1,
            ..self.clone()
        }
    }
}
