use std::collections::HashSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{DomainError, ModelConfig, Rubric, RubricRef};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSelection {
    pub item_id: String,
    pub selected: bool,
    pub justification: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Signals surfaced to reviewers alongside an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QualityFlag {
    EmptyTranscription,
    Repaired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiEvaluation {
    pub evaluation_id: String,
    pub submission_id: String,
    pub model_config_id: String,
    pub model_config: ModelConfig,
    pub rubric: RubricRef,
    pub transcription: String,
    pub selections: Vec<ItemSelection>,
    pub raw_response_digest: String,
    pub usage: TokenUsage,
    pub contract_version: String,
    pub prompt_fingerprint: String,
    #[serde(default)]
    pub quality_flags: Vec<QualityFlag>,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanEvaluation {
    pub submission_id: String,
    pub grader_id: String,
    pub rubric: RubricRef,
    pub selections: Vec<ItemSelection>,
    pub created_at: DateTime<Utc>,
}

impl AiEvaluation {
    pub fn is_degraded(&self) -> bool {
        self.quality_flags.contains(&QualityFlag::EmptyTranscription)
    }

    pub fn selection(&self, item_id: &str) -> Option<&ItemSelection> {
        self.selections.iter().find(|s| s.item_id == item_id)
    }
}

impl HumanEvaluation {
    pub fn selection(&self, item_id: &str) -> Option<&ItemSelection> {
        self.selections.iter().find(|s| s.item_id == item_id)
    }
}

/// Every item_id must exist in the rubric, at most once.
pub fn check_known_items(rubric: &Rubric, selections: &[ItemSelection]) -> Result<(), DomainError> {
    let mut seen = HashSet::new();
    for s in selections {
        if rubric.item(&s.item_id).is_none() {
            return Err(DomainError::UnknownItem(s.item_id.clone()));
        }
        if !seen.insert(s.item_id.as_str()) {
            return Err(DomainError::DuplicateItem(s.item_id.clone()));
        }
    }
    Ok(())
}

/// Exactly one selection per rubric item.
pub fn check_coverage(rubric: &Rubric, selections: &[ItemSelection]) -> Result<(), DomainError> {
    check_known_items(rubric, selections)?;
    for item in &rubric.items {
        if !selections.iter().any(|s| s.item_id == item.item_id) {
            return Err(DomainError::MissingItem(item.item_id.clone()));
        }
    }
    Ok(())
}
