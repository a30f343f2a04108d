use std::collections::HashSet;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::DomainError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceAnswer {
    pub label: String,
    pub value: String,
}

/// One randomized rendering of a templated question.
///
/// Two instances of the same `question_id` usually differ in `statement`
/// and `reference_answers`; `variant_seed` tells them apart.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub question_id: String,
    pub variant_seed: String,
    pub statement: String,
    pub reference_answers: Vec<ReferenceAnswer>,
    #[serde(default)]
    pub grading_instructions: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceRef {
    pub question_id: String,
    pub variant_seed: String,
}

impl InstanceRef {
    pub fn document_id(&self) -> String {
        format!("{}@{}", self.question_id, self.variant_seed)
    }
}

impl QuestionInstance {
    pub fn reference(&self) -> InstanceRef {
        InstanceRef {
            question_id: self.question_id.clone(),
            variant_seed: self.variant_seed.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.question_id.trim().is_empty() {
            return Err(DomainError::Invalid("question_id is empty".into()));
        }
        if self.statement.trim().is_empty() {
            return Err(DomainError::Invalid(format!(
                "instance {} has an empty statement",
                self.reference().document_id()
            )));
        }
        let mut labels = HashSet::new();
        for answer in &self.reference_answers {
            if !labels.insert(answer.label.as_str()) {
                return Err(DomainError::Invalid(format!(
                    "duplicate reference answer label {}",
                    answer.label
                )));
            }
        }
        Ok(())
    }
}

/// An uploaded image, referenced by the digest of its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionImage {
    pub blob: String,
    pub media_type: String,
    pub captured_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub submission_id: String,
    pub instance: InstanceRef,
    /// Pseudonymous; a group submission carries a single id.
    pub submitter: String,
    pub images: Vec<SubmissionImage>,
    pub final_image_index: usize,
    #[serde(default)]
    pub closed_at: Option<DateTime<Utc>>,
}

impl Submission {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.submission_id.trim().is_empty() {
            return Err(DomainError::Invalid("submission_id is empty".into()));
        }
        if self.images.is_empty() {
            return Err(DomainError::Invalid(format!(
                "submission {} has no images",
                self.submission_id
            )));
        }
        if self.final_image_index != self.images.len() - 1 {
            return Err(DomainError::Invalid(format!(
                "submission {}: final_image_index {} does not address the last of {} images",
                self.submission_id,
                self.final_image_index,
                self.images.len()
            )));
        }
        Ok(())
    }

    pub fn is_closed(&self) -> bool {
        self.closed_at.is_some()
    }

    /// The only image that is ever graded.
    pub fn final_image(&self) -> Option<&SubmissionImage> {
        self.images.get(self.final_image_index)
    }
}
