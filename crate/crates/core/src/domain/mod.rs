//! Core grading types, rubric validation, scoring, and grade precedence.
//!
//! Everything here is an immutable value plus pure functions over it.

mod evaluation;
mod grade;
mod model;
mod rational;
mod rubric;
mod submission;

pub use evaluation::{
    check_coverage, check_known_items, AiEvaluation, HumanEvaluation, ItemSelection, QualityFlag,
    TokenUsage,
};
pub use grade::{compute_score, resolve_effective_grade, EffectiveGrade, GradeSource};
pub use model::{CostRates, ModelConfig, Provider, RetryPolicy};
pub use rational::{ParseRationalError, Rational};
pub use rubric::{validate_rubric, Rubric, RubricItem, RubricRef, RubricViolation};
pub use submission::{InstanceRef, QuestionInstance, ReferenceAnswer, Submission, SubmissionImage};

/// Rubric item points.
pub type Points = Rational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DomainError {
    #[error("unknown item_id {0}")]
    UnknownItem(String),
    #[error("missing selection for item_id {0}")]
    MissingItem(String),
    #[error("duplicate selection for item_id {0}")]
    DuplicateItem(String),
    #[error("neither an AI nor a human evaluation is present")]
    NoEvaluation,
    #[error("{0}")]
    Invalid(String),
}
