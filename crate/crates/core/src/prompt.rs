//! Deterministic assembly of the single grading prompt.
//!
//! One bundle carries everything the model needs for joint transcription and
//! rubric assessment: statement, instance-specific reference answers, rubric
//! items keyed by id, optional instructions, the directives and response
//! contract from the template, and the submission's final image.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{self, sha256_hex};
use crate::domain::{QuestionInstance, Rubric, Submission};
use crate::parser::CONTRACT_VERSION;

const BUILTIN_TEMPLATE: &str = include_str!("../assets/prompt-template.toml");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("rubric {0} is not finalized")]
    RubricNotFinalized(String),
    #[error("submission {0} is not closed")]
    SubmissionNotClosed(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("cannot read prompt template {path}: {source}")]
    TemplateIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid prompt template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub version: String,
    pub response_contract_version: String,
    pub system: String,
    pub statement_heading: String,
    pub reference_heading: String,
    pub rubric_heading: String,
    pub instructions_heading: String,
    pub transcription_directive: String,
    pub assessment_directive: String,
    pub response_contract: String,
    pub image_caption: String,
    pub repair_notice: String,
}

impl PromptTemplate {
    pub fn builtin() -> PromptTemplate {
        Self::parse(BUILTIN_TEMPLATE).expect("bundled prompt template is valid")
    }

    pub fn from_path(path: &Path) -> Result<PromptTemplate, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::TemplateIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<PromptTemplate, PromptError> {
        let template: PromptTemplate =
            toml::from_str(text).map_err(|e| PromptError::Template(e.to_string()))?;
        if template.version.trim().is_empty() {
            return Err(PromptError::Template("empty version".into()));
        }
        if template.response_contract_version != CONTRACT_VERSION {
            return Err(PromptError::Template(format!(
                "response contract {} is not supported by this parser ({})",
                template.response_contract_version, CONTRACT_VERSION
            )));
        }
        if !template.repair_notice.contains("{defects}") {
            return Err(PromptError::Template("repair_notice lacks {defects}".into()));
        }
        Ok(template)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PromptPart {
    Text { text: String },
    /// Image bytes live in the evidence store under `blob`.
    Image { blob: String, media_type: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub template_version: String,
    pub system_text: String,
    pub user_parts: Vec<PromptPart>,
    pub response_contract: String,
    pub fingerprint: String,
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    template_version: &'a str,
    system_text: &'a str,
    user_parts: &'a [PromptPart],
    response_contract: &'a str,
}

fn fingerprint(template_version: &str, system_text: &str, parts: &[PromptPart], contract: &str) -> String {
    let input = FingerprintInput {
        template_version,
        system_text,
        user_parts: parts,
        response_contract: contract,
    };
    sha256_hex(&codec::to_canonical(&input).expect("prompt parts serialize"))
}

impl PromptBundle {
    fn seal(template_version: String, system_text: String, user_parts: Vec<PromptPart>, response_contract: String) -> Self {
        let fingerprint = fingerprint(&template_version, &system_text, &user_parts, &response_contract);
        PromptBundle {
            template_version,
            system_text,
            user_parts,
            response_contract,
            fingerprint,
        }
    }

    pub fn image_parts(&self) -> impl Iterator<Item = (&str, &str)> {
        self.user_parts.iter().filter_map(|p| match p {
            PromptPart::Image { blob, media_type } => Some((blob.as_str(), media_type.as_str())),
            PromptPart::Text { .. } => None,
        })
    }

    /// All text segments joined, for inspection.
    pub fn text(&self) -> String {
        let mut out = self.system_text.clone();
        for part in &self.user_parts {
            if let PromptPart::Text { text } = part {
                out.push_str("\n\n");
                out.push_str(text);
            }
        }
        out
    }

    /// Recomputes the fingerprint from the parts.
    pub fn verify(&self) -> bool {
        self.fingerprint
            == fingerprint(&self.template_version, &self.system_text, &self.user_parts, &self.response_contract)
    }

    /// A new bundle for the repair re-invocation: this one plus a notice
    /// naming what was wrong with the previous reply.
    pub fn with_repair_notice(&self, template: &PromptTemplate, defects: &str) -> PromptBundle {
        let mut parts = self.user_parts.clone();
        parts.push(PromptPart::Text {
            text: template.repair_notice.replace("{defects}", defects),
        });
        PromptBundle::seal(
            self.template_version.clone(),
            self.system_text.clone(),
            parts,
            self.response_contract.clone(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssemblyOptions {
    pub include_reference_answers: bool,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        AssemblyOptions {
            include_reference_answers: true,
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One line per item, in `order`, each `- [item_id] description (N points)`.
pub fn render_rubric_block(rubric: &Rubric) -> String {
    rubric
        .ordered_items()
        .iter()
        .map(|item| {
            format!(
                "- [{}] {} ({} points)",
                item.item_id,
                one_line(&item.description),
                item.points
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn assemble_prompt(
    instance: &QuestionInstance,
    rubric: &Rubric,
    submission: &Submission,
    options: &AssemblyOptions,
    template: &PromptTemplate,
) -> Result<PromptBundle, PromptError> {
    if !rubric.finalized {
        return Err(PromptError::RubricNotFinalized(rubric.reference().to_string()));
    }
    if !submission.is_closed() {
        return Err(PromptError::SubmissionNotClosed(submission.submission_id.clone()));
    }
    if rubric.question_id != instance.question_id {
        return Err(PromptError::Integrity(format!(
            "rubric {} is for question {}, instance is for {}",
            rubric.reference(),
            rubric.question_id,
            instance.question_id
        )));
    }
    if submission.instance != instance.reference() {
        return Err(PromptError::Integrity(format!(
            "submission {} was made against instance {}, not {}",
            submission.submission_id,
            submission.instance.document_id(),
            instance.reference().document_id()
        )));
    }
    let image = submission.final_image().ok_or_else(|| {
        PromptError::Integrity(format!("submission {} has no final image", submission.submission_id))
    })?;

    let mut parts = vec![PromptPart::Text {
        text: format!("{}\n{}", template.statement_heading, instance.statement.trim_end()),
    }];
    if options.include_reference_answers && !instance.reference_answers.is_empty() {
        let answers = instance
            .reference_answers
            .iter()
            .map(|a| format!("- {}: {}", a.label, a.value))
            .collect::<Vec<_>>()
            .join("\n");
        parts.push(PromptPart::Text {
            text: format!("{}\n{}", template.reference_heading, answers),
        });
    }
    parts.push(PromptPart::Text {
        text: format!("{}\n{}", template.rubric_heading, render_rubric_block(rubric)),
    });
    if let Some(instructions) = instance.grading_instructions.as_deref().filter(|s| !s.trim().is_empty()) {
        parts.push(PromptPart::Text {
            text: format!("{}\n{}", template.instructions_heading, instructions.trim_end()),
        });
    }
    parts.push(PromptPart::Text {
        text: template.transcription_directive.clone(),
    });
    parts.push(PromptPart::Text {
        text: template.assessment_directive.clone(),
    });
    parts.push(PromptPart::Text {
        text: template.response_contract.clone(),
    });
    parts.push(PromptPart::Text {
        text: template.image_caption.clone(),
    });
    parts.push(PromptPart::Image {
        blob: image.blob.clone(),
        media_type: image.media_type.clone(),
    });

    Ok(PromptBundle::seal(
        template.version.clone(),
        template.system.clone(),
        parts,
        template.response_contract.clone(),
    ))
}
