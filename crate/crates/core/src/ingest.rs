//! Dataset manifests and bulk human-grade import.
//!
//! A manifest is one JSON file:
//!
//! ```json
//! {
//!   "instances":     [ QuestionInstance, ... ],
//!   "rubrics":       [ Rubric, ... ],
//!   "model_configs": [ ModelConfig, ... ],
//!   "submissions": [
//!     { "submission_id": "s1", "question_id": "C1-Q1", "variant_seed": "17",
//!       "submitter": "group-3",
//!       "images": [ { "path": "images/s1-0.png", "captured_at": "2025-10-01T10:00:00Z" } ],
//!       "closed_at": "2025-10-01T10:30:00Z" }
//!   ]
//! }
//! ```
//!
//! Image paths are relative to the manifest. The last image is the final
//! one. Re-ingesting the same manifest changes nothing; re-ingesting it with
//! a `closed_at` added closes the submission.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::domain::{
    validate_rubric, HumanEvaluation, InstanceRef, ModelConfig, QuestionInstance, Rubric, Submission,
    SubmissionImage,
};
use crate::store::{Change, DocKind, EventKind, Store, StoreError};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub instances: Vec<QuestionInstance>,
    #[serde(default)]
    pub rubrics: Vec<Rubric>,
    #[serde(default)]
    pub model_configs: Vec<ModelConfig>,
    #[serde(default)]
    pub submissions: Vec<ManifestSubmission>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSubmission {
    pub submission_id: String,
    pub question_id: String,
    pub variant_seed: String,
    pub submitter: String,
    pub images: Vec<ManifestImage>,
    #[serde(default)]
    pub closed_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub path: PathBuf,
    /// Guessed from the extension when absent.
    #[serde(default)]
    pub media_type: Option<String>,
    pub captured_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub instances: usize,
    pub rubrics: usize,
    pub model_configs: usize,
    pub submissions: usize,
    pub images: usize,
    /// Documents whose stored form changed (new or updated).
    pub written: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("validation: {0}")]
    Validation(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl IngestError {
    /// True for problems with the input, as opposed to I/O or storage trouble.
    pub fn is_validation(&self) -> bool {
        match self {
            IngestError::Format { .. } | IngestError::Validation(_) => true,
            IngestError::Store(e) => matches!(e, StoreError::Immutable { .. } | StoreError::InvalidId(_)),
            IngestError::Io { .. } => false,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, IngestError> {
    std::fs::read(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest, IngestError> {
    serde_json::from_slice(&read(path)?).map_err(|e| IngestError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn media_type_for(path: &Path) -> Option<&'static str> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    Some(match ext.as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "webp" => "image/webp",
        "gif" => "image/gif",
        "heic" => "image/heic",
        _ => return None,
    })
}

/// Stores everything a manifest describes. Nothing is written unless the
/// whole manifest validates.
pub fn ingest_manifest(store: &Store, manifest_path: &Path, actor: &str) -> Result<IngestSummary, IngestError> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    validate(store, &manifest)?;

    // read every image before the first write so a missing file aborts cleanly
    let mut images = Vec::new();
    for sub in &manifest.submissions {
        let mut bytes = Vec::with_capacity(sub.images.len());
        for image in &sub.images {
            let path = base.join(&image.path);
            let media_type = match &image.media_type {
                Some(m) => m.clone(),
                None => media_type_for(&path)
                    .ok_or_else(|| {
                        IngestError::Validation(format!("cannot tell the image type of {}", image.path.display()))
                    })?
                    .to_string(),
            };
            bytes.push((read(&path)?, media_type, image.captured_at));
        }
        images.push(bytes);
    }

    let mut summary = IngestSummary::default();
    let mut count = |v: crate::store::StoredVersion| summary.written += usize::from(v.sequence.is_some());
    for instance in &manifest.instances {
        count(store.put_json(
            DocKind::Instance,
            &instance.reference().document_id(),
            instance,
            Change::new(actor, EventKind::InstanceStored),
        )?);
    }
    for rubric in &manifest.rubrics {
        let event = if rubric.finalized { EventKind::RubricFinalized } else { EventKind::RubricStored };
        count(store.put_json(DocKind::Rubric, &rubric.reference().document_id(), rubric, Change::new(actor, event))?);
    }
    for config in &manifest.model_configs {
        count(store.put_json(
            DocKind::ModelConfig,
            &config.model_config_id,
            config,
            Change::new(actor, EventKind::ModelConfigStored),
        )?);
    }
    let mut n_images = 0;
    for (sub, files) in manifest.submissions.iter().zip(images) {
        let mut stored = Vec::with_capacity(files.len());
        for (bytes, media_type, captured_at) in files {
            stored.push(SubmissionImage {
                blob: store.put_blob(&bytes, actor)?,
                media_type,
                captured_at,
            });
            n_images += 1;
        }
        let submission = Submission {
            submission_id: sub.submission_id.clone(),
            instance: InstanceRef {
                question_id: sub.question_id.clone(),
                variant_seed: sub.variant_seed.clone(),
            },
            submitter: sub.submitter.clone(),
            final_image_index: stored.len().saturating_sub(1),
            images: stored,
            closed_at: sub.closed_at,
        };
        count(store.put_json(
            DocKind::Submission,
            &submission.submission_id,
            &submission,
            Change::new(actor, EventKind::SubmissionIngested),
        )?);
    }
    summary.instances = manifest.instances.len();
    summary.rubrics = manifest.rubrics.len();
    summary.model_configs = manifest.model_configs.len();
    summary.submissions = manifest.submissions.len();
    summary.images = n_images;
    Ok(summary)
}

fn validate(store: &Store, manifest: &Manifest) -> Result<(), IngestError> {
    let mut problems = Vec::new();
    for instance in &manifest.instances {
        if let Err(e) = instance.validate() {
            problems.push(format!("instance {}: {e}", instance.reference().document_id()));
        }
    }
    for rubric in &manifest.rubrics {
        if let Err(violations) = validate_rubric(rubric) {
            for v in violations {
                problems.push(format!("rubric {}: {v}", rubric.reference()));
            }
        }
    }
    for config in &manifest.model_configs {
        if let Err(e) = config.validate() {
            problems.push(format!("model config {}: {e}", config.model_config_id));
        }
    }
    for sub in &manifest.submissions {
        if sub.images.is_empty() {
            problems.push(format!("submission {}: no images", sub.submission_id));
        }
        let instance = InstanceRef {
            question_id: sub.question_id.clone(),
            variant_seed: sub.variant_seed.clone(),
        };
        let known = manifest.instances.iter().any(|i| i.reference() == instance)
            || store.contains(DocKind::Instance, &instance.document_id())?;
        if !known {
            problems.push(format!(
                "submission {}: unknown question instance {}",
                sub.submission_id,
                instance.document_id()
            ));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(IngestError::Validation(problems.join("; ")))
    }
}

/// Reads a JSON array of human evaluations.
pub fn load_human_grades(path: &Path) -> Result<Vec<HumanEvaluation>, IngestError> {
    serde_json::from_slice(&read(path)?).map_err(|e| IngestError::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
