//! Review API: the HTTP surface a review console uses to inspect AI grades,
//! record human overrides and tag disagreements.
//!
//! | Method | Path                           | Purpose                                  |
//! |--------|--------------------------------|------------------------------------------|
//! | GET    | `/queue`                       | paged list of graded submissions         |
//! | GET    | `/cases/{submission_id}`       | everything needed to review one case     |
//! | GET    | `/blobs/{digest}`              | submission images (immutable, cacheable) |
//! | POST   | `/cases/{submission_id}/override` | record a human grade                  |
//! | POST   | `/disagreements/{id}/tag`      | tag an FP/FN cell as TE or RAE           |
//! | GET    | `/reports`                     | agreement report (JSON, text, csv, md)   |
//!
//! Errors are JSON `{"error": <code>, "detail": <text>}` with 401, 404, 409
//! or 422. All state lives in the store; the server keeps none of its own.
//! Writes and reads are serialized through one reader-writer gate so every
//! response reflects a single consistent store state.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use inkgrade_core::domain::{
    compute_score, EffectiveGrade, HumanEvaluation, ItemSelection, QualityFlag, QuestionInstance, Rational,
    Rubric, RubricRef, Submission,
};
use inkgrade_core::metrics::{
    self, categorize_disagreement, disagreement_for, item_outcomes, suggest_category, Category, Cell,
    Disagreement, Grouping, MetricsError, Outcome, TableFormat,
};
use inkgrade_core::orchestrator::{Orchestrator, OrchestratorError};
use inkgrade_core::store::{DocKind, StoreError};

/// Environment variable holding the bearer token clients must present.
pub const TOKEN_ENV: &str = "INKGRADE_REVIEW_TOKEN";

#[derive(Clone)]
pub struct AppState {
    orch: Orchestrator,
    token: Option<Arc<str>>,
    gate: Arc<RwLock<()>>,
}

impl AppState {
    /// `token: None` disables authentication (local use only).
    pub fn new(orch: Orchestrator, token: Option<String>) -> Self {
        AppState {
            orch,
            token: token.map(Into::into),
            gate: Arc::new(RwLock::new(())),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            detail: detail.into(),
        }
    }

    fn not_found(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", detail)
    }

    fn validation(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", detail)
    }

    fn internal(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", detail)
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    detail: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code,
            detail: &self.detail,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match &e {
            StoreError::NotFound { .. } | StoreError::BlobNotFound(_) => ApiError::not_found(e.to_string()),
            StoreError::Conflict { .. } | StoreError::Immutable { .. } => {
                ApiError::new(StatusCode::CONFLICT, "conflict", e.to_string())
            }
            StoreError::InvalidId(_) => ApiError::validation(e.to_string()),
            _ => ApiError::internal(e.to_string()),
        }
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::NotFound(d) => ApiError::not_found(d),
            OrchestratorError::Validation(d) | OrchestratorError::Configuration(d) => ApiError::validation(d),
            e @ OrchestratorError::RubricVersionConflict { .. } => {
                ApiError::new(StatusCode::CONFLICT, "rubric-version-conflict", e.to_string())
            }
            OrchestratorError::Store(e) => e.into(),
        }
    }
}

impl From<MetricsError> for ApiError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Validation(d) => ApiError::validation(d),
            MetricsError::NotFound(d) => ApiError::not_found(d),
            MetricsError::Conflict(d) => ApiError::new(StatusCode::CONFLICT, "already-tagged", d),
            MetricsError::Store(e) => e.into(),
            MetricsError::Orchestrator(e) => e.into(),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs store work off the async runtime, under the read or write gate.
async fn run<T: Send + 'static>(
    state: &AppState,
    write: bool,
    f: impl FnOnce(&Orchestrator) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    let orch = state.orch.clone();
    let gate = state.gate.clone();
    tokio::task::spawn_blocking(move || {
        if write {
            let _guard = gate.write().unwrap_or_else(|e| e.into_inner());
            f(&orch)
        } else {
            let _guard = gate.read().unwrap_or_else(|e| e.into_inner());
            f(&orch)
        }
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn require_token(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if !presented.is_some_and(|p| constant_time_eq(p.as_bytes(), token.as_bytes())) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(request).await
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/queue", get(list_queue))
        .route("/cases/{submission_id}", get(get_case))
        .route("/cases/{submission_id}/override", post(post_override))
        .route("/blobs/{digest}", get(get_blob))
        .route("/disagreements/{disagreement_id}/tag", post(post_tag))
        .route("/reports", get(get_reports))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("review API listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisagreementCounts {
    pub uncategorized: usize,
    pub te: usize,
    pub rae: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewQueueEntry {
    pub submission_id: String,
    pub question_id: String,
    pub model_config_id: String,
    pub evaluation_id: String,
    pub ai_score: Rational,
    pub has_override: bool,
    pub disagreements: DisagreementCounts,
    pub quality_flags: Vec<QualityFlag>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueuePage {
    pub entries: Vec<ReviewQueueEntry>,
    pub next_cursor: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct QueueQuery {
    limit: Option<usize>,
    cursor: Option<String>,
    question: Option<String>,
    model: Option<String>,
    has_override: Option<bool>,
}

const DEFAULT_PAGE: usize = 50;
const MAX_PAGE: usize = 500;

fn queue_entries(orch: &Orchestrator) -> ApiResult<Vec<ReviewQueueEntry>> {
    let mut rubrics: BTreeMap<String, Rubric> = BTreeMap::new();
    let mut entries = Vec::new();
    for (submission_id, evaluations) in orch.all_ai_evaluations()? {
        let human = orch.latest_human(&submission_id)?;
        for (model_config_id, evaluation) in evaluations {
            let key = evaluation.rubric.document_id();
            if !rubrics.contains_key(&key) {
                rubrics.insert(key.clone(), orch.load_rubric(&evaluation.rubric)?);
            }
            let rubric = &rubrics[&key];
            let mut counts = DisagreementCounts::default();
            if let Some(h) = human.as_ref().filter(|h| h.rubric == evaluation.rubric) {
                for outcome in item_outcomes(&evaluation, h, rubric).map_err(|e| ApiError::internal(e.to_string()))? {
                    if !outcome.outcome.is_disagreement() {
                        continue;
                    }
                    let cell = Cell {
                        outcome,
                        evaluation: evaluation.clone(),
                    };
                    match disagreement_for(orch, &cell)?.category {
                        Category::Uncategorized => counts.uncategorized += 1,
                        Category::Te => counts.te += 1,
                        Category::Rae => counts.rae += 1,
                    }
                }
            }
            entries.push(ReviewQueueEntry {
                submission_id: submission_id.clone(),
                question_id: rubric.question_id.clone(),
                model_config_id,
                evaluation_id: evaluation.evaluation_id.clone(),
                ai_score: compute_score(rubric, &evaluation.selections).map_err(|e| ApiError::internal(e.to_string()))?,
                has_override: human.is_some(),
                disagreements: counts,
                quality_flags: evaluation.quality_flags.clone(),
            });
        }
    }
    Ok(entries)
}

async fn list_queue(State(state): State<AppState>, Query(q): Query<QueueQuery>) -> ApiResult<Json<QueuePage>> {
    let offset = match q.cursor.as_deref() {
        None | Some("") => 0,
        Some(c) => c.parse::<usize>().map_err(|_| ApiError::validation(format!("bad cursor {c:?}")))?,
    };
    let limit = q.limit.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::validation(format!("limit must be between 1 and {MAX_PAGE}")));
    }
    let page = run(&state, false, move |orch| {
        let filtered: Vec<ReviewQueueEntry> = queue_entries(orch)?
            .into_iter()
            .filter(|e| q.question.as_ref().is_none_or(|x| *x == e.question_id))
            .filter(|e| q.model.as_ref().is_none_or(|x| *x == e.model_config_id))
            .filter(|e| q.has_override.is_none_or(|x| x == e.has_override))
            .collect();
        let end = (offset + limit).min(filtered.len());
        let entries = filtered.get(offset..end).map(<[_]>::to_vec).unwrap_or_default();
        Ok(QueuePage {
            entries,
            next_cursor: (end < filtered.len()).then(|| end.to_string()),
        })
    })
    .await?;
    Ok(Json(page))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRef {
    pub blob: String,
    pub media_type: String,
    pub href: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseCell {
    pub item_id: String,
    pub description: String,
    pub points: Rational,
    pub ai_selected: bool,
    pub justification: String,
    pub human_selected: Option<bool>,
    pub outcome: Option<Outcome>,
    pub disagreement: Option<Disagreement>,
    pub suggestion: Option<Category>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseEvaluation {
    pub evaluation_id: String,
    pub model_config_id: String,
    pub rubric: RubricRef,
    pub transcription: String,
    pub quality_flags: Vec<QualityFlag>,
    pub ai_score: Rational,
    pub cells: Vec<CaseCell>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Case {
    pub submission: Submission,
    pub instance: QuestionInstance,
    pub final_image: Option<ImageRef>,
    /// The rubric version overrides are validated against.
    pub rubric: Rubric,
    pub evaluations: Vec<CaseEvaluation>,
    pub human: Option<HumanEvaluation>,
    pub override_count: usize,
    pub effective_grade: Option<EffectiveGrade>,
}

fn build_case(orch: &Orchestrator, submission_id: &str) -> ApiResult<Case> {
    let submission = orch.load_submission(submission_id)?;
    let instance: QuestionInstance = orch
        .store()
        .find_json(DocKind::Instance, &submission.instance.document_id())?
        .ok_or_else(|| ApiError::not_found(format!("instance {}", submission.instance.document_id())))?;
    let rubric = orch.rubric_on_record(&submission)?;
    let history = orch.human_history(submission_id)?;
    let human = history.last().cloned();
    let mut evaluations = Vec::new();
    for (model_config_id, evaluation) in orch.ai_evaluations(submission_id)? {
        let eval_rubric = if evaluation.rubric == rubric.reference() {
            rubric.clone()
        } else {
            orch.load_rubric(&evaluation.rubric)?
        };
        let paired = human.as_ref().filter(|h| h.rubric == evaluation.rubric);
        let outcomes = match paired {
            Some(h) => Some(item_outcomes(&evaluation, h, &eval_rubric).map_err(|e| ApiError::internal(e.to_string()))?),
            None => None,
        };
        let suggestion = suggest_category(&evaluation);
        let mut cells = Vec::new();
        for item in eval_rubric.ordered_items() {
            let selection = evaluation.selection(&item.item_id);
            let outcome = outcomes
                .as_ref()
                .and_then(|o| o.iter().find(|o| o.item_id == item.item_id).cloned());
            let disagreement = match &outcome {
                Some(o) if o.outcome.is_disagreement() => Some(disagreement_for(
                    orch,
                    &Cell {
                        outcome: o.clone(),
                        evaluation: evaluation.clone(),
                    },
                )?),
                _ => None,
            };
            cells.push(CaseCell {
                item_id: item.item_id.clone(),
                description: item.description.clone(),
                points: item.points.clone(),
                ai_selected: selection.is_some_and(|s| s.selected),
                justification: selection.map(|s| s.justification.clone()).unwrap_or_default(),
                human_selected: outcome.as_ref().map(|o| o.human_selected),
                outcome: outcome.as_ref().map(|o| o.outcome),
                suggestion: disagreement
                    .as_ref()
                    .filter(|d| d.category == Category::Uncategorized)
                    .and(suggestion),
                disagreement,
            });
        }
        evaluations.push(CaseEvaluation {
            evaluation_id: evaluation.evaluation_id.clone(),
            model_config_id,
            rubric: evaluation.rubric.clone(),
            transcription: evaluation.transcription.clone(),
            quality_flags: evaluation.quality_flags.clone(),
            ai_score: compute_score(&eval_rubric, &evaluation.selections)
                .map_err(|e| ApiError::internal(e.to_string()))?,
            cells,
        });
    }
    let final_image = submission.final_image().map(|image| ImageRef {
        blob: image.blob.clone(),
        media_type: image.media_type.clone(),
        href: format!("/blobs/{}", image.blob),
    });
    Ok(Case {
        effective_grade: orch.effective_grade(submission_id, None)?,
        submission,
        instance,
        final_image,
        rubric,
        evaluations,
        human,
        override_count: history.len(),
    })
}

async fn get_case(State(state): State<AppState>, Path(submission_id): Path<String>) -> ApiResult<Json<Case>> {
    Ok(Json(run(&state, false, move |orch| build_case(orch, &submission_id)).await?))
}

fn sniff_media_type(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        "image/png"
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        "image/jpeg"
    } else if bytes.starts_with(b"GIF8") {
        "image/gif"
    } else if bytes.len() >= 12 && &bytes[..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        "image/webp"
    } else {
        "application/octet-stream"
    }
}

async fn get_blob(
    State(state): State<AppState>,
    Path(digest): Path<String>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
        return Err(ApiError::validation("blob digest must be 64 lowercase hex characters"));
    }
    let etag = format!("\"{digest}\"");
    let cache = HeaderValue::from_static("public, max-age=31536000, immutable");
    let etag_value = HeaderValue::from_str(&etag).map_err(|e| ApiError::internal(e.to_string()))?;
    let matches = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == etag || t.trim() == "*"));
    let bytes = run(&state, false, move |orch| Ok(orch.store().get_blob(&digest)?)).await?;
    if matches {
        return Ok((
            StatusCode::NOT_MODIFIED,
            [(header::ETAG, etag_value), (header::CACHE_CONTROL, cache)],
        )
            .into_response());
    }
    let content_type = HeaderValue::from_static(sniff_media_type(&bytes));
    Ok((
        StatusCode::OK,
        [
            (header::CONTENT_TYPE, content_type),
            (header::ETAG, etag_value),
            (header::CACHE_CONTROL, cache),
        ],
        Body::from(bytes),
    )
        .into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverrideRequest {
    pub grader_id: String,
    /// The rubric version the grader was looking at.
    pub rubric: RubricRef,
    pub selections: Vec<ItemSelection>,
}

fn json_body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::validation(e.body_text()))
}

async fn post_override(
    State(state): State<AppState>,
    Path(submission_id): Path<String>,
    payload: Result<Json<OverrideRequest>, JsonRejection>,
) -> ApiResult<Json<EffectiveGrade>> {
    let request = json_body(payload)?;
    if request.grader_id.trim().is_empty() {
        return Err(ApiError::validation("grader_id is required"));
    }
    let grade = run(&state, true, move |orch| {
        let human = HumanEvaluation {
            submission_id: submission_id.clone(),
            grader_id: request.grader_id,
            rubric: request.rubric,
            selections: request.selections,
            created_at: orch.now(),
        };
        Ok(orch.record_override(&submission_id, &human)?)
    })
    .await?;
    Ok(Json(grade))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TagRequest {
    pub category: Category,
    #[serde(default)]
    pub note: String,
    pub tagger: String,
    /// Required to replace an existing tag.
    #[serde(default)]
    pub retag: bool,
}

async fn post_tag(
    State(state): State<AppState>,
    Path(disagreement_id): Path<String>,
    payload: Result<Json<TagRequest>, JsonRejection>,
) -> ApiResult<Json<Disagreement>> {
    let request = json_body(payload)?;
    let tagged = run(&state, true, move |orch| {
        Ok(categorize_disagreement(
            orch,
            &disagreement_id,
            request.category,
            &request.note,
            &request.tagger,
            request.retag,
            orch.now(),
        )?)
    })
    .await?;
    Ok(Json(tagged))
}

#[derive(Debug, Default, Deserialize)]
struct ReportQuery {
    group: Option<String>,
    format: Option<String>,
}

async fn get_reports(State(state): State<AppState>, Query(q): Query<ReportQuery>) -> ApiResult<Response> {
    let grouping: Grouping = q
        .group
        .as_deref()
        .unwrap_or("question,model")
        .parse()
        .map_err(ApiError::validation)?;
    let format = match q.format.as_deref() {
        None | Some("json") => None,
        Some(f) => Some(f.parse::<TableFormat>().map_err(ApiError::validation)?),
    };
    let reports = run(&state, false, move |orch| Ok(metrics::collect(orch)?.report(grouping))).await?;
    Ok(match format {
        None => Json(serde_json::json!({ "reports": reports })).into_response(),
        Some(f) => {
            let content_type = match f {
                TableFormat::Csv => "text/csv; charset=utf-8",
                TableFormat::Markdown => "text/markdown; charset=utf-8",
                TableFormat::Text => "text/plain; charset=utf-8",
            };
            ([(header::CONTENT_TYPE, content_type)], metrics::render_table(&reports, f)).into_response()
        }
    })
}
