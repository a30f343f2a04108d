//! `inkgrade`: operator commands over a grading store.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 I/O or provider
//! failure. Each subcommand maps onto one engine operation and is safe to
//! re-run.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use inkgrade_core::domain::{ModelConfig, Provider, Rubric, RubricRef, Submission};
use inkgrade_core::gateway::{
    live_provider, FixtureStore, Gateway, GatewayError, ModelProvider, RecordingProvider, ReplayProvider,
};
use inkgrade_core::ingest::{ingest_manifest, load_human_grades, IngestError};
use inkgrade_core::metrics::{
    self, categorize_disagreement, disagreement_for, suggest_category, Category, Cell, Grouping, MetricsError,
    TableFormat,
};
use inkgrade_core::orchestrator::{JobStatus, Orchestrator, OrchestratorError, RunSummary};
use inkgrade_core::prompt::PromptTemplate;
use inkgrade_core::store::{DocKind, Store, StoreError, StoreOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

/// Actor name written to the audit log for CLI writes.
const ACTOR: &str = "cli";

#[derive(Debug, Parser)]
#[command(name = "inkgrade", version, about = "Rubric grading of handwritten work with vision models")]
pub struct Cli {
    /// Store directory (created if missing).
    #[arg(long, env = "INKGRADE_STORE", global = true)]
    store: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load question instances, rubrics, model configs and submissions from a manifest.
    Ingest {
        manifest: PathBuf,
    },
    /// Finalize a stored rubric version (`rubric_id@vN`).
    FinalizeRubric {
        rubric: String,
    },
    /// Create grading jobs for a finalized rubric and one or more model configs.
    Enqueue {
        /// Rubric version, `rubric_id@vN`.
        #[arg(long)]
        rubric: String,
        /// Stored model config id; repeat for several models.
        #[arg(long = "model-config", required = true)]
        model_configs: Vec<String>,
        /// Submissions to grade; defaults to every submission for the rubric's question.
        #[arg(long = "submission")]
        submissions: Vec<String>,
    },
    /// Execute pending jobs.
    RunJobs {
        /// `replay` answers from recorded fixtures; `live` calls each
        /// config's provider; `openai` / `gemini` run live jobs of that
        /// provider only.
        #[arg(long, default_value = "replay")]
        provider: String,
        /// Fixture directory; defaults to `<store>/fixtures`.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Save every live reply as a replay fixture.
        #[arg(long)]
        record: bool,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Only run jobs for this model config.
        #[arg(long = "model-config")]
        model_config: Option<String>,
    },
    /// Requeue FAILED jobs as a new generation.
    RetryFailed {
        /// Specific job ids; defaults to every failed job.
        #[arg(long = "job")]
        jobs: Vec<String>,
    },
    /// Import human grades from a JSON array of human evaluations.
    OverrideImport {
        file: PathBuf,
    },
    /// Tag a disagreement as a transcription error (TE) or rubric-application error (RAE).
    Tag {
        disagreement_id: String,
        #[arg(long)]
        category: Category,
        #[arg(long, default_value = "")]
        note: String,
        #[arg(long)]
        tagger: String,
        /// Replace an existing tag.
        #[arg(long)]
        retag: bool,
    },
    /// List every disagreement with its current tag.
    ExportTags {
        #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
        format: String,
    },
    /// Render the agreement table.
    Report {
        /// Comma-separated grouping keys: question, model.
        #[arg(long, default_value = "question,model")]
        group: Grouping,
        #[arg(long, default_value = "text")]
        format: TableFormat,
    },
    /// Serve the review API. Clients authenticate with the bearer token in
    /// INKGRADE_REVIEW_TOKEN.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8321")]
        addr: SocketAddr,
    },
}

/// Outcome of one command invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandResult {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
}

#[derive(Debug)]
enum CliError {
    Invalid(String),
    Failure(String),
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Immutable { .. } | StoreError::InvalidId(_) | StoreError::Conflict { .. } => {
                CliError::Invalid(e.to_string())
            }
            StoreError::NotFound { .. } | StoreError::BlobNotFound(_) => CliError::Invalid(e.to_string()),
            _ => CliError::Failure(e.to_string()),
        }
    }
}

impl From<OrchestratorError> for CliError {
    fn from(e: OrchestratorError) -> Self {
        match e {
            OrchestratorError::Configuration(d) | OrchestratorError::Validation(d) | OrchestratorError::NotFound(d) => {
                CliError::Invalid(d)
            }
            e @ OrchestratorError::RubricVersionConflict { .. } => CliError::Invalid(e.to_string()),
            OrchestratorError::Store(e) => e.into(),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Validation(d) | MetricsError::NotFound(d) | MetricsError::Conflict(d) => CliError::Invalid(d),
            MetricsError::Store(e) => e.into(),
            MetricsError::Orchestrator(e) => e.into(),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        if e.is_validation() {
            CliError::Invalid(e.to_string())
        } else {
            CliError::Failure(e.to_string())
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::InvalidConfig(d) => CliError::Invalid(d),
            other => CliError::Failure(other.to_string()),
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_command<I, T>(argv: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => CommandResult {
                    exit_code: EXIT_OK,
                    stdout: text,
                    stderr: String::new(),
                },
                _ => CommandResult {
                    exit_code: EXIT_INVALID,
                    stdout: String::new(),
                    stderr: text,
                },
            };
        }
    };
    let mut out = Output::default();
    let exit_code = match execute(cli, &mut out) {
        Ok(code) => code,
        Err(CliError::Invalid(msg)) => {
            out.err(&format!("error: {msg}"));
            EXIT_INVALID
        }
        Err(CliError::Failure(msg)) => {
            out.err(&format!("error: {msg}"));
            EXIT_FAILURE
        }
    };
    CommandResult {
        exit_code,
        stdout: out.stdout,
        stderr: out.stderr,
    }
}

#[derive(Default)]
struct Output {
    stdout: String,
    stderr: String,
}

impl Output {
    fn line(&mut self, s: &str) {
        self.stdout.push_str(s);
        self.stdout.push('\n');
    }

    fn raw(&mut self, s: &str) {
        self.stdout.push_str(s);
    }

    fn err(&mut self, s: &str) {
        self.stderr.push_str(s);
        self.stderr.push('\n');
    }
}

fn open(store: &Path) -> Result<Orchestrator, CliError> {
    let store = Store::open_exclusive(store, StoreOptions::default()).map_err(|e| match e {
        StoreError::Locked(p) => CliError::Failure(format!(
            "store {} is in use by another inkgrade process",
            p.display()
        )),
        other => other.into(),
    })?;
    Ok(Orchestrator::new(Arc::new(store), PromptTemplate::builtin()).with_actor(ACTOR))
}

fn parse_rubric_ref(s: &str) -> Result<RubricRef, CliError> {
    let invalid = || CliError::Invalid(format!("rubric must be written as rubric_id@vN, got {s:?}"));
    let (id, version) = s.rsplit_once("@v").ok_or_else(invalid)?;
    let version = version.parse().map_err(|_| invalid())?;
    if id.is_empty() {
        return Err(invalid());
    }
    Ok(RubricRef {
        rubric_id: id.to_string(),
        version,
    })
}

fn execute(cli: Cli, out: &mut Output) -> Result<i32, CliError> {
    let store_dir = cli
        .store
        .ok_or_else(|| CliError::Invalid("no store given; pass --store <dir> or set INKGRADE_STORE".into()))?;
    match cli.command {
        Command::Ingest { manifest } => {
            let orch = open(&store_dir)?;
            let s = ingest_manifest(orch.store(), &manifest, ACTOR)?;
            out.line(&format!(
                "ingested {} instances, {} rubrics, {} model configs, {} submissions ({} images); {} documents written",
                s.instances, s.rubrics, s.model_configs, s.submissions, s.images, s.written
            ));
        }
        Command::FinalizeRubric { rubric } => {
            let orch = open(&store_dir)?;
            let finalized = orch.finalize_rubric(&parse_rubric_ref(&rubric)?)?;
            out.line(&format!("finalized {}", finalized.reference()));
        }
        Command::Enqueue {
            rubric,
            model_configs,
            submissions,
        } => {
            let orch = open(&store_dir)?;
            let reference = parse_rubric_ref(&rubric)?;
            let rubric: Rubric = orch.load_rubric(&reference)?;
            if !rubric.finalized {
                return Err(CliError::Invalid(format!("rubric not finalized: {reference}")));
            }
            let submissions = if submissions.is_empty() {
                orch.store()
                    .load_all::<Submission>(DocKind::Submission)?
                    .into_iter()
                    .filter(|(_, s)| s.instance.question_id == rubric.question_id)
                    .map(|(id, _)| id)
                    .collect()
            } else {
                submissions
            };
            let mut counts: BTreeMap<JobStatus, usize> = BTreeMap::new();
            for id in &model_configs {
                let config: ModelConfig = orch
                    .store()
                    .find_json(DocKind::ModelConfig, id)?
                    .ok_or_else(|| CliError::Invalid(format!("unknown model config {id}")))?;
                for job in orch.enqueue_assessment(&submissions, &rubric, &config)? {
                    *counts.entry(job.status).or_default() += 1;
                }
            }
            let total: usize = counts.values().sum();
            let detail: Vec<String> = counts.iter().map(|(s, n)| format!("{n} {s:?}").to_lowercase()).collect();
            out.line(&format!("{total} jobs enqueued ({})", detail.join(", ")));
        }
        Command::RunJobs {
            provider,
            fixtures,
            record,
            workers,
            model_config,
        } => {
            let orch = open(&store_dir)?;
            let fixtures = FixtureStore::new(fixtures.unwrap_or_else(|| store_dir.join("fixtures")));
            let recovered = orch.recover_interrupted()?;
            if recovered > 0 {
                out.err(&format!("requeued {recovered} interrupted jobs"));
            }
            let summary = run_jobs(&orch, &provider, fixtures, record, workers, model_config.as_deref())?;
            out.line(&format!(
                "{} jobs executed ({} done, {} failed)",
                summary.executed, summary.done, summary.failed
            ));
            if summary.failed > 0 {
                for job in orch.jobs()?.into_iter().filter(|j| j.status == JobStatus::Failed) {
                    out.err(&format!(
                        "failed {}: {} {}",
                        job.job_id,
                        job.error_code.as_deref().unwrap_or("-"),
                        job.last_error.as_deref().unwrap_or("")
                    ));
                }
                return Ok(EXIT_FAILURE);
            }
        }
        Command::RetryFailed { jobs } => {
            let orch = open(&store_dir)?;
            let targets: Vec<String> = if jobs.is_empty() {
                let all = orch.jobs()?;
                let retried: BTreeSet<(String, String, String, u32)> = all
                    .iter()
                    .map(|j| (j.submission_id.clone(), j.rubric.to_string(), j.model_config_id.clone(), j.generation))
                    .collect();
                all.iter()
                    .filter(|j| j.status == JobStatus::Failed)
                    .filter(|j| {
                        !retried.contains(&(
                            j.submission_id.clone(),
                            j.rubric.to_string(),
                            j.model_config_id.clone(),
                            j.generation + 1,
                        ))
                    })
                    .map(|j| j.job_id.clone())
                    .collect()
            } else {
                jobs
            };
            for id in &targets {
                let job = orch.retry_failed(id)?;
                out.line(&format!("requeued {id} as {}", job.job_id));
            }
            out.line(&format!("{} jobs requeued", targets.len()));
        }
        Command::OverrideImport { file } => {
            let orch = open(&store_dir)?;
            let grades = load_human_grades(&file)?;
            // validate everything first so a bad row leaves the store untouched
            for (n, grade) in grades.iter().enumerate() {
                orch.check_override(&grade.submission_id, grade).map_err(|e| {
                    let e: CliError = e.into();
                    match e {
                        CliError::Invalid(m) => CliError::Invalid(format!("record {}: {m}", n + 1)),
                        other => other,
                    }
                })?;
            }
            let mut imported = 0;
            let mut unchanged = 0;
            for grade in &grades {
                if orch.latest_human(&grade.submission_id)?.as_ref() == Some(grade) {
                    unchanged += 1;
                } else {
                    orch.record_override(&grade.submission_id, grade)?;
                    imported += 1;
                }
            }
            out.line(&format!("imported {imported} human grades ({unchanged} unchanged)"));
        }
        Command::Tag {
            disagreement_id,
            category,
            note,
            tagger,
            retag,
        } => {
            let orch = open(&store_dir)?;
            let d = categorize_disagreement(&orch, &disagreement_id, category, &note, &tagger, retag, orch.now())?;
            out.line(&format!("{} tagged {}", d.disagreement_id, d.category));
        }
        Command::ExportTags { format } => {
            let orch = open(&store_dir)?;
            out.raw(&export_tags(&orch, &format)?);
        }
        Command::Report { group, format } => {
            let orch = open(&store_dir)?;
            let reports = metrics::collect(&orch)?.report(group);
            out.raw(&metrics::render_table(&reports, format));
        }
        Command::Serve { addr } => {
            let token = std::env::var(inkgrade_review_api::TOKEN_ENV).ok().filter(|t| !t.is_empty());
            if token.is_none() && !addr.ip().is_loopback() {
                return Err(CliError::Invalid(format!(
                    "refusing to serve on {addr} without {} set",
                    inkgrade_review_api::TOKEN_ENV
                )));
            }
            let orch = open(&store_dir)?;
            let state = inkgrade_review_api::AppState::new(orch, token);
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Failure(e.to_string()))?;
            runtime
                .block_on(inkgrade_review_api::serve(addr, state))
                .map_err(|e| CliError::Failure(format!("serve: {e}")))?;
        }
    }
    Ok(EXIT_OK)
}

fn run_jobs(
    orch: &Orchestrator,
    provider: &str,
    fixtures: FixtureStore,
    record: bool,
    workers: usize,
    model_config: Option<&str>,
) -> Result<RunSummary, CliError> {
    let only = match provider {
        "replay" => {
            if record {
                return Err(CliError::Invalid("--record needs a live provider".into()));
            }
            let gateway = Gateway::new(Arc::new(ReplayProvider::new(fixtures)));
            return Ok(orch.run_pending(&gateway, workers, model_config)?);
        }
        "live" => None,
        "openai" => Some(Provider::OpenAi),
        "gemini" => Some(Provider::Gemini),
        other => {
            return Err(CliError::Invalid(format!(
                "unknown provider {other:?} (expected replay, live, openai, gemini)"
            )))
        }
    };
    let pending: BTreeSet<String> = orch
        .jobs()?
        .into_iter()
        .filter(|j| j.status == JobStatus::Pending)
        .filter(|j| model_config.is_none_or(|m| m == j.model_config_id))
        .map(|j| j.model_config_id)
        .collect();
    let mut total = RunSummary::default();
    for id in pending {
        let config: ModelConfig = orch.store().get_json(DocKind::ModelConfig, &id)?;
        if only.is_some_and(|p| p != config.provider) {
            continue;
        }
        let live = live_provider(&config, orch.store().clone())?;
        let provider: Arc<dyn ModelProvider> = if record {
            Arc::new(RecordingProvider::new(live, fixtures.clone()))
        } else {
            live
        };
        let summary = orch.run_pending(&Gateway::new(provider), workers, Some(&id))?;
        total.executed += summary.executed;
        total.done += summary.done;
        total.failed += summary.failed;
    }
    Ok(total)
}

const EXPORT_COLUMNS: [&str; 12] = [
    "disagreement_id",
    "submission_id",
    "question_id",
    "model_config_id",
    "item_id",
    "outcome",
    "category",
    "note",
    "tagger",
    "tagged_at",
    "suggestion",
    "history",
];

fn export_tags(orch: &Orchestrator, format: &str) -> Result<String, CliError> {
    let data = metrics::collect(orch)?;
    let mut evaluations = BTreeMap::new();
    let mut rows = Vec::new();
    for outcome in data.outcomes.into_iter().filter(|o| o.outcome.is_disagreement()) {
        if !evaluations.contains_key(&outcome.evaluation_id) {
            let e: inkgrade_core::domain::AiEvaluation =
                orch.store().get_json(DocKind::AiEvaluation, &outcome.evaluation_id)?;
            evaluations.insert(outcome.evaluation_id.clone(), e);
        }
        let evaluation = evaluations[&outcome.evaluation_id].clone();
        let suggestion = suggest_category(&evaluation);
        let d = disagreement_for(orch, &Cell { outcome: outcome.clone(), evaluation })?;
        rows.push((outcome, d, suggestion));
    }
    rows.sort_by(|a, b| a.1.disagreement_id.cmp(&b.1.disagreement_id));
    if format == "json" {
        let values: Vec<serde_json::Value> = rows
            .iter()
            .map(|(o, d, s)| {
                serde_json::json!({
                    "disagreement": d,
                    "question_id": o.question_id,
                    "model_config_id": o.model_config_id,
                    "suggestion": s,
                })
            })
            .collect();
        let mut text = serde_json::to_string_pretty(&values).map_err(|e| CliError::Failure(e.to_string()))?;
        text.push('\n');
        return Ok(text);
    }
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Failure(e.to_string());
    writer.write_record(EXPORT_COLUMNS).map_err(fail)?;
    for (o, d, s) in &rows {
        let outcome = format!("{:?}", o.outcome).to_uppercase();
        writer
            .write_record([
                d.disagreement_id.as_str(),
                d.submission_id.as_str(),
                o.question_id.as_str(),
                o.model_config_id.as_str(),
                d.item_id.as_str(),
                outcome.as_str(),
                &d.category.to_string(),
                d.note.as_str(),
                d.tagger.as_str(),
                &d.tagged_at.map(|t| t.to_rfc3339()).unwrap_or_default(),
                &s.map(|c| c.to_string()).unwrap_or_default(),
                &d.history.len().to_string(),
            ])
            .map_err(fail)?;
    }
    let bytes = writer.into_inner().map_err(|e| CliError::Failure(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Failure(e.to_string()))
}
