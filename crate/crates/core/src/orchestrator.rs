//! Grading jobs: enqueue after close, run once, persist atomically.
//!
//! A job is keyed by (submission, rubric version, model config). Job ids are
//! derived from that key plus a generation number, so enqueueing the same
//! triple twice finds the existing job instead of creating a new one. A new
//! generation is only created by an explicit [`Orchestrator::retry_failed`].
//!
//! State transitions use compare-and-set on the job document; the AI
//! evaluation is written (immutable, id = job id) before the job turns DONE,
//! so a DONE job always has its evaluation.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::codec;
use crate::domain::{
    check_coverage, resolve_effective_grade, AiEvaluation, DomainError, EffectiveGrade, HumanEvaluation,
    ModelConfig, QuestionInstance, Rubric, RubricRef, Submission,
};
use crate::gateway::{Gateway, GatewayError};
use crate::parser::{parse_evaluation, repair_pass, DefectKind, ParseContext, ParseOutcome};
use crate::prompt::{assemble_prompt, AssemblyOptions, PromptError, PromptTemplate};
use crate::store::{Change, DocKind, EventKind, Store, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradingJob {
    pub job_id: String,
    pub submission_id: String,
    pub rubric: RubricRef,
    pub model_config_id: String,
    /// Prompt template version frozen at enqueue time.
    pub template_version: String,
    pub generation: u32,
    pub status: JobStatus,
    /// Model invocations made, including a repair re-invocation.
    pub attempts: u32,
    pub last_error: Option<String>,
    pub error_code: Option<String>,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
}

impl GradingJob {
    pub fn id_for(submission_id: &str, rubric: &RubricRef, model_config_id: &str, generation: u32) -> String {
        format!("{submission_id}~{rubric}~{model_config_id}~{generation}")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("configuration: {0}")]
    Configuration(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("rubric version conflict: submission is graded against {on_record}, request used {requested}")]
    RubricVersionConflict { on_record: RubricRef, requested: RubricRef },
    #[error("not found: {0}")]
    NotFound(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<DomainError> for OrchestratorError {
    fn from(e: DomainError) -> Self {
        OrchestratorError::Validation(e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub executed: usize,
    pub done: usize,
    pub failed: usize,
}

type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Clone)]
pub struct Orchestrator {
    store: Arc<Store>,
    template: PromptTemplate,
    options: AssemblyOptions,
    actor: String,
    clock: Clock,
    repair_invocations: u32,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("store", &self.store)
            .field("template", &self.template.version)
            .finish_non_exhaustive()
    }
}

/// A failure while running a job, recorded on the FAILED job.
struct JobFailure {
    code: &'static str,
    detail: String,
}

impl From<GatewayError> for JobFailure {
    fn from(e: GatewayError) -> Self {
        JobFailure {
            code: e.code(),
            detail: e.to_string(),
        }
    }
}

impl From<StoreError> for JobFailure {
    fn from(e: StoreError) -> Self {
        JobFailure {
            code: "store-error",
            detail: e.to_string(),
        }
    }
}

impl From<PromptError> for JobFailure {
    fn from(e: PromptError) -> Self {
        JobFailure {
            code: "prompt-error",
            detail: e.to_string(),
        }
    }
}

impl Orchestrator {
    pub fn new(store: Arc<Store>, template: PromptTemplate) -> Self {
        Orchestrator {
            store,
            template,
            options: AssemblyOptions::default(),
            actor: "engine".into(),
            clock: Arc::new(Utc::now),
            repair_invocations: 1,
        }
    }

    pub fn with_actor(mut self, actor: impl Into<String>) -> Self {
        self.actor = actor.into();
        self
    }

    pub fn with_clock(mut self, clock: impl Fn() -> DateTime<Utc> + Send + Sync + 'static) -> Self {
        self.clock = Arc::new(clock);
        self
    }

    pub fn with_options(mut self, options: AssemblyOptions) -> Self {
        self.options = options;
        self
    }

    /// How many repair re-invocations a job may make after an unusable reply.
    pub fn with_repair_invocations(mut self, n: u32) -> Self {
        self.repair_invocations = n;
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    /// Current time according to the configured clock.
    pub fn now(&self) -> DateTime<Utc> {
        (self.clock)()
    }

    fn change(&self, event: EventKind) -> Change<'_> {
        Change::new(&self.actor, event)
    }

    pub fn load_rubric(&self, rubric: &RubricRef) -> Result<Rubric, OrchestratorError> {
        self.store
            .find_json(DocKind::Rubric, &rubric.document_id())?
            .ok_or_else(|| OrchestratorError::NotFound(format!("rubric {rubric}")))
    }

    pub fn load_submission(&self, submission_id: &str) -> Result<Submission, OrchestratorError> {
        self.store
            .find_json(DocKind::Submission, submission_id)?
            .ok_or_else(|| OrchestratorError::NotFound(format!("submission {submission_id}")))
    }

    pub fn load_job(&self, job_id: &str) -> Result<GradingJob, OrchestratorError> {
        self.store
            .find_json(DocKind::Job, job_id)?
            .ok_or_else(|| OrchestratorError::NotFound(format!("job {job_id}")))
    }

    /// Marks a stored draft final. Finalizing an already-final version is a no-op.
    pub fn finalize_rubric(&self, rubric: &RubricRef) -> Result<Rubric, OrchestratorError> {
        let draft = self.load_rubric(rubric)?;
        if draft.finalized {
            return Ok(draft);
        }
        let finalized = draft.finalize().map_err(|violations| {
            OrchestratorError::Validation(
                violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "),
            )
        })?;
        self.store.put_json(
            DocKind::Rubric,
            &rubric.document_id(),
            &finalized,
            self.change(EventKind::RubricFinalized),
        )?;
        Ok(finalized)
    }

    /// Highest finalized rubric version for a question.
    pub fn current_rubric(&self, question_id: &str) -> Result<Option<Rubric>, OrchestratorError> {
        Ok(self
            .store
            .load_all::<Rubric>(DocKind::Rubric)?
            .into_iter()
            .map(|(_, r)| r)
            .filter(|r| r.finalized && r.question_id == question_id)
            .max_by_key(|r| (r.version, r.rubric_id.clone())))
    }

    /// The rubric version a submission's grades are validated against.
    pub fn rubric_on_record(&self, submission: &Submission) -> Result<Rubric, OrchestratorError> {
        self.current_rubric(&submission.instance.question_id)?.ok_or_else(|| {
            OrchestratorError::NotFound(format!(
                "no finalized rubric for question {}",
                submission.instance.question_id
            ))
        })
    }

    fn latest_generation(&self, key: (&str, &RubricRef, &str)) -> Result<Option<GradingJob>, OrchestratorError> {
        let mut latest = None;
        for generation in 1.. {
            let id = GradingJob::id_for(key.0, key.1, key.2, generation);
            match self.store.find_json::<GradingJob>(DocKind::Job, &id)? {
                Some(job) => latest = Some(job),
                None => break,
            }
        }
        Ok(latest)
    }

    pub fn enqueue_assessment(
        &self,
        submission_ids: &[String],
        rubric: &Rubric,
        config: &ModelConfig,
    ) -> Result<Vec<GradingJob>, OrchestratorError> {
        if !rubric.finalized {
            return Err(OrchestratorError::Configuration(format!(
                "rubric not finalized: {}",
                rubric.reference()
            )));
        }
        config
            .validate()
            .map_err(|e| OrchestratorError::Configuration(e.to_string()))?;
        let stored: Option<Rubric> = self.store.find_json(DocKind::Rubric, &rubric.reference().document_id())?;
        if stored.as_ref() != Some(rubric) {
            return Err(OrchestratorError::Configuration(format!(
                "rubric {} is not stored in its finalized form",
                rubric.reference()
            )));
        }
        self.store.put_json(
            DocKind::ModelConfig,
            &config.model_config_id,
            config,
            self.change(EventKind::ModelConfigStored),
        )?;
        let submissions = submission_ids
            .iter()
            .map(|id| self.load_submission(id))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(s) = submissions.iter().find(|s| s.instance.question_id != rubric.question_id) {
            return Err(OrchestratorError::Validation(format!(
                "submission {} answers {}, rubric {} is for {}",
                s.submission_id,
                s.instance.question_id,
                rubric.reference(),
                rubric.question_id
            )));
        }

        let rubric_ref = rubric.reference();
        let mut jobs = Vec::with_capacity(submissions.len());
        for submission in submissions {
            let key = (submission.submission_id.as_str(), &rubric_ref, config.model_config_id.as_str());
            let job = match self.latest_generation(key)? {
                Some(job) if job.status == JobStatus::Skipped && submission.is_closed() => {
                    let job = GradingJob {
                        status: JobStatus::Pending,
                        last_error: None,
                        error_code: None,
                        ..job
                    };
                    self.write_job(&job, EventKind::JobEnqueued)?;
                    job
                }
                Some(job) => job,
                None => {
                    let closed = submission.is_closed();
                    let job = GradingJob {
                        job_id: GradingJob::id_for(key.0, key.1, key.2, 1),
                        submission_id: submission.submission_id.clone(),
                        rubric: rubric_ref.clone(),
                        model_config_id: config.model_config_id.clone(),
                        template_version: self.template.version.clone(),
                        generation: 1,
                        status: if closed { JobStatus::Pending } else { JobStatus::Skipped },
                        attempts: 0,
                        last_error: (!closed).then(|| "not closed".to_string()),
                        error_code: None,
                        created_at: self.now(),
                        finished_at: None,
                    };
                    self.create_job(&job)?;
                    job
                }
            };
            jobs.push(job);
        }
        Ok(jobs)
    }

    fn create_job(&self, job: &GradingJob) -> Result<(), OrchestratorError> {
        let body = codec::to_canonical(job).map_err(StoreError::from)?;
        self.store
            .compare_and_put(DocKind::Job, &job.job_id, None, &body, self.change(EventKind::JobEnqueued))?;
        Ok(())
    }

    fn write_job(&self, job: &GradingJob, event: EventKind) -> Result<(), OrchestratorError> {
        self.store.put_json(DocKind::Job, &job.job_id, job, self.change(event))?;
        Ok(())
    }

    /// Moves a job from one status to another only if nobody else moved it first.
    fn transition(
        &self,
        job_id: &str,
        from: JobStatus,
        event: EventKind,
        update: impl FnOnce(&mut GradingJob),
    ) -> Result<Option<GradingJob>, OrchestratorError> {
        let Some((mut job, digest)) = self.store.get_json_versioned::<GradingJob>(DocKind::Job, job_id)? else {
            return Err(OrchestratorError::NotFound(format!("job {job_id}")));
        };
        if job.status != from {
            return Ok(None);
        }
        update(&mut job);
        let body = codec::to_canonical(&job).map_err(StoreError::from)?;
        match self
            .store
            .compare_and_put(DocKind::Job, job_id, Some(&digest), &body, self.change(event))
        {
            Ok(_) => Ok(Some(job)),
            Err(StoreError::Conflict { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn jobs(&self) -> Result<Vec<GradingJob>, OrchestratorError> {
        Ok(self
            .store
            .load_all::<GradingJob>(DocKind::Job)?
            .into_iter()
            .map(|(_, j)| j)
            .collect())
    }

    /// Runs one job. Anything other than a PENDING job is returned unchanged.
    pub fn run_job(&self, job_id: &str, gateway: &Gateway) -> Result<GradingJob, OrchestratorError> {
        let Some(job) = self.transition(job_id, JobStatus::Pending, EventKind::JobStarted, |j| {
            j.status = JobStatus::Running
        })?
        else {
            return self.load_job(job_id);
        };

        let mut invocations = 0;
        let result = self.execute(&job, gateway, &mut invocations);
        let finished_at = self.now();
        let outcome = match result {
            Ok(()) => self.transition(job_id, JobStatus::Running, EventKind::JobDone, |j| {
                j.status = JobStatus::Done;
                j.attempts = invocations;
                j.finished_at = Some(finished_at);
            })?,
            Err(failure) => {
                tracing::warn!(job = job_id, code = failure.code, "job failed: {}", failure.detail);
                self.transition(job_id, JobStatus::Running, EventKind::JobFailed, |j| {
                    j.status = JobStatus::Failed;
                    j.attempts = invocations;
                    j.last_error = Some(failure.detail);
                    j.error_code = Some(failure.code.to_string());
                    j.finished_at = Some(finished_at);
                })?
            }
        };
        match outcome {
            Some(job) => Ok(job),
            None => self.load_job(job_id),
        }
    }

    fn execute(&self, job: &GradingJob, gateway: &Gateway, invocations: &mut u32) -> Result<(), JobFailure> {
        // an evaluation left by an interrupted run is adopted, not recomputed
        if self.store.contains(DocKind::AiEvaluation, &job.job_id)? {
            return Ok(());
        }
        if job.template_version != self.template.version {
            return Err(JobFailure {
                code: "configuration",
                detail: format!(
                    "job was enqueued with prompt template {}, engine has {}",
                    job.template_version, self.template.version
                ),
            });
        }
        let missing = |what: String| JobFailure {
            code: "not-found",
            detail: what,
        };
        let submission: Submission = self
            .store
            .find_json(DocKind::Submission, &job.submission_id)?
            .ok_or_else(|| missing(format!("submission {}", job.submission_id)))?;
        let rubric: Rubric = self
            .store
            .find_json(DocKind::Rubric, &job.rubric.document_id())?
            .ok_or_else(|| missing(format!("rubric {}", job.rubric)))?;
        let instance: QuestionInstance = self
            .store
            .find_json(DocKind::Instance, &submission.instance.document_id())?
            .ok_or_else(|| missing(format!("instance {}", submission.instance.document_id())))?;
        let config: ModelConfig = self
            .store
            .find_json(DocKind::ModelConfig, &job.model_config_id)?
            .ok_or_else(|| missing(format!("model config {}", job.model_config_id)))?;

        let bundle = assemble_prompt(&instance, &rubric, &submission, &self.options, &self.template)?;
        let parse = |raw: &crate::gateway::RawModelResponse, fingerprint: &str| -> ParseOutcome {
            let ctx = ParseContext {
                evaluation_id: &job.job_id,
                submission_id: &job.submission_id,
                model_config: &config,
                prompt_fingerprint: fingerprint,
                created_at: self.now(),
            };
            let outcome = parse_evaluation(raw, &rubric, &ctx);
            if outcome.has(DefectKind::Malformed) {
                repair_pass(raw, &rubric, &ctx)
            } else {
                outcome
            }
        };

        let raw = gateway.invoke(&bundle, &config)?;
        *invocations += 1;
        let mut outcome = parse(&raw, &bundle.fingerprint);
        let mut repairs_left = self.repair_invocations;
        while outcome.is_blocked() && repairs_left > 0 {
            repairs_left -= 1;
            let retry = bundle.with_repair_notice(&self.template, &outcome.summary());
            let raw = gateway.invoke(&retry, &config)?;
            *invocations += 1;
            outcome = parse(&raw, &retry.fingerprint);
        }
        let Some(evaluation) = outcome.evaluation else {
            return Err(JobFailure {
                code: "unparseable-response",
                detail: outcome.summary(),
            });
        };
        self.store.put_json(
            DocKind::AiEvaluation,
            &job.job_id,
            &evaluation,
            self.change(EventKind::EvaluationStored),
        )?;
        Ok(())
    }

    /// Runs every PENDING job (optionally only for one model config) on
    /// `workers` threads.
    pub fn run_pending(
        &self,
        gateway: &Gateway,
        workers: usize,
        model_config_id: Option<&str>,
    ) -> Result<RunSummary, OrchestratorError> {
        let pending: Vec<String> = self
            .jobs()?
            .into_iter()
            .filter(|j| j.status == JobStatus::Pending)
            .filter(|j| model_config_id.is_none_or(|m| j.model_config_id == m))
            .map(|j| j.job_id)
            .collect();
        let queue = Mutex::new(pending.into_iter());
        let results: Mutex<Vec<Result<GradingJob, OrchestratorError>>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..workers.max(1) {
                scope.spawn(|| loop {
                    let next = queue.lock().unwrap_or_else(|e| e.into_inner()).next();
                    let Some(job_id) = next else { break };
                    let result = self.run_job(&job_id, gateway);
                    results.lock().unwrap_or_else(|e| e.into_inner()).push(result);
                });
            }
        });
        let mut summary = RunSummary::default();
        for result in results.into_inner().unwrap_or_else(|e| e.into_inner()) {
            let job = result?;
            summary.executed += 1;
            match job.status {
                JobStatus::Done => summary.done += 1,
                JobStatus::Failed => summary.failed += 1,
                _ => {}
            }
        }
        Ok(summary)
    }

    /// Returns RUNNING jobs left behind by a dead process to PENDING. Only
    /// call while holding the store lock.
    pub fn recover_interrupted(&self) -> Result<usize, OrchestratorError> {
        let mut recovered = 0;
        for job in self.jobs()?.into_iter().filter(|j| j.status == JobStatus::Running) {
            if self
                .transition(&job.job_id, JobStatus::Running, EventKind::JobRequeued, |j| {
                    j.status = JobStatus::Pending
                })?
                .is_some()
            {
                recovered += 1;
            }
        }
        Ok(recovered)
    }

    /// Creates the next generation of a FAILED job as PENDING. The failed
    /// job stays on record.
    pub fn retry_failed(&self, job_id: &str) -> Result<GradingJob, OrchestratorError> {
        let failed = self.load_job(job_id)?;
        if failed.status != JobStatus::Failed {
            return Err(OrchestratorError::Validation(format!("job {job_id} is not FAILED")));
        }
        let key = (failed.submission_id.as_str(), &failed.rubric, failed.model_config_id.as_str());
        let latest = self.latest_generation(key)?.expect("failed job exists");
        if latest.job_id != failed.job_id {
            return Err(OrchestratorError::Validation(format!(
                "job {job_id} was already retried as {}",
                latest.job_id
            )));
        }
        let generation = failed.generation + 1;
        let job = GradingJob {
            job_id: GradingJob::id_for(key.0, key.1, key.2, generation),
            generation,
            status: JobStatus::Pending,
            attempts: 0,
            last_error: None,
            error_code: None,
            template_version: self.template.version.clone(),
            created_at: self.now(),
            finished_at: None,
            ..failed
        };
        self.create_job(&job)?;
        Ok(job)
    }

    /// All human evaluations for a submission, oldest first. They are
    /// numbered from 1 without gaps, so the history ends at the first
    /// missing number.
    pub fn human_history(&self, submission_id: &str) -> Result<Vec<HumanEvaluation>, OrchestratorError> {
        let mut found = Vec::new();
        while let Some(h) = self
            .store
            .find_json(DocKind::HumanEvaluation, &format!("{submission_id}#{:04}", found.len() + 1))?
        {
            found.push(h);
        }
        Ok(found)
    }

    pub fn latest_human(&self, submission_id: &str) -> Result<Option<HumanEvaluation>, OrchestratorError> {
        Ok(self.human_history(submission_id)?.pop())
    }

    /// AI evaluations of DONE jobs for a submission, keyed by model config.
    /// When one model graded several rubric versions, the highest wins.
    pub fn ai_evaluations(&self, submission_id: &str) -> Result<BTreeMap<String, AiEvaluation>, OrchestratorError> {
        Ok(self
            .collect_evaluations(Some(submission_id))?
            .remove(submission_id)
            .unwrap_or_default())
    }

    /// [`Self::ai_evaluations`] for every submission at once.
    pub fn all_ai_evaluations(&self) -> Result<BTreeMap<String, BTreeMap<String, AiEvaluation>>, OrchestratorError> {
        self.collect_evaluations(None)
    }

    fn collect_evaluations(
        &self,
        only: Option<&str>,
    ) -> Result<BTreeMap<String, BTreeMap<String, AiEvaluation>>, OrchestratorError> {
        let mut out: BTreeMap<String, BTreeMap<String, AiEvaluation>> = BTreeMap::new();
        let jobs = match only {
            // job ids start with the submission id, so skip loading the rest
            Some(s) => {
                let prefix = format!("{s}~");
                let mut jobs = Vec::new();
                for id in self.store.list_ids(DocKind::Job)? {
                    if id.starts_with(&prefix) {
                        jobs.push(self.load_job(&id)?);
                    }
                }
                jobs
            }
            None => self.jobs()?,
        };
        for job in jobs {
            if job.status != JobStatus::Done || only.is_some_and(|s| s != job.submission_id) {
                continue;
            }
            let eval: AiEvaluation = self.store.get_json(DocKind::AiEvaluation, &job.job_id)?;
            let per_model = out.entry(job.submission_id.clone()).or_default();
            match per_model.get(&job.model_config_id) {
                Some(existing) if existing.rubric.version >= eval.rubric.version => {}
                _ => {
                    per_model.insert(job.model_config_id.clone(), eval);
                }
            }
        }
        Ok(out)
    }

    /// Checks a human grade against the rubric on record without storing it.
    pub fn check_override(&self, submission_id: &str, human: &HumanEvaluation) -> Result<Rubric, OrchestratorError> {
        if human.submission_id != submission_id {
            return Err(OrchestratorError::Validation(format!(
                "evaluation is for submission {}, not {submission_id}",
                human.submission_id
            )));
        }
        let submission = self.load_submission(submission_id)?;
        let rubric = self.rubric_on_record(&submission)?;
        if human.rubric != rubric.reference() {
            return Err(OrchestratorError::RubricVersionConflict {
                on_record: rubric.reference(),
                requested: human.rubric.clone(),
            });
        }
        check_coverage(&rubric, &human.selections)?;
        Ok(rubric)
    }

    /// Stores a human grade; from now on it is the grade of record. The AI
    /// evaluation is left untouched.
    pub fn record_override(
        &self,
        submission_id: &str,
        human: &HumanEvaluation,
    ) -> Result<EffectiveGrade, OrchestratorError> {
        let rubric = self.check_override(submission_id, human)?;
        let n = self.human_history(submission_id)?.len() + 1;
        let id = format!("{submission_id}#{n:04}");
        self.store
            .put_json(DocKind::HumanEvaluation, &id, human, self.change(EventKind::OverrideRecorded))?;
        let ai = self
            .ai_evaluations(submission_id)?
            .into_values()
            .find(|e| e.rubric == rubric.reference());
        Ok(resolve_effective_grade(ai.as_ref(), Some(human), &rubric)?)
    }

    /// The grade of record, considering the AI evaluation of one model config
    /// (or the first available) when no human grade exists.
    pub fn effective_grade(
        &self,
        submission_id: &str,
        model_config_id: Option<&str>,
    ) -> Result<Option<EffectiveGrade>, OrchestratorError> {
        self.load_submission(submission_id)?;
        let human = self.latest_human(submission_id)?;
        let evaluations = self.ai_evaluations(submission_id)?;
        let ai = match model_config_id {
            Some(m) => evaluations.get(m).cloned(),
            None => evaluations.into_values().next(),
        };
        let rubric_ref = match (&human, &ai) {
            (Some(h), _) => h.rubric.clone(),
            (None, Some(a)) => a.rubric.clone(),
            (None, None) => return Ok(None),
        };
        let rubric = self.load_rubric(&rubric_ref)?;
        Ok(Some(resolve_effective_grade(ai.as_ref(), human.as_ref(), &rubric)?))
    }
}
