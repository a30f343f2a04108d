//! Grading policies that must hold no matter what the model replies.

use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use inkgrade_core::domain::{
    resolve_effective_grade, AiEvaluation, CostRates, GradeSource, HumanEvaluation, ItemSelection, ModelConfig,
    Provider, QuestionInstance, Rational, RetryPolicy, Rubric, RubricItem, Submission, SubmissionImage, TokenUsage,
};
use inkgrade_core::gateway::{FnProvider, Gateway, ProviderReply};
use inkgrade_core::orchestrator::{JobStatus, Orchestrator};
use inkgrade_core::parser::serialize_evaluation_body;
use inkgrade_core::prompt::{PromptBundle, PromptTemplate};
use inkgrade_core::store::{Change, DocKind, EventKind, Store, StoreError};

fn at(secs: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(1_760_000_000 + secs, 0).unwrap()
}

const ITEMS: [&str; 3] = ["a", "b", "c"];

fn rubric() -> Rubric {
    Rubric {
        rubric_id: "q".into(),
        question_id: "Q".into(),
        items: ITEMS
            .iter()
            .enumerate()
            .map(|(n, id)| RubricItem {
                item_id: id.to_string(),
                description: format!("step {id}"),
                points: Rational::integer(if n == 2 { -1 } else { 2 }),
                order: n as i64,
            })
            .collect(),
        max_points: Rational::integer(4),
        finalized: true,
        version: 1,
    }
}

fn config(id: &str) -> ModelConfig {
    ModelConfig {
        model_config_id: id.into(),
        provider: Provider::Replay,
        model_name: id.into(),
        max_output_tokens: 500,
        request_timeout_ms: 1000,
        retry: RetryPolicy::default(),
        cost_rates: CostRates {
            input_per_token: Rational::zero(),
            output_per_token: Rational::zero(),
        },
        temperature: None,
        base_url: None,
    }
}

fn sels(picks: &[bool]) -> Vec<ItemSelection> {
    ITEMS
        .iter()
        .zip(picks)
        .map(|(id, &selected)| ItemSelection {
            item_id: id.to_string(),
            selected,
            justification: format!("{id} seen"),
        })
        .collect()
}

struct World {
    _dir: tempfile::TempDir,
    orch: Orchestrator,
    store: Arc<Store>,
    /// Image digests per submission, in capture order.
    images: Vec<(String, Vec<String>)>,
}

/// `closed` flags one submission each; submission n has n+1 images.
fn world(closed: &[bool]) -> World {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(Store::open(dir.path()).unwrap());
    let change = || Change::new("setup", EventKind::SubmissionIngested);
    let instance = QuestionInstance {
        question_id: "Q".into(),
        variant_seed: "1".into(),
        statement: "Compute it.".into(),
        reference_answers: Vec::new(),
        grading_instructions: None,
    };
    store
        .put_json(DocKind::Instance, &instance.reference().document_id(), &instance, change())
        .unwrap();
    store.put_json(DocKind::Rubric, "q@v1", &rubric(), change()).unwrap();
    let mut images = Vec::new();
    for (n, &is_closed) in closed.iter().enumerate() {
        let id = format!("s{n}");
        let blobs: Vec<String> = (0..=n)
            .map(|k| store.put_blob(format!("{id} photo {k}").as_bytes(), "setup").unwrap())
            .collect();
        let submission = Submission {
            submission_id: id.clone(),
            instance: instance.reference(),
            submitter: format!("g{n}"),
            images: blobs
                .iter()
                .enumerate()
                .map(|(k, b)| SubmissionImage {
                    blob: b.clone(),
                    media_type: "image/png".into(),
                    captured_at: at(k as i64),
                })
                .collect(),
            final_image_index: n,
            closed_at: is_closed.then(|| at(100)),
        };
        store.put_json(DocKind::Submission, &id, &submission, change()).unwrap();
        images.push((id, blobs));
    }
    let orch = Orchestrator::new(store.clone(), PromptTemplate::builtin()).with_clock(|| at(1000));
    World {
        _dir: dir,
        orch,
        store,
        images,
    }
}

type Seen = Arc<Mutex<Vec<PromptBundle>>>;

/// Records every bundle; the first call for each final image gets a reply
/// missing an item so that the repair re-invocation bundle is seen too.
fn recording_gateway() -> (Gateway, Seen) {
    let seen: Seen = Arc::default();
    let log = seen.clone();
    let provider = FnProvider(move |bundle: &PromptBundle, _: &ModelConfig| {
        let mut log = log.lock().unwrap();
        let first = !log.iter().any(|b| b.image_parts().eq(bundle.image_parts()));
        log.push(bundle.clone());
        let picks = sels(&[true, false, true]);
        let body = if first {
            serialize_evaluation_body("work", &picks[..2])
        } else {
            serialize_evaluation_body("work", &picks)
        };
        Ok(ProviderReply {
            body,
            usage: TokenUsage::default(),
            provider_echo: "policy".into(),
        })
    });
    (Gateway::new(Arc::new(provider)), seen)
}

fn ids(w: &World) -> Vec<String> {
    w.images.iter().map(|(id, _)| id.clone()).collect()
}

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

pub fn unclosed_never_graded() -> Result<String, String> {
    let w = world(&[true, false, true, false]);
    let (gateway, seen) = recording_gateway();
    let jobs = w.orch.enqueue_assessment(&ids(&w), &rubric(), &config("m")).map_err(|e| e.to_string())?;
    for job in &jobs {
        let open = job.submission_id == "s1" || job.submission_id == "s3";
        check((job.status == JobStatus::Skipped) == open, || format!("{job:?}"))?;
        // a direct run attempt must not grade it either
        w.orch.run_job(&job.job_id, &gateway).map_err(|e| e.to_string())?;
    }
    w.orch.run_pending(&gateway, 2, None).map_err(|e| e.to_string())?;
    for (id, blobs) in w.images.iter().filter(|(id, _)| id == "s1" || id == "s3") {
        let touched = seen.lock().unwrap().iter().any(|b| b.image_parts().any(|(blob, _)| blobs.contains(&blob.to_string())));
        check(!touched, || format!("{id} reached the model"))?;
        let graded = w.orch.ai_evaluations(id).map_err(|e| e.to_string())?;
        check(graded.is_empty(), || format!("{id} has an evaluation"))?;
    }
    let done = w.orch.jobs().map_err(|e| e.to_string())?.iter().filter(|j| j.status == JobStatus::Done).count();
    check(done == 2, || format!("{done} jobs done, expected the 2 closed submissions"))?;
    Ok("2 open submissions skipped at enqueue, never sent to the model, no evaluation stored".into())
}

pub fn only_final_image_in_bundle() -> Result<String, String> {
    let w = world(&[true, true, true, true]);
    let (gateway, seen) = recording_gateway();
    w.orch.enqueue_assessment(&ids(&w), &rubric(), &config("m")).map_err(|e| e.to_string())?;
    let summary = w.orch.run_pending(&gateway, 1, None).map_err(|e| e.to_string())?;
    check(summary.done == 4, || format!("{summary:?}"))?;
    let seen = seen.lock().unwrap();
    check(seen.len() == 8, || format!("{} bundles, expected first call + repair per submission", seen.len()))?;
    for bundle in seen.iter() {
        let parts: Vec<_> = bundle.image_parts().collect();
        check(parts.len() == 1, || format!("{} image parts", parts.len()))?;
        let (_, blobs) = w
            .images
            .iter()
            .find(|(_, blobs)| blobs.last().map(String::as_str) == Some(parts[0].0))
            .ok_or_else(|| format!("bundle image {} is not a final image", parts[0].0))?;
        let dump = format!("{bundle:?}");
        for earlier in &blobs[..blobs.len() - 1] {
            check(!dump.contains(earlier.as_str()), || format!("non-final image {earlier} in bundle"))?;
        }
    }
    Ok("8 bundles (incl. repair re-invocations) over submissions with 1-4 images: final image only".into())
}

pub fn human_always_wins() -> Result<String, String> {
    let r = rubric();
    let mut rng = StdRng::seed_from_u64(7);
    for n in 0..1000 {
        let ai_picks: Vec<bool> = ITEMS.iter().map(|_| rng.random_bool(0.5)).collect();
        let human_picks: Vec<bool> = ITEMS.iter().map(|_| rng.random_bool(0.5)).collect();
        let ai = AiEvaluation {
            evaluation_id: "e".into(),
            submission_id: "s".into(),
            model_config_id: "m".into(),
            model_config: config("m"),
            rubric: r.reference(),
            transcription: "t".into(),
            selections: sels(&ai_picks),
            raw_response_digest: String::new(),
            usage: TokenUsage::default(),
            contract_version: String::new(),
            prompt_fingerprint: String::new(),
            quality_flags: Vec::new(),
            created_at: at(0),
        };
        let human = HumanEvaluation {
            submission_id: "s".into(),
            grader_id: "ta".into(),
            rubric: r.reference(),
            selections: sels(&human_picks),
            created_at: at(n),
        };
        let grade = resolve_effective_grade(Some(&ai), Some(&human), &r).map_err(|e| e.to_string())?;
        check(grade.source == GradeSource::Human && grade.selections == human.selections, || {
            format!("case {n}: {grade:?}")
        })?;
    }

    let w = world(&[true, true]);
    let (gateway, _) = recording_gateway();
    for model in ["m1", "m2"] {
        w.orch.enqueue_assessment(&ids(&w), &rubric(), &config(model)).map_err(|e| e.to_string())?;
    }
    w.orch.run_pending(&gateway, 2, None).map_err(|e| e.to_string())?;
    for id in ids(&w) {
        let human = HumanEvaluation {
            submission_id: id.clone(),
            grader_id: "ta".into(),
            rubric: r.reference(),
            selections: sels(&[false, true, false]),
            created_at: at(2000),
        };
        w.orch.record_override(&id, &human).map_err(|e| e.to_string())?;
        for model in [Some("m1"), Some("m2"), None] {
            let grade = w.orch.effective_grade(&id, model).map_err(|e| e.to_string())?.ok_or("no grade")?;
            check(grade.source == GradeSource::Human && grade.selections == human.selections, || {
                format!("{id} {model:?}: {grade:?}")
            })?;
        }
    }
    Ok("1000 random AI/human pairs + stored overrides against 2 models: human grade of record".into())
}

pub fn ai_immutable_after_override() -> Result<String, String> {
    let w = world(&[true, true, true]);
    let (gateway, _) = recording_gateway();
    w.orch.enqueue_assessment(&ids(&w), &rubric(), &config("m")).map_err(|e| e.to_string())?;
    w.orch.run_pending(&gateway, 1, None).map_err(|e| e.to_string())?;
    let evaluations = w.store.list_ids(DocKind::AiEvaluation).map_err(|e| e.to_string())?;
    let snapshot = |store: &Store| -> Result<Vec<(Vec<u8>, usize)>, String> {
        evaluations
            .iter()
            .map(|id| {
                let body = store.get_document(DocKind::AiEvaluation, id).map_err(|e| e.to_string())?;
                let events = store.events_for(DocKind::AiEvaluation, id).map_err(|e| e.to_string())?.len();
                Ok((body, events))
            })
            .collect()
    };
    let before = snapshot(&w.store)?;
    for (round, picks) in [[false, false, false], [true, true, true]].iter().enumerate() {
        for id in ids(&w) {
            let human = HumanEvaluation {
                submission_id: id.clone(),
                grader_id: format!("ta-{round}"),
                rubric: rubric().reference(),
                selections: sels(picks),
                created_at: at(3000 + round as i64),
            };
            w.orch.record_override(&id, &human).map_err(|e| e.to_string())?;
        }
    }
    check(snapshot(&w.store)? == before, || "AI evaluation bytes or history changed by override".into())?;

    let id = &evaluations[0];
    let mut altered: AiEvaluation = w.store.get_json(DocKind::AiEvaluation, id).map_err(|e| e.to_string())?;
    altered.selections[0].selected = !altered.selections[0].selected;
    let attempt = w.store.put_json(
        DocKind::AiEvaluation,
        id,
        &altered,
        Change::new("intruder", EventKind::EvaluationStored),
    );
    check(matches!(attempt, Err(StoreError::Immutable { .. })), || format!("rewrite was not refused: {attempt:?}"))?;
    check(snapshot(&w.store)? == before, || "refused rewrite left a trace".into())?;
    Ok(format!(
        "{} evaluations byte-identical after 2 override rounds; direct rewrite refused",
        evaluations.len()
    ))
}
