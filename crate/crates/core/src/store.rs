//! Durable, append-only evidence store.
//!
//! On-disk layout under the store root:
//!
//! ```text
//! <kind>/<id>        one canonical JSON document per id
//! blobs/<sha256>     image bytes, content addressed
//! audit.log          one JSON event per line, gapless sequence numbers
//! tmp/               staging area for in-flight writes
//! .lock              advisory lock held by the writing process
//! ```
//!
//! Every write follows the same three steps: the new body is staged in
//! `tmp/pending-<seq>`, the audit event for `<seq>` is appended, then the
//! staged file is renamed over the target. Reopening a store rolls forward a
//! staged file whose event made it to the log and discards any other staged
//! file, so a reader never observes a partial document and every document
//! state has an audit event.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::{self, sha256_hex};

const AUDIT_LOG: &str = "audit.log";
const TMP_DIR: &str = "tmp";
const BLOB_DIR: &str = "blobs";
const LOCK_FILE: &str = ".lock";
const PENDING_PREFIX: &str = "pending-";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DocKind {
    Instance,
    Rubric,
    Submission,
    ModelConfig,
    Job,
    AiEvaluation,
    HumanEvaluation,
    Disagreement,
}

impl DocKind {
    pub const ALL: [DocKind; 8] = [
        DocKind::Instance,
        DocKind::Rubric,
        DocKind::Submission,
        DocKind::ModelConfig,
        DocKind::Job,
        DocKind::AiEvaluation,
        DocKind::HumanEvaluation,
        DocKind::Disagreement,
    ];

    pub fn dir(self) -> &'static str {
        match self {
            DocKind::Instance => "instance",
            DocKind::Rubric => "rubric",
            DocKind::Submission => "submission",
            DocKind::ModelConfig => "model-config",
            DocKind::Job => "job",
            DocKind::AiEvaluation => "ai-evaluation",
            DocKind::HumanEvaluation => "human-evaluation",
            DocKind::Disagreement => "disagreement",
        }
    }

    /// Whether an existing body forbids replacement by a different body.
    fn locks(self, existing: &[u8]) -> bool {
        match self {
            DocKind::Instance
            | DocKind::ModelConfig
            | DocKind::AiEvaluation
            | DocKind::HumanEvaluation => true,
            DocKind::Rubric => json_field(existing, "finalized") == Some(Value::Bool(true)),
            DocKind::Submission => {
                matches!(json_field(existing, "closed_at"), Some(v) if !v.is_null())
            }
            DocKind::Job | DocKind::Disagreement => false,
        }
    }
}

impl std::fmt::Display for DocKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir())
    }
}

fn json_field(body: &[u8], key: &str) -> Option<Value> {
    serde_json::from_slice::<Value>(body).ok()?.get(key).cloned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    SubmissionIngested,
    JobEnqueued,
    JobDone,
    JobFailed,
    OverrideRecorded,
    DisagreementTagged,
    RubricFinalized,
    RubricStored,
    InstanceStored,
    ModelConfigStored,
    BlobStored,
    JobStarted,
    JobRequeued,
    EvaluationStored,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub sequence: u64,
    pub at: DateTime<Utc>,
    pub actor: String,
    pub kind: EventKind,
    /// Store-relative path of the document the event is about.
    pub subject: String,
    pub payload_digest: String,
}

/// Who is making a change and which event records it.
#[derive(Debug, Clone, Copy)]
pub struct Change<'a> {
    pub actor: &'a str,
    pub event: EventKind,
}

impl<'a> Change<'a> {
    pub fn new(actor: &'a str, event: EventKind) -> Self {
        Change { actor, event }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredVersion {
    pub digest: String,
    /// Audit sequence of the write; `None` when an identical body was
    /// already present and nothing was written.
    pub sequence: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{kind}/{id} is immutable and already stored with a different body")]
    Immutable { kind: DocKind, id: String },
    #[error("{kind}/{id} not found")]
    NotFound { kind: DocKind, id: String },
    #[error("blob {0} not found")]
    BlobNotFound(String),
    #[error("{kind}/{id} changed concurrently")]
    Conflict { kind: DocKind, id: String },
    #[error("cannot decode {kind}/{id}: {source}")]
    Decode {
        kind: DocKind,
        id: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("cannot encode document: {0}")]
    Encode(#[from] serde_json::Error),
    #[error("invalid document id {0:?}")]
    InvalidId(String),
    #[error("store {0} is locked by another process")]
    Locked(PathBuf),
    #[error("audit log is corrupt at line {line}")]
    CorruptLog { line: usize },
    #[error("write interrupted")]
    Interrupted,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// fsync staged files and the audit log before acknowledging a write.
    pub fsync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions { fsync: true }
    }
}

/// Test hook that simulates a crash at a chosen write boundary.
///
/// Each write passes three boundaries (stage, log, rename). When the
/// configured boundary is reached the step is left torn or undone and the
/// store refuses all further writes, as if the process had died.
#[doc(hidden)]
#[derive(Debug)]
pub struct FaultPlan {
    crash_at: Option<usize>,
    passed: AtomicUsize,
}

impl FaultPlan {
    pub fn crash_at(boundary: usize) -> Self {
        FaultPlan {
            crash_at: Some(boundary),
            passed: AtomicUsize::new(0),
        }
    }

    pub fn counting() -> Self {
        FaultPlan {
            crash_at: None,
            passed: AtomicUsize::new(0),
        }
    }

    pub fn boundaries_passed(&self) -> usize {
        self.passed.load(Ordering::SeqCst)
    }

    fn hit(&self) -> bool {
        let n = self.passed.fetch_add(1, Ordering::SeqCst);
        self.crash_at == Some(n)
    }
}

struct Writer {
    next_sequence: u64,
    dead: bool,
}

pub struct Store {
    root: PathBuf,
    options: StoreOptions,
    writer: Mutex<Writer>,
    faults: Option<FaultPlan>,
    _lock: Option<File>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish()
    }
}

impl Store {
    /// Opens (creating if needed) a store without taking the process lock.
    pub fn open(root: impl AsRef<Path>) -> Result<Store, StoreError> {
        Self::open_with(root, StoreOptions::default(), None, false)
    }

    /// Opens a store and holds its lock file until dropped.
    pub fn open_exclusive(root: impl AsRef<Path>, options: StoreOptions) -> Result<Store, StoreError> {
        Self::open_with(root, options, None, true)
    }

    #[doc(hidden)]
    pub fn open_with_faults(root: impl AsRef<Path>, options: StoreOptions, faults: FaultPlan) -> Result<Store, StoreError> {
        Self::open_with(root, options, Some(faults), false)
    }

    fn open_with(
        root: impl AsRef<Path>,
        options: StoreOptions,
        faults: Option<FaultPlan>,
        exclusive: bool,
    ) -> Result<Store, StoreError> {
        let root = root.as_ref().to_path_buf();
        for dir in DocKind::ALL.iter().map(|k| k.dir()).chain([TMP_DIR, BLOB_DIR]) {
            let p = root.join(dir);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let lock = if exclusive {
            let path = root.join(LOCK_FILE);
            let file = OpenOptions::new()
                .create(true)
                .truncate(false)
                .write(true)
                .open(&path)
                .map_err(io_err(&path))?;
            match file.try_lock() {
                Ok(()) => Some(file),
                Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(root)),
                Err(fs::TryLockError::Error(e)) => return Err(io_err(&path)(e)),
            }
        } else {
            None
        };
        let events = recover_log(&root.join(AUDIT_LOG))?;
        let next_sequence = events.last().map_or(1, |e| e.sequence + 1);
        let store = Store {
            root,
            options,
            writer: Mutex::new(Writer {
                next_sequence,
                dead: false,
            }),
            faults,
            _lock: lock,
        };
        store.recover_staged(&events)?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn doc_path(&self, kind: DocKind, id: &str) -> Result<PathBuf, StoreError> {
        Ok(self.root.join(kind.dir()).join(encode_id(id)?))
    }

    fn blob_path(&self, digest: &str) -> Result<PathBuf, StoreError> {
        if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(StoreError::InvalidId(digest.to_string()));
        }
        Ok(self.root.join(BLOB_DIR).join(digest))
    }

    /// Rolls forward the staged file of the last logged write, discards the rest.
    fn recover_staged(&self, events: &[AuditEvent]) -> Result<(), StoreError> {
        let tmp = self.root.join(TMP_DIR);
        for entry in fs::read_dir(&tmp).map_err(io_err(&tmp))? {
            let entry = entry.map_err(io_err(&tmp))?;
            let path = entry.path();
            let name = entry.file_name().to_string_lossy().into_owned();
            let event = name
                .strip_prefix(PENDING_PREFIX)
                .and_then(|s| s.parse::<u64>().ok())
                .and_then(|seq| events.iter().rev().find(|e| e.sequence == seq));
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            match event {
                Some(e) if sha256_hex(&bytes) == e.payload_digest => {
                    let target = self.root.join(&e.subject);
                    tracing::info!(subject = %e.subject, "rolling forward interrupted write");
                    fs::rename(&path, &target).map_err(io_err(&target))?;
                }
                _ => fs::remove_file(&path).map_err(io_err(&path))?,
            }
        }
        Ok(())
    }

    fn boundary(&self) -> bool {
        self.faults.as_ref().is_some_and(FaultPlan::hit)
    }

    /// Stage, log, rename. Caller holds the writer lock.
    fn commit(
        &self,
        writer: &mut Writer,
        subject: &str,
        body: &[u8],
        change: Change<'_>,
    ) -> Result<u64, StoreError> {
        if writer.dead {
            return Err(StoreError::Interrupted);
        }
        let sequence = writer.next_sequence;
        let staged = self.root.join(TMP_DIR).join(format!("{PENDING_PREFIX}{sequence:020}"));
        let target = self.root.join(subject);

        let crash = self.boundary();
        let written = if crash { &body[..body.len() / 2] } else { body };
        write_synced(&staged, written, self.options.fsync)?;
        if crash {
            writer.dead = true;
            return Err(StoreError::Interrupted);
        }

        let event = AuditEvent {
            sequence,
            at: Utc::now(),
            actor: change.actor.to_string(),
            kind: change.event,
            subject: subject.to_string(),
            payload_digest: sha256_hex(body),
        };
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        let crash = self.boundary();
        let written = if crash { &line[..line.len() / 2] } else { &line[..] };
        self.append_log(written)?;
        if crash {
            writer.dead = true;
            return Err(StoreError::Interrupted);
        }
        writer.next_sequence += 1;

        if self.boundary() {
            writer.dead = true;
            return Err(StoreError::Interrupted);
        }
        fs::rename(&staged, &target).map_err(io_err(&target))?;
        Ok(sequence)
    }

    fn append_log(&self, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.root.join(AUDIT_LOG);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.write_all(bytes).map_err(io_err(&path))?;
        if self.options.fsync {
            f.sync_data().map_err(io_err(&path))?;
        }
        Ok(())
    }

    fn lock_writer(&self) -> std::sync::MutexGuard<'_, Writer> {
        self.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Stores a document. Re-putting an identical body is a no-op; a
    /// different body for an immutable document is rejected.
    pub fn put_document(
        &self,
        kind: DocKind,
        id: &str,
        body: &[u8],
        change: Change<'_>,
    ) -> Result<StoredVersion, StoreError> {
        let path = self.doc_path(kind, id)?;
        let mut writer = self.lock_writer();
        let digest = sha256_hex(body);
        if let Some(existing) = read_optional(&path)? {
            if existing == body {
                return Ok(StoredVersion {
                    digest,
                    sequence: None,
                });
            }
            if kind.locks(&existing) {
                return Err(StoreError::Immutable {
                    kind,
                    id: id.to_string(),
                });
            }
        }
        let subject = format!("{}/{}", kind.dir(), encode_id(id)?);
        let sequence = self.commit(&mut writer, &subject, body, change)?;
        Ok(StoredVersion {
            digest,
            sequence: Some(sequence),
        })
    }

    /// Replaces a document only if its current digest is `expected`
    /// (`None` meaning the document must not exist yet).
    pub fn compare_and_put(
        &self,
        kind: DocKind,
        id: &str,
        expected: Option<&str>,
        body: &[u8],
        change: Change<'_>,
    ) -> Result<StoredVersion, StoreError> {
        let path = self.doc_path(kind, id)?;
        let mut writer = self.lock_writer();
        let existing = read_optional(&path)?;
        let current = existing.as_deref().map(sha256_hex);
        if current.as_deref() != expected {
            return Err(StoreError::Conflict {
                kind,
                id: id.to_string(),
            });
        }
        if let Some(existing) = &existing {
            if kind.locks(existing) && existing.as_slice() != body {
                return Err(StoreError::Immutable {
                    kind,
                    id: id.to_string(),
                });
            }
        }
        let subject = format!("{}/{}", kind.dir(), encode_id(id)?);
        let sequence = self.commit(&mut writer, &subject, body, change)?;
        Ok(StoredVersion {
            digest: sha256_hex(body),
            sequence: Some(sequence),
        })
    }

    pub fn get_document(&self, kind: DocKind, id: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.doc_path(kind, id)?;
        read_optional(&path)?.ok_or_else(|| StoreError::NotFound {
            kind,
            id: id.to_string(),
        })
    }

    pub fn contains(&self, kind: DocKind, id: &str) -> Result<bool, StoreError> {
        Ok(self.doc_path(kind, id)?.exists())
    }

    pub fn put_json<T: Serialize>(
        &self,
        kind: DocKind,
        id: &str,
        value: &T,
        change: Change<'_>,
    ) -> Result<StoredVersion, StoreError> {
        let body = codec::to_canonical(value)?;
        self.put_document(kind, id, &body, change)
    }

    pub fn get_json<T: DeserializeOwned>(&self, kind: DocKind, id: &str) -> Result<T, StoreError> {
        let body = self.get_document(kind, id)?;
        codec::from_slice(&body).map_err(|source| StoreError::Decode {
            kind,
            id: id.to_string(),
            source,
        })
    }

    /// Like [`get_json`](Self::get_json) but also returns the body digest
    /// for a later [`compare_and_put`](Self::compare_and_put).
    pub fn get_json_versioned<T: DeserializeOwned>(
        &self,
        kind: DocKind,
        id: &str,
    ) -> Result<Option<(T, String)>, StoreError> {
        let path = self.doc_path(kind, id)?;
        let Some(body) = read_optional(&path)? else {
            return Ok(None);
        };
        let value = codec::from_slice(&body).map_err(|source| StoreError::Decode {
            kind,
            id: id.to_string(),
            source,
        })?;
        Ok(Some((value, sha256_hex(&body))))
    }

    pub fn find_json<T: DeserializeOwned>(&self, kind: DocKind, id: &str) -> Result<Option<T>, StoreError> {
        Ok(self.get_json_versioned(kind, id)?.map(|(v, _)| v))
    }

    /// All ids of a kind, sorted.
    pub fn list_ids(&self, kind: DocKind) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join(kind.dir());
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            ids.push(decode_id(&name).ok_or(StoreError::InvalidId(name))?);
        }
        ids.sort();
        Ok(ids)
    }

    pub fn load_all<T: DeserializeOwned>(&self, kind: DocKind) -> Result<Vec<(String, T)>, StoreError> {
        self.list_ids(kind)?
            .into_iter()
            .map(|id| {
                let value = self.get_json(kind, &id)?;
                Ok((id, value))
            })
            .collect()
    }

    /// Stores image bytes once, returning their digest.
    pub fn put_blob(&self, bytes: &[u8], actor: &str) -> Result<String, StoreError> {
        let digest = sha256_hex(bytes);
        let path = self.blob_path(&digest)?;
        let mut writer = self.lock_writer();
        if path.exists() {
            return Ok(digest);
        }
        let subject = format!("{BLOB_DIR}/{digest}");
        self.commit(&mut writer, &subject, bytes, Change::new(actor, EventKind::BlobStored))?;
        Ok(digest)
    }

    pub fn get_blob(&self, digest: &str) -> Result<Vec<u8>, StoreError> {
        let path = self.blob_path(digest)?;
        read_optional(&path)?.ok_or_else(|| StoreError::BlobNotFound(digest.to_string()))
    }

    /// Appends a standalone event and returns its sequence number.
    pub fn append_event(
        &self,
        actor: &str,
        kind: EventKind,
        subject: &str,
        payload_digest: &str,
    ) -> Result<u64, StoreError> {
        let mut writer = self.lock_writer();
        if writer.dead {
            return Err(StoreError::Interrupted);
        }
        let event = AuditEvent {
            sequence: writer.next_sequence,
            at: Utc::now(),
            actor: actor.to_string(),
            kind,
            subject: subject.to_string(),
            payload_digest: payload_digest.to_string(),
        };
        let mut line = serde_json::to_vec(&event)?;
        line.push(b'\n');
        self.append_log(&line)?;
        writer.next_sequence += 1;
        Ok(event.sequence)
    }

    pub fn events(&self) -> Result<Vec<AuditEvent>, StoreError> {
        read_log(&self.root.join(AUDIT_LOG))
    }

    /// Events about one document, oldest first.
    pub fn events_for(&self, kind: DocKind, id: &str) -> Result<Vec<AuditEvent>, StoreError> {
        let subject = format!("{}/{}", kind.dir(), encode_id(id)?);
        Ok(self.events()?.into_iter().filter(|e| e.subject == subject).collect())
    }
}

fn read_optional(path: &Path) -> Result<Option<Vec<u8>>, StoreError> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn write_synced(path: &Path, bytes: &[u8], fsync: bool) -> Result<(), StoreError> {
    let mut f = File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    if fsync {
        f.sync_all().map_err(io_err(path))?;
    }
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<AuditEvent>, StoreError> {
    let Some(bytes) = read_optional(path)? else {
        return Ok(Vec::new());
    };
    let mut events = Vec::new();
    for (n, line) in bytes.split(|b| *b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let event = serde_json::from_slice(line).map_err(|_| StoreError::CorruptLog { line: n + 1 })?;
        events.push(event);
    }
    Ok(events)
}

/// Truncates a torn final line; any damage before the tail is corruption.
fn recover_log(path: &Path) -> Result<Vec<AuditEvent>, StoreError> {
    let Some(bytes) = read_optional(path)? else {
        return Ok(Vec::new());
    };
    let mut events = Vec::new();
    let mut good_len = 0usize;
    let mut offset = 0usize;
    let mut lines = bytes.split_inclusive(|b| *b == b'\n').enumerate().peekable();
    while let Some((n, line)) = lines.next() {
        let complete = line.ends_with(b"\n");
        let parsed: Option<AuditEvent> = if complete {
            serde_json::from_slice(&line[..line.len() - 1]).ok()
        } else {
            None
        };
        match parsed {
            Some(event) => {
                offset += line.len();
                good_len = offset;
                events.push(event);
            }
            None if lines.peek().is_none() => break,
            None => return Err(StoreError::CorruptLog { line: n + 1 }),
        }
    }
    if good_len != bytes.len() {
        tracing::warn!(dropped = bytes.len() - good_len, "truncating torn audit log tail");
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(good_len as u64).map_err(io_err(path))?;
        f.sync_all().map_err(io_err(path))?;
    }
    Ok(events)
}

fn is_plain(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'@' | b'.')
}

/// Maps an arbitrary id to a file name; bytes outside `[A-Za-z0-9._@-]`
/// and a leading dot become `%XX`.
pub fn encode_id(id: &str) -> Result<String, StoreError> {
    if id.is_empty() {
        return Err(StoreError::InvalidId(id.to_string()));
    }
    let mut out = String::with_capacity(id.len());
    for (i, b) in id.bytes().enumerate() {
        if is_plain(b) && !(i == 0 && b == b'.') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    Ok(out)
}

pub fn decode_id(name: &str) -> Option<String> {
    let bytes = name.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = name.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}
