//! Interrupts a fixed 50-write script at every write boundary, reopens the
//! store and checks that nothing partial or unaudited is visible.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use inkgrade_core::codec::sha256_hex;
use inkgrade_core::store::{encode_id, Change, DocKind, EventKind, FaultPlan, Store, StoreError, StoreOptions};

enum Write {
    Doc(DocKind, String, Vec<u8>),
    Blob(Vec<u8>),
}

impl Write {
    fn subject(&self) -> String {
        match self {
            Write::Doc(kind, id, _) => format!("{}/{}", kind.dir(), encode_id(id).expect("valid id")),
            Write::Blob(bytes) => format!("blobs/{}", sha256_hex(bytes)),
        }
    }

    fn body(&self) -> &[u8] {
        match self {
            Write::Doc(_, _, body) | Write::Blob(body) => body,
        }
    }
}

/// New documents, rewrites of mutable ones, immutable evaluations and
/// blobs, with bodies from a few bytes to tens of kilobytes.
fn script() -> Vec<Write> {
    let mut writes = Vec::new();
    for n in 0..50 {
        let pad = "x".repeat((n * 997) % 20_000);
        let doc = |v: usize| format!("{{\"n\":{n},\"v\":{v},\"pad\":\"{pad}\"}}").into_bytes();
        writes.push(match n % 5 {
            0 => Write::Doc(DocKind::Job, format!("job-{}", n % 3), doc(n)),
            1 => Write::Doc(DocKind::AiEvaluation, format!("eval-{n}"), doc(n)),
            2 => Write::Blob(format!("image {n} {pad}").into_bytes()),
            3 => Write::Doc(DocKind::Disagreement, "s1~q@v1~m~1::a".into(), doc(n)),
            _ => Write::Doc(DocKind::Submission, format!("sub-{n}"), doc(n)),
        });
    }
    writes
}

fn apply(store: &Store, write: &Write) -> Result<(), StoreError> {
    match write {
        Write::Doc(kind, id, body) => store
            .put_document(*kind, id, body, Change::new("script", EventKind::JobEnqueued))
            .map(|_| ()),
        Write::Blob(bytes) => store.put_blob(bytes, "script").map(|_| ()),
    }
}

/// Every visible file, keyed by store-relative path.
fn visible(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let dirs = DocKind::ALL.iter().map(|k| k.dir()).chain(["blobs"]);
    for dir in dirs {
        for entry in fs::read_dir(root.join(dir)).map_err(|e| e.to_string())? {
            let entry = entry.map_err(|e| e.to_string())?;
            let bytes = fs::read(entry.path()).map_err(|e| e.to_string())?;
            out.insert(format!("{dir}/{}", entry.file_name().to_string_lossy()), bytes);
        }
    }
    Ok(out)
}

fn run_once(boundary: usize, script: &[Write]) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = StoreOptions { fsync: false };
    let mut acknowledged = 0;
    {
        let store = Store::open_with_faults(dir.path(), opts, FaultPlan::crash_at(boundary)).map_err(|e| e.to_string())?;
        for write in script {
            match apply(&store, write) {
                Ok(()) => acknowledged += 1,
                Err(StoreError::Interrupted) => break,
                Err(e) => return Err(format!("unexpected error {e}")),
            }
        }
    }
    if acknowledged == script.len() {
        return Err(format!("boundary {boundary} was never reached"));
    }
    let store = Store::open(dir.path()).map_err(|e| format!("reopen: {e}"))?;
    let leftovers = fs::read_dir(dir.path().join("tmp")).map_err(|e| e.to_string())?.count();
    if leftovers != 0 {
        return Err(format!("{leftovers} staged files left after recovery"));
    }

    let events = store.events().map_err(|e| e.to_string())?;
    if events.iter().enumerate().any(|(i, e)| e.sequence != i as u64 + 1) {
        return Err("audit sequence has gaps".into());
    }
    // the interrupted write may have been rolled forward, never half-applied
    let applied = events.len();
    if applied != acknowledged && applied != acknowledged + 1 {
        return Err(format!("{applied} events for {acknowledged} acknowledged writes"));
    }
    let mut expected: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for (write, event) in script.iter().zip(&events) {
        if event.subject != write.subject() {
            return Err(format!("event {} is about {}, script wrote {}", event.sequence, event.subject, write.subject()));
        }
        if event.payload_digest != sha256_hex(write.body()) {
            return Err(format!("event {} digest differs from the script body", event.sequence));
        }
        expected.insert(write.subject(), write.body().to_vec());
    }
    let found = visible(dir.path())?;
    if found != expected {
        let diff: Vec<&String> = found
            .keys()
            .chain(expected.keys())
            .filter(|k| found.get(*k) != expected.get(*k))
            .collect();
        return Err(format!("visible state differs from the logged writes at {diff:?}"));
    }

    // the store keeps working after recovery
    apply(&store, &script[0]).map_err(|e| format!("write after recovery: {e}"))?;
    Ok(())
}

pub fn crash_consistency() -> Result<String, String> {
    let script = script();
    // each write passes three boundaries: stage, log, rename
    let boundaries = 3 * script.len();
    for boundary in 0..boundaries {
        run_once(boundary, &script).map_err(|e| format!("crash at boundary {boundary}: {e}"))?;
    }
    if run_once(boundaries, &script).is_ok() {
        return Err(format!("the script passes more than {boundaries} boundaries"));
    }
    Ok(format!("{} writes, {boundaries} crash points, no partial or unaudited documents", script.len()))
}
