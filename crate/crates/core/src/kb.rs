//! Versioned knowledge store: exact two-path vector search over QA pairs and
//! document chunks, mutated only through logged transactions.
//!
//! Every committed transaction appends its records to `mutations.jsonl`
//! before the in-memory snapshot is published; `snapshot.json` is rewritten
//! (temp file plus rename) every `snapshot_every` mutations and on
//! [`KnowledgeStore::persist`]. Loading takes the snapshot if it parses and
//! agrees with the log, then replays the remaining log records. A torn final
//! line or an incomplete trailing transaction is discarded; anything else
//! malformed in the log is an error.
//!
//! Readers take an `Arc<StoreSnapshot>`; writers clone-on-write under a
//! single mutex, so a search never observes half of a transaction.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

use crate::domain::{
    AnswerCard, CardId, Embedding, EntryId, EntryKind, EntryStatus, KnowledgeEntry, Provenance, ReviewDecision, SessionId,
};
use crate::error::{DomainError, StoreError};
use crate::gateway::Gateway;

const SNAPSHOT_FILE: &str = "snapshot.json";
const LOG_FILE: &str = "mutations.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub chunk_size: usize,
    pub overlap: usize,
    pub snapshot_every: usize,
    /// fsync the log after every transaction.
    pub sync: bool,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { chunk_size: 1200, overlap: 200, snapshot_every: 64, sync: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MutationOp {
    Insert,
    Delete,
    Update,
    Validate,
}

/// Why a mutation happened.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum MutationCause {
    AcceptedCard { card_id: CardId },
    ReviewDecision { card_id: CardId, action: String },
    UnansweredExtraction { session_id: SessionId, message_id: String },
    DocIngestion { url: String, session_id: Option<SessionId> },
    ManualSeed,
}

impl MutationCause {
    pub fn label(&self) -> &'static str {
        match self {
            Self::AcceptedCard { .. } => "AcceptedCard",
            Self::ReviewDecision { .. } => "ReviewDecision",
            Self::UnansweredExtraction { .. } => "UnansweredExtraction",
            Self::DocIngestion { .. } => "DocIngestion",
            Self::ManualSeed => "ManualSeed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationRecord {
    pub version: u64,
    /// Transaction number; records of one transaction are contiguous.
    pub txn: u64,
    pub txn_size: usize,
    pub op: MutationOp,
    pub entry_id: EntryId,
    /// The entry after the mutation; absent for deletes.
    pub payload: Option<KnowledgeEntry>,
    pub cause: MutationCause,
    /// Idempotency key of the task that produced the transaction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub version: u64,
    pub embedding_dim: usize,
    pub next_id: u64,
    pub next_txn: u64,
    pub entries: BTreeMap<EntryId, KnowledgeEntry>,
    /// Completed task keys and the entries their transaction touched.
    pub tasks: BTreeMap<String, Vec<EntryId>>,
}

/// One scored search hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredEntry {
    pub entry_id: EntryId,
    pub score: f64,
}

impl StoreSnapshot {
    pub fn empty(embedding_dim: usize) -> Self {
        Self { version: 0, embedding_dim, next_id: 1, next_txn: 1, entries: BTreeMap::new(), tasks: BTreeMap::new() }
    }

    pub fn get(&self, id: EntryId) -> Option<&KnowledgeEntry> {
        self.entries.get(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn task_done(&self, task: &str) -> bool {
        self.tasks.contains_key(task)
    }

    /// Exact top-`k` by dot product among entries of `kind` (all kinds when
    /// `None`). Ties go to the lower entry id.
    pub fn search_embedding(&self, query: &Embedding, kind: Option<EntryKind>, k: usize) -> Vec<ScoredEntry> {
        let mut hits: Vec<ScoredEntry> = self
            .entries
            .values()
            .filter(|e| kind.is_none_or(|k| e.kind == k))
            .map(|e| ScoredEntry { entry_id: e.id, score: dot(query, &e.embedding) })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.entry_id.cmp(&b.entry_id)));
        hits.truncate(k);
        hits
    }

    /// Chunk ids currently stored for `url`, ascending.
    pub fn chunks_for_url(&self, url: &str) -> Vec<EntryId> {
        self.entries.values().filter(|e| e.kind == EntryKind::DocChunk && e.url() == Some(url)).map(|e| e.id).collect()
    }

    /// SHA-256 over the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("snapshot serializes");
        hex_digest(&bytes)
    }

    fn apply(&mut self, rec: &MutationRecord) -> Result<(), String> {
        if rec.version != self.version + 1 {
            return Err(format!("version {} does not follow {}", rec.version, self.version));
        }
        match rec.op {
            MutationOp::Insert => {
                let entry = rec.payload.clone().ok_or("insert without payload")?;
                if entry.id != rec.entry_id || self.entries.contains_key(&entry.id) || entry.id.0 < self.next_id {
                    return Err(format!("insert of {} would reuse an id", rec.entry_id));
                }
                if entry.embedding.dim() != self.embedding_dim {
                    return Err(format!("entry {} has dimension {}", entry.id, entry.embedding.dim()));
                }
                self.next_id = entry.id.0 + 1;
                self.entries.insert(entry.id, entry);
            }
            MutationOp::Delete => {
                self.entries.remove(&rec.entry_id).ok_or_else(|| format!("delete of missing {}", rec.entry_id))?;
            }
            MutationOp::Update | MutationOp::Validate => {
                let entry = rec.payload.clone().ok_or("update without payload")?;
                if !self.entries.contains_key(&rec.entry_id) || entry.id != rec.entry_id {
                    return Err(format!("update of missing {}", rec.entry_id));
                }
                self.entries.insert(entry.id, entry);
            }
        }
        self.version = rec.version;
        self.next_txn = self.next_txn.max(rec.txn + 1);
        if let Some(task) = &rec.task {
            let ids = self.tasks.entry(task.clone()).or_default();
            if !ids.contains(&rec.entry_id) {
                ids.push(rec.entry_id);
            }
        }
        Ok(())
    }

    /// Replays `records` onto an empty snapshot.
    pub fn fold(embedding_dim: usize, records: &[MutationRecord]) -> Result<Self, StoreError> {
        let mut snap = Self::empty(embedding_dim);
        for (i, rec) in records.iter().enumerate() {
            snap.apply(rec).map_err(|reason| StoreError::CorruptLog { line: i + 1, reason })?;
        }
        Ok(snap)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn dot(a: &Embedding, b: &Embedding) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum()
}

/// Character windows of `chunk_size` advancing by `chunk_size - overlap`;
/// the last window ends at the end of the text. Blank windows are dropped.
pub fn chunk_text(text: &str, chunk_size: usize, overlap: usize) -> Result<Vec<String>, StoreError> {
    if chunk_size == 0 || overlap >= chunk_size {
        return Err(StoreError::InvalidChunking { chunk_size, overlap });
    }
    let chars: Vec<char> = text.chars().collect();
    if text.trim().is_empty() {
        return Err(StoreError::EmptyDocument);
    }
    let step = chunk_size - overlap;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + chunk_size).min(chars.len());
        let chunk: String = chars[start..end].iter().collect();
        if !chunk.trim().is_empty() {
            out.push(chunk);
        }
        if end == chars.len() {
            break;
        }
        start += step;
    }
    Ok(out)
}

/// A mutation before it is assigned a version.
#[derive(Debug, Clone, PartialEq)]
pub enum PendingOp {
    Insert { kind: EntryKind, question: String, content: String, source: Provenance, status: EntryStatus, embedding: Embedding },
    Delete(EntryId),
    Update { entry_id: EntryId, question: String, content: String, embedding: Embedding },
    Validate(EntryId),
}

/// Result of a commit attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct Commit {
    pub records: Vec<MutationRecord>,
    /// Entries the transaction touched, in op order.
    pub entry_ids: Vec<EntryId>,
    /// The task key had already been committed; nothing was written.
    pub already_applied: bool,
}

/// Where a simulated crash interrupts the write path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// The transaction reaching `version` is appended to the log, then the
    /// process dies before publishing or snapshotting.
    AfterLogAppend { version: u64 },
    /// The log append for `version` is torn after `bytes` bytes.
    TornLogAppend { version: u64, bytes: usize },
    /// A snapshot write at `version` dies after writing `bytes` of the temp file.
    DuringSnapshot { version: u64, bytes: usize },
}

struct Disk {
    dir: PathBuf,
    log: File,
}

struct Writer {
    disk: Option<Disk>,
    records: Vec<MutationRecord>,
    since_snapshot: usize,
    crash: Option<CrashPoint>,
    crashed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub version: u64,
    pub entries: usize,
    pub qa_pairs: usize,
    pub doc_chunks: usize,
    pub provisional: usize,
    pub validated: usize,
    pub mutations: usize,
    pub hash: String,
}

pub struct KnowledgeStore {
    config: StoreConfig,
    current: RwLock<Arc<StoreSnapshot>>,
    writer: Mutex<Writer>,
}

impl std::fmt::Debug for KnowledgeStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let snap = self.view();
        f.debug_struct("KnowledgeStore").field("version", &snap.version).field("entries", &snap.len()).finish_non_exhaustive()
    }
}

fn injected(what: &str) -> StoreError {
    StoreError::Io(std::io::Error::other(format!("injected crash: {what}")))
}

impl KnowledgeStore {
    pub fn in_memory(embedding_dim: usize, config: StoreConfig) -> Self {
        Self::from_parts(StoreSnapshot::empty(embedding_dim), Vec::new(), None, config)
    }

    fn from_parts(snap: StoreSnapshot, records: Vec<MutationRecord>, disk: Option<Disk>, config: StoreConfig) -> Self {
        Self {
            config,
            current: RwLock::new(Arc::new(snap)),
            writer: Mutex::new(Writer { disk, records, since_snapshot: 0, crash: None, crashed: false }),
        }
    }

    /// Opens (or creates) a store directory and recovers its state.
    pub fn open(dir: &Path, embedding_dim: usize, config: StoreConfig) -> Result<Self, StoreError> {
        fs::create_dir_all(dir)?;
        let log_path = dir.join(LOG_FILE);
        let (records, valid_len) = read_log(&log_path)?;
        if log_path.exists() && fs::metadata(&log_path)?.len() != valid_len {
            warn!(path = %log_path.display(), "dropping torn or incomplete log tail");
            OpenOptions::new().write(true).open(&log_path)?.set_len(valid_len)?;
        }
        let from_log = |records: &[MutationRecord]| StoreSnapshot::fold(embedding_dim, records);
        let snap = match read_snapshot(&dir.join(SNAPSHOT_FILE)) {
            Ok(None) => from_log(&records)?,
            Ok(Some(snap)) => {
                let last = records.last().map_or(0, |r| r.version);
                if snap.version > last || snap.embedding_dim != embedding_dim {
                    warn!(snapshot = snap.version, log = last, "snapshot disagrees with log, replaying log");
                    from_log(&records)?
                } else {
                    let start = records.partition_point(|r| r.version <= snap.version);
                    let mut snap = snap;
                    for (i, rec) in records[start..].iter().enumerate() {
                        snap.apply(rec).map_err(|reason| StoreError::CorruptLog { line: start + i + 1, reason })?;
                    }
                    snap
                }
            }
            Err(e) => {
                warn!(error = %e, "snapshot unreadable, replaying log");
                from_log(&records)?
            }
        };
        if snap.embedding_dim != embedding_dim {
            return Err(StoreError::DimensionMismatch { store: snap.embedding_dim, gateway: embedding_dim });
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Self::from_parts(snap, records, Some(Disk { dir: dir.to_path_buf(), log }), config))
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    /// Immutable view of the latest committed state.
    pub fn view(&self) -> Arc<StoreSnapshot> {
        self.current.read().clone()
    }

    pub fn version(&self) -> u64 {
        self.view().version
    }

    pub fn embedding_dim(&self) -> usize {
        self.view().embedding_dim
    }

    /// Full mutation history, oldest first.
    pub fn records(&self) -> Vec<MutationRecord> {
        self.writer.lock().records.clone()
    }

    /// Records with version strictly greater than `version`.
    pub fn records_since(&self, version: u64) -> Vec<MutationRecord> {
        let w = self.writer.lock();
        let start = w.records.partition_point(|r| r.version <= version);
        w.records[start..].to_vec()
    }

    pub fn history(&self, id: EntryId) -> Vec<MutationRecord> {
        self.writer.lock().records.iter().filter(|r| r.entry_id == id).cloned().collect()
    }

    /// Arms a one-shot simulated crash. After it fires every write fails
    /// until the store is reopened from disk.
    pub fn inject_crash(&self, point: CrashPoint) {
        self.writer.lock().crash = Some(point);
    }

    pub fn stats(&self) -> StoreStats {
        let snap = self.view();
        let count = |f: &dyn Fn(&KnowledgeEntry) -> bool| snap.entries.values().filter(|e| f(e)).count();
        StoreStats {
            version: snap.version,
            entries: snap.len(),
            qa_pairs: count(&|e| e.kind == EntryKind::QAPair),
            doc_chunks: count(&|e| e.kind == EntryKind::DocChunk),
            provisional: count(&|e| e.status == EntryStatus::Provisional),
            validated: count(&|e| e.status == EntryStatus::Validated),
            mutations: self.writer.lock().records.len(),
            hash: snap.hash(),
        }
    }

    /// Applies `ops` atomically. With a `task` key that was already committed
    /// nothing happens and the earlier entry ids are returned. A missing
    /// target entry rejects the whole transaction.
    pub fn commit(&self, task: Option<&str>, cause: MutationCause, ops: Vec<PendingOp>) -> Result<Commit, StoreError> {
        let mut w = self.writer.lock();
        if w.crashed {
            return Err(injected("store is down"));
        }
        let base = self.view();
        if let Some(ids) = task.and_then(|t| base.tasks.get(t)) {
            return Ok(Commit { records: Vec::new(), entry_ids: ids.clone(), already_applied: true });
        }
        if ops.is_empty() {
            return Ok(Commit { records: Vec::new(), entry_ids: Vec::new(), already_applied: false });
        }
        let mut next = (*base).clone();
        let txn = next.next_txn;
        let mut records = Vec::with_capacity(ops.len());
        for op in ops {
            let version = next.version + 1;
            let (op, entry_id, payload) = match op {
                PendingOp::Insert { kind, question, content, source, status, embedding } => {
                    let id = EntryId(next.next_id);
                    let entry = KnowledgeEntry {
                        id,
                        kind,
                        question,
                        content,
                        source,
                        status,
                        embedding,
                        created_seq: version,
                        updated_seq: version,
                    };
                    entry.validate()?;
                    (MutationOp::Insert, id, Some(entry))
                }
                PendingOp::Delete(id) => {
                    next.get(id).ok_or(StoreError::MissingEntry(id))?;
                    (MutationOp::Delete, id, None)
                }
                PendingOp::Update { entry_id, question, content, embedding } => {
                    let mut entry = next.get(entry_id).cloned().ok_or(StoreError::MissingEntry(entry_id))?;
                    if entry.kind == EntryKind::QAPair {
                        entry.question = question;
                    }
                    entry.content = content;
                    entry.embedding = embedding;
                    entry.status = EntryStatus::Validated;
                    entry.updated_seq = version;
                    entry.validate()?;
                    (MutationOp::Update, entry_id, Some(entry))
                }
                PendingOp::Validate(id) => {
                    let mut entry = next.get(id).cloned().ok_or(StoreError::MissingEntry(id))?;
                    entry.status = EntryStatus::Validated;
                    entry.updated_seq = version;
                    (MutationOp::Validate, id, Some(entry))
                }
            };
            if let Some(p) = &payload {
                if p.embedding.dim() != next.embedding_dim {
                    return Err(StoreError::DimensionMismatch { store: next.embedding_dim, gateway: p.embedding.dim() });
                }
            }
            let rec =
                MutationRecord { version, txn, txn_size: 0, op, entry_id, payload, cause: cause.clone(), task: task.map(str::to_string) };
            next.apply(&rec).map_err(|why| StoreError::InvalidEntry(DomainError::Invariant(why)))?;
            records.push(rec);
        }
        let size = records.len();
        for r in &mut records {
            r.txn_size = size;
        }
        self.append(&mut w, &records)?;
        let entry_ids = records.iter().map(|r| r.entry_id).collect();
        w.records.extend(records.iter().cloned());
        w.since_snapshot += size;
        let next = Arc::new(next);
        *self.current.write() = next.clone();
        debug!(txn, version = next.version, cause = cause.label(), "committed");
        if w.since_snapshot >= self.config.snapshot_every.max(1) {
            self.write_snapshot(&mut w, &next)?;
        }
        Ok(Commit { records, entry_ids, already_applied: false })
    }

    fn append(&self, w: &mut Writer, records: &[MutationRecord]) -> Result<(), StoreError> {
        let last_version = records.last().map_or(0, |r| r.version);
        let crash = w.crash.filter(|c| match *c {
            CrashPoint::AfterLogAppend { version } | CrashPoint::TornLogAppend { version, .. } => {
                records.first().is_some_and(|r| r.version <= version) && version <= last_version
            }
            CrashPoint::DuringSnapshot { .. } => false,
        });
        let Some(disk) = w.disk.as_mut() else {
            return match crash {
                Some(_) => {
                    w.crashed = true;
                    Err(injected("log append"))
                }
                None => Ok(()),
            };
        };
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).map_err(|e| StoreError::Io(e.into()))?;
            buf.push(b'\n');
        }
        if let Some(CrashPoint::TornLogAppend { bytes, .. }) = crash {
            disk.log.write_all(&buf[..bytes.min(buf.len().saturating_sub(1))])?;
            disk.log.flush()?;
            w.crashed = true;
            return Err(injected("torn log append"));
        }
        disk.log.write_all(&buf)?;
        disk.log.flush()?;
        if self.config.sync {
            disk.log.sync_data()?;
        }
        if crash.is_some() {
            w.crashed = true;
            return Err(injected("after log append"));
        }
        Ok(())
    }

    fn write_snapshot(&self, w: &mut Writer, snap: &StoreSnapshot) -> Result<(), StoreError> {
        w.since_snapshot = 0;
        let crash = w.crash.filter(|c| matches!(c, CrashPoint::DuringSnapshot { version, .. } if *version <= snap.version));
        let Some(disk) = w.disk.as_ref() else { return Ok(()) };
        let bytes = serde_json::to_vec(snap).map_err(|e| StoreError::Io(e.into()))?;
        let tmp = disk.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let mut f = File::create(&tmp)?;
        if let Some(CrashPoint::DuringSnapshot { bytes: cut, .. }) = crash {
            f.write_all(&bytes[..cut.min(bytes.len())])?;
            w.crashed = true;
            return Err(injected("snapshot write"));
        }
        f.write_all(&bytes)?;
        if self.config.sync {
            f.sync_all()?;
        }
        fs::rename(&tmp, disk.dir.join(SNAPSHOT_FILE))?;
        Ok(())
    }

    /// Writes a snapshot of the current state now.
    pub fn persist(&self) -> Result<(), StoreError> {
        let mut w = self.writer.lock();
        if w.crashed {
            return Err(injected("store is down"));
        }
        let snap = self.view();
        self.write_snapshot(&mut w, &snap)
    }

    fn embed(&self, gateway: &Gateway, text: &str) -> Result<Embedding, StoreError> {
        let e = gateway.embed(text)?;
        let dim = self.embedding_dim();
        if e.dim() != dim {
            return Err(StoreError::DimensionMismatch { store: dim, gateway: e.dim() });
        }
        Ok(e)
    }

    /// Inserts a QA pair keyed on its question embedding. Returns the new id,
    /// or the id from the earlier run when `task` was already applied.
    #[allow(clippy::too_many_arguments)]
    pub fn insert_qa(
        &self,
        gateway: &Gateway,
        question: &str,
        content: &str,
        source: Provenance,
        status: EntryStatus,
        cause: MutationCause,
        task: Option<&str>,
    ) -> Result<EntryId, StoreError> {
        if let Some(ids) = task.and_then(|t| self.view().tasks.get(t).cloned()) {
            if let Some(id) = ids.first() {
                return Ok(*id);
            }
        }
        if question.trim().is_empty() || content.trim().is_empty() {
            return Err(StoreError::InvalidEntry(DomainError::Invalid("QA pair needs question and content".into())));
        }
        let embedding = self.embed(gateway, question)?;
        let op = PendingOp::Insert {
            kind: EntryKind::QAPair,
            question: question.trim().to_string(),
            content: content.trim().to_string(),
            source,
            status,
            embedding,
        };
        let commit = self.commit(task, cause, vec![op])?;
        commit.entry_ids.first().copied().ok_or(StoreError::EmptyDocument)
    }

    /// Chunks and upserts a document by url: prior chunks for the url are
    /// deleted in the same transaction.
    pub fn ingest_document(
        &self,
        gateway: &Gateway,
        url: &str,
        text: &str,
        cause: MutationCause,
        task: Option<&str>,
    ) -> Result<Vec<EntryId>, StoreError> {
        if let Some(ids) = task.and_then(|t| self.view().tasks.get(t).cloned()) {
            let snap = self.view();
            return Ok(ids.into_iter().filter(|id| snap.get(*id).is_some()).collect());
        }
        let chunks = chunk_text(text, self.config.chunk_size, self.config.overlap)?;
        let mut ops: Vec<PendingOp> = Vec::with_capacity(chunks.len());
        for chunk in chunks {
            let embedding = self.embed(gateway, &chunk)?;
            ops.push(PendingOp::Insert {
                kind: EntryKind::DocChunk,
                question: String::new(),
                content: chunk,
                source: Provenance::Url(url.to_string()),
                status: EntryStatus::Validated,
                embedding,
            });
        }
        let old = self.view().chunks_for_url(url);
        let deletes = old.into_iter().map(PendingOp::Delete);
        let ops: Vec<PendingOp> = deletes.chain(ops).collect();
        let commit = self.commit(task, cause, ops)?;
        let snap = self.view();
        Ok(commit.records.iter().filter(|r| r.op == MutationOp::Insert && snap.get(r.entry_id).is_some()).map(|r| r.entry_id).collect())
    }

    /// Applies a review decision for `card`. Keep writes nothing.
    pub fn apply_review(
        &self,
        gateway: &Gateway,
        decision: &ReviewDecision,
        card: &AnswerCard,
        task: Option<&str>,
    ) -> Result<Vec<MutationRecord>, StoreError> {
        let cause = MutationCause::ReviewDecision { card_id: card.id.clone(), action: decision.label().into() };
        let ops = match decision {
            ReviewDecision::Keep => return Ok(Vec::new()),
            ReviewDecision::Delete { entry_ids } => {
                let unique: BTreeSet<EntryId> = entry_ids.iter().copied().collect();
                unique.into_iter().map(PendingOp::Delete).collect()
            }
            ReviewDecision::Update { entry_id, new_question, new_content } => {
                let snap = self.view();
                let entry = snap.get(*entry_id).ok_or(StoreError::MissingEntry(*entry_id))?;
                if new_content.trim().is_empty() || (entry.kind == EntryKind::QAPair && new_question.trim().is_empty()) {
                    return Err(StoreError::InvalidEntry(DomainError::Invalid("update with empty text".into())));
                }
                let key = match entry.kind {
                    EntryKind::QAPair => new_question.as_str(),
                    EntryKind::DocChunk => new_content.as_str(),
                };
                let embedding = self.embed(gateway, key)?;
                vec![PendingOp::Update {
                    entry_id: *entry_id,
                    question: new_question.trim().to_string(),
                    content: new_content.trim().to_string(),
                    embedding,
                }]
            }
        };
        Ok(self.commit(task, cause, ops)?.records)
    }

    /// Embeds `query` and searches the latest view.
    pub fn search(&self, gateway: &Gateway, query: &str, kind: Option<EntryKind>, k: usize) -> Result<Vec<ScoredEntry>, StoreError> {
        let q = self.embed(gateway, query)?;
        Ok(self.view().search_embedding(&q, kind, k))
    }

    /// Bulk-loads entries as new manual seeds (fresh ids, recomputed embeddings).
    pub fn import_entries(&self, gateway: &Gateway, entries: &[SeedEntry]) -> Result<Vec<EntryId>, StoreError> {
        let mut ops = Vec::with_capacity(entries.len());
        for e in entries {
            let (kind, key) = if e.question.trim().is_empty() {
                (EntryKind::DocChunk, e.content.as_str())
            } else {
                (EntryKind::QAPair, e.question.as_str())
            };
            ops.push(PendingOp::Insert {
                kind,
                question: e.question.trim().to_string(),
                content: e.content.trim().to_string(),
                source: e.url.clone().map_or(Provenance::ManualSeed, Provenance::Url),
                status: e.status.unwrap_or(EntryStatus::Validated),
                embedding: self.embed(gateway, key)?,
            });
        }
        Ok(self.commit(None, MutationCause::ManualSeed, ops)?.entry_ids)
    }
}

/// Portable entry form used for seeding, export and import.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEntry {
    #[serde(default)]
    pub question: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<EntryStatus>,
}

impl From<&KnowledgeEntry> for SeedEntry {
    fn from(e: &KnowledgeEntry) -> Self {
        Self { question: e.question.clone(), content: e.content.clone(), url: e.url().map(str::to_string), status: Some(e.status) }
    }
}

fn read_snapshot(path: &Path) -> Result<Option<StoreSnapshot>, StoreError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| StoreError::CorruptSnapshot(e.to_string())),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Parses the log, returning complete transactions and the byte length
/// they occupy.
pub fn read_log(path: &Path) -> Result<(Vec<MutationRecord>, u64), StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((Vec::new(), 0)),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::new(file);
    let mut records: Vec<MutationRecord> = Vec::new();
    let mut committed = 0usize;
    let mut committed_len = 0u64;
    let mut offset = 0u64;
    let mut line_no = 0;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        // records always end in a newline, so a line without one is torn
        if n == 0 || !line.ends_with('\n') {
            break;
        }
        line_no += 1;
        offset += n as u64;
        let rec: MutationRecord =
            serde_json::from_str(line.trim_end()).map_err(|e| StoreError::CorruptLog { line: line_no, reason: e.to_string() })?;
        if let Some(open) = records.get(committed) {
            if rec.txn != open.txn {
                return Err(StoreError::CorruptLog { line: line_no, reason: "interleaved transactions".into() });
            }
        }
        records.push(rec);
        if records.len() - committed == records[committed].txn_size {
            committed = records.len();
            committed_len = offset;
        }
    }
    records.truncate(committed);
    Ok((records, committed_len))
}
