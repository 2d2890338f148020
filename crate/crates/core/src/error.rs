use thiserror::Error;

use crate::domain::{CardId, EntryId, SessionId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("session {0} is closed")]
    SessionClosed(SessionId),
    #[error("vector dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("model call exceeded its {budget_ms} ms budget")]
    Timeout { budget_ms: u64 },
    #[error("reply violates the response schema: {0}")]
    SchemaViolation(String),
    #[error("remote model unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("rerank needs at least one candidate")]
    EmptyCandidates,
    #[error("embedding dimension {got} does not match configured {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gateway configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("embedding failed: {0}")]
    EmbeddingFailure(#[from] GatewayError),
    #[error("entry {0} does not exist")]
    MissingEntry(EntryId),
    #[error("document is empty")]
    EmptyDocument,
    #[error("invalid chunking: chunk_size {chunk_size} must exceed overlap {overlap}")]
    InvalidChunking { chunk_size: usize, overlap: usize },
    #[error("invalid entry: {0}")]
    InvalidEntry(#[from] DomainError),
    #[error("snapshot is corrupt: {0}")]
    CorruptSnapshot(String),
    #[error("mutation log is corrupt at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("store embedding dimension is {store}, gateway produces {gateway}")]
    DimensionMismatch { store: usize, gateway: usize },
    #[error("store I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {0} already exists")]
    SessionExists(SessionId),
    #[error("unknown card {0}")]
    UnknownCard(CardId),
    #[error("stale event: seq {seq} <= cursor {cursor}")]
    StaleEvent { seq: u64, cursor: u64 },
    #[error("card {0} cannot be accepted in its current state")]
    CardNotAcceptable(CardId),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Store(#[from] StoreError),
}
