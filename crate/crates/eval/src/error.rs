use std::path::Path;

use oncall_core::domain::MessageId;
use oncall_core::error::{DomainError, EngineError, GatewayError, StoreError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("corpus line {line}: {reason}")]
    CorpusFormat { line: usize, reason: String },
    #[error("predictions and labels disagree: {0}")]
    Alignment(String),
    #[error("no answer_expected label for trigger {0}")]
    MissingLabel(MessageId),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

impl EvalError {
    pub(crate) fn corpus(line: usize, reason: impl ToString) -> Self {
        Self::CorpusFormat { line, reason: reason.to_string() }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}
