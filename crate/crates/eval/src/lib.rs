//! Replay harness and evaluation protocol for the on-call agent: labeled
//! corpora, scope-identification scoring, judged answer accuracy, the dedup
//! threshold sweep and the self-improvement ablation.

pub mod ablate;
pub mod corpus;
pub mod error;
pub mod judge;
pub mod replay;
pub mod report;
pub mod scenario;
pub mod score;
pub mod sweep;
pub mod synth;

use oncall_core::domain::DedupConfig;
use oncall_core::engine::EngineConfig;

pub use error::EvalError;

use crate::replay::{replay, Predictions};
use crate::scenario::{Mode, Scenario};
use crate::sweep::{sweep, AnswerStream, SweepReport};

/// Replays with suppression off and freezes the resulting answer stream.
pub fn freeze_stream(scenario: &Scenario, config: &EngineConfig) -> Result<(Predictions, AnswerStream), EvalError> {
    let mut cfg = config.clone();
    cfg.dedup = DedupConfig { theta: 1.0, ..config.dedup };
    let engine = scenario.engine(cfg, Mode::Full)?;
    let preds = replay(&engine, &scenario.corpus)?;
    let stream = AnswerStream::freeze(&preds, &scenario.corpus)?;
    Ok((preds, stream))
}

pub fn sweep_scenario(scenario: &Scenario, config: &EngineConfig, thetas: &[f64]) -> Result<SweepReport, EvalError> {
    let (_, stream) = freeze_stream(scenario, config)?;
    sweep(&stream, thetas)
}
