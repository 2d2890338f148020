use oncall_core::engine::EngineConfig;
use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::judge::{judge_answers, JudgeReport};
use crate::replay::{replay, Predictions};
use crate::scenario::{Mode, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub cards_sent: usize,
    pub refusals: usize,
    pub judged: usize,
    pub correct: usize,
    pub judge_failures: usize,
    pub accuracy: Option<f64>,
    pub store_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Replays the scenario on a fresh store under `mode` and judges the result.
pub fn run_mode(scenario: &Scenario, config: &EngineConfig, mode: Mode) -> Result<(Predictions, JudgeReport), EvalError> {
    let engine = scenario.engine(config.clone(), mode)?;
    let preds = replay(&engine, &scenario.corpus)?;
    let judged = judge_answers(&preds, &scenario.corpus, engine.gateway());
    Ok((preds, judged))
}

pub fn ablate(scenario: &Scenario, config: &EngineConfig, modes: &[Mode]) -> Result<AblationReport, EvalError> {
    let mut rows = Vec::new();
    for mode in modes {
        let (preds, j) = run_mode(scenario, config, *mode)?;
        rows.push(AblationRow {
            mode: *mode,
            cards_sent: preds.sent_cards().count(),
            refusals: preds.sessions.iter().map(|s| s.refusals.len()).sum(),
            judged: j.judged,
            correct: j.correct,
            judge_failures: j.failures.len(),
            accuracy: j.accuracy,
            store_hash: preds.store_hash,
        });
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub fn accuracy(&self, mode: Mode) -> Option<f64> {
        self.rows.iter().find(|r| r.mode == mode).and_then(|r| r.accuracy)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<18}  {:>5}  {:>8}  {:>6}  {:>7}  {:>8}\n", "mode", "sent", "refused", "judged", "correct", "accuracy");
        for r in &self.rows {
            let acc = r.accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.3}"));
            out.push_str(&format!(
                "{:<18}  {:>5}  {:>8}  {:>6}  {:>7}  {:>8}\n",
                r.mode.label(),
                r.cards_sent,
                r.refusals,
                r.judged,
                r.correct,
                acc
            ));
        }
        out
    }
}
