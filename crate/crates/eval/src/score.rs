use std::collections::BTreeMap;

use oncall_core::domain::{MessageId, MetricsReport, ScopeClass, SessionId};
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledCorpus;
use crate::error::EvalError;
use crate::replay::Predictions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub metrics: MetricsReport,
    /// Within Scope treated as the positive class.
    pub precision: f64,
    pub recall: f64,
    pub support: BTreeMap<String, u64>,
}

/// Scores predicted verdicts against gold scope labels. Every labeled
/// message needs a verdict and every verdict a label.
pub fn score_identification(preds: &Predictions, corpus: &LabeledCorpus) -> Result<IdentificationReport, EvalError> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for s in &corpus.sessions {
        let p = preds.session(&s.session_id).ok_or_else(|| EvalError::Alignment(format!("no predictions for session {}", s.session_id)))?;
        let extra: Vec<&MessageId> = p.verdicts.keys().filter(|k| !s.labels.scope.contains_key(*k)).collect();
        if let Some(id) = extra.first() {
            return Err(EvalError::Alignment(format!("{}/{id} has a verdict but no label", s.session_id)));
        }
        for (id, g) in &s.labels.scope {
            let v = p.verdicts.get(id).ok_or_else(|| missing(&s.session_id, id))?;
            gold.push(g.label());
            pred.push(v.label());
        }
    }
    if preds.sessions.len() != corpus.sessions.len() {
        return Err(EvalError::Alignment(format!(
            "{} predicted sessions for {} corpus sessions",
            preds.sessions.len(),
            corpus.sessions.len()
        )));
    }
    let metrics = MetricsReport::from_labels(&gold, &pred)?;
    let positive = metrics.class(ScopeClass::WithinScope.label());
    Ok(IdentificationReport {
        precision: positive.map_or(0.0, |m| m.precision),
        recall: positive.map_or(0.0, |m| m.recall),
        support: metrics.per_class.iter().map(|(k, m)| (k.clone(), m.n)).collect(),
        metrics,
    })
}

fn missing(session: &SessionId, id: &MessageId) -> EvalError {
    EvalError::Alignment(format!("{session}/{id} is labeled but has no verdict"))
}

impl IdentificationReport {
    /// Per-class rows followed by the weighted summary.
    pub fn table(&self) -> String {
        let mut out = format!("{:<22}  {:>5}  {:>9}  {:>6}  {:>5}\n", "class", "n", "precision", "recall", "f1");
        for (class, m) in &self.metrics.per_class {
            out.push_str(&format!("{class:<22}  {:>5}  {:>9.3}  {:>6.3}  {:>5.3}\n", m.n, m.precision, m.recall, m.f1));
        }
        let m = &self.metrics;
        out.push_str(&format!("{:<22}  {:>5}  {:>9.3}  {:>6.3}  {:>5.3}\n", "weighted", m.total, m.precision_w, m.recall_w, m.f1_w));
        out.push_str(&format!("accuracy {:.3}\n", m.accuracy));
        out
    }
}
