//! Threshold sweep over one frozen answer stream.
//!
//! The corpus is replayed once with suppression disabled (theta = 1), which
//! records every answer the pipeline would produce. Each theta then only
//! re-decides suppression over those stored embeddings; nothing is generated
//! or embedded again.

use oncall_core::dedup::simulate_session;
use oncall_core::domain::{DedupConfig, Embedding, MessageId, MetricsReport, SessionId};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::LabeledCorpus;
use crate::error::EvalError;
use crate::replay::Predictions;
use crate::report::round3;

pub const TABLE_GRID: [f64; 8] = [0.0, 0.2, 0.4, 0.6, 0.7, 0.8, 0.9, 1.0];

pub const EXPECTED: &str = "expected";
pub const UNEXPECTED: &str = "unexpected";

#[derive(Debug, Clone, PartialEq)]
pub struct StreamAnswer {
    pub trigger_message_id: MessageId,
    pub answer_expected: bool,
    pub embedding: Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionStream {
    pub session_id: SessionId,
    pub answers: Vec<StreamAnswer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerStream {
    pub sessions: Vec<SessionStream>,
}

impl AnswerStream {
    /// Takes every card of a suppression-free replay, in session order.
    pub fn freeze(preds: &Predictions, corpus: &LabeledCorpus) -> Result<Self, EvalError> {
        let mut sessions = Vec::new();
        for p in &preds.sessions {
            let labels = corpus.session(&p.session_id).map(|s| &s.labels);
            let mut answers = Vec::new();
            for c in &p.cards {
                if !c.was_sent() {
                    return Err(EvalError::Scenario(format!("card {} was suppressed; freeze a theta = 1 replay", c.card_id)));
                }
                let expected = labels
                    .and_then(|l| l.answer_expected.get(&c.trigger_message_id).copied())
                    .ok_or_else(|| EvalError::MissingLabel(c.trigger_message_id.clone()))?;
                let embedding = c.embedding.clone().ok_or_else(|| EvalError::Scenario(format!("card {} has no embedding", c.card_id)))?;
                answers.push(StreamAnswer { trigger_message_id: c.trigger_message_id.clone(), answer_expected: expected, embedding });
            }
            sessions.push(SessionStream { session_id: p.session_id.clone(), answers });
        }
        Ok(Self { sessions })
    }

    pub fn len(&self) -> usize {
        self.sessions.iter().map(|s| s.answers.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// SHA-256 over ids, labels and raw embedding bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.sessions {
            h.update(s.session_id.as_str().as_bytes());
            h.update([0xff]);
            for a in &s.answers {
                h.update(a.trigger_message_id.as_str().as_bytes());
                h.update([0xfe, u8::from(a.answer_expected)]);
                for x in a.embedding.as_slice() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub precision: f64,
    pub recall: f64,
    pub precision_w: f64,
    pub recall_w: f64,
    pub f1_w: f64,
    pub sent: usize,
    pub suppressed: usize,
    /// Per session, per answer: suppressed at this theta.
    #[serde(skip)]
    pub decisions: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub stream_hash: String,
    pub answers: usize,
    pub rows: Vec<SweepRow>,
}

fn parse_theta(raw: &str) -> Result<f64, String> {
    let t: f64 = raw.trim().parse().map_err(|e| format!("theta `{raw}`: {e}"))?;
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(format!("theta {t} outside [0, 1]"))
    }
}

/// Parses a comma list such as `0,0.2,0.7`.
pub fn parse_thetas(list: &str) -> Result<Vec<f64>, String> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(parse_theta).collect()
}

fn row(stream: &AnswerStream, theta: f64) -> Result<SweepRow, EvalError> {
    let cfg = DedupConfig::with_theta(theta)?;
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    let mut decisions = Vec::new();
    for s in &stream.sessions {
        let embeddings: Vec<Embedding> = s.answers.iter().map(|a| a.embedding.clone()).collect();
        let flags: Vec<bool> = simulate_session(&embeddings, &cfg).into_iter().map(|x| x.0).collect();
        for (a, suppressed) in s.answers.iter().zip(&flags) {
            gold.push(if a.answer_expected { EXPECTED } else { UNEXPECTED });
            pred.push(if *suppressed { UNEXPECTED } else { EXPECTED });
        }
        decisions.push(flags);
    }
    let m = MetricsReport::from_labels(&gold, &pred)?;
    let positive = m.class(EXPECTED);
    let suppressed = decisions.iter().flatten().filter(|x| **x).count();
    Ok(SweepRow {
        theta,
        precision: positive.map_or(0.0, |c| c.precision),
        recall: positive.map_or(0.0, |c| c.recall),
        precision_w: m.precision_w,
        recall_w: m.recall_w,
        f1_w: m.f1_w,
        sent: gold.len() - suppressed,
        suppressed,
        decisions,
    })
}

/// One row per distinct theta, ascending.
pub fn sweep(stream: &AnswerStream, thetas: &[f64]) -> Result<SweepReport, EvalError> {
    let mut ts = thetas.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let rows = ts.iter().map(|t| row(stream, *t)).collect::<Result<Vec<_>, _>>()?;
    Ok(SweepReport { stream_hash: stream.hash(), answers: stream.len(), rows })
}

impl SweepReport {
    /// Aligned plain-text table with the usual five metric columns.
    pub fn table(&self) -> String {
        let mut out =
            format!("{:>6}  {:>9}  {:>6}  {:>11}  {:>8}  {:>5}\n", "theta", "Precision", "Recall", "Precision_w", "Recall_w", "F1_w");
        for r in &self.rows {
            out.push_str(&format!(
                "{:>6.2}  {:>9.3}  {:>6.3}  {:>11.3}  {:>8.3}  {:>5.3}\n",
                r.theta, r.precision, r.recall, r.precision_w, r.recall_w, r.f1_w
            ));
        }
        out
    }

    pub fn rounded(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            for v in [&mut row.precision, &mut row.recall, &mut row.precision_w, &mut row.recall_w, &mut row.f1_w] {
                *v = round3(*v);
            }
        }
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn answer(id: &str, expected: bool, v: &[f32]) -> StreamAnswer {
        StreamAnswer { trigger_message_id: MessageId::new(id), answer_expected: expected, embedding: Embedding::normalized(v).unwrap() }
    }

    fn stream() -> AnswerStream {
        AnswerStream {
            sessions: vec![SessionStream {
                session_id: SessionId::from("s"),
                answers: vec![answer("a", true, &[1.0, 0.0]), answer("b", false, &[1.0, 0.0]), answer("c", true, &[1.0, 1.0])],
            }],
        }
    }

    #[test]
    fn hand_computed_rows() {
        let r = sweep(&stream(), &[1.0, 0.0, 0.8]).unwrap();
        let thetas: Vec<f64> = r.rows.iter().map(|x| x.theta).collect();
        assert_eq!(thetas, vec![0.0, 0.8, 1.0]);
        // theta 0: only the first answer is sent
        assert_eq!(r.rows[0].decisions, vec![vec![false, true, true]]);
        assert_eq!((r.rows[0].precision, r.rows[0].recall), (1.0, 0.5));
        // theta 0.8: cos(a, c) = 0.707 stays, the exact repeat goes
        assert_eq!(r.rows[1].decisions, vec![vec![false, true, false]]);
        assert_eq!((r.rows[1].precision, r.rows[1].recall), (1.0, 1.0));
        // theta 1: nothing suppressed
        assert_eq!(r.rows[2].decisions, vec![vec![false, false, false]]);
        assert_eq!(r.rows[2].recall, 1.0);
        assert!((r.rows[2].precision - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn thetas_parse_and_validate() {
        assert_eq!(parse_thetas("0, 0.2,1").unwrap(), vec![0.0, 0.2, 1.0]);
        assert!(parse_thetas("0,1.5").is_err());
        assert!(parse_thetas("x").is_err());
    }

    #[test]
    fn hash_tracks_embeddings() {
        let a = stream();
        let mut b = stream();
        assert_eq!(a.hash(), b.hash());
        b.sessions[0].answers[2].embedding = Embedding::normalized(&[1.0, 2.0]).unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
