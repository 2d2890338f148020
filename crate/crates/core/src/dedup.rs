//! Answer-level duplicate suppression within one session.
//!
//! A new answer is compared with every answer already *sent* in the session
//! (suppressed ones never count). Similarities are clamped at zero and an
//! answer is a duplicate only when the maximum strictly exceeds theta, so
//! theta = 1 disables suppression and theta = 0 suppresses every later
//! answer with any positive similarity.

use serde::{Deserialize, Serialize};

use crate::domain::{AnswerCard, CardId, DedupConfig, Embedding};
use crate::error::DomainError;

/// Dot product of two unit vectors.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, DomainError> {
    if a.dim() != b.dim() {
        return Err(DomainError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub max_similarity: f64,
    pub nearest_card_id: Option<CardId>,
    pub is_duplicate: bool,
}

fn similarity(a: &Embedding, b: &Embedding, cfg: &DedupConfig) -> f64 {
    // differing dimensions cannot be compared; treat as unrelated
    let s = cosine(a, b).unwrap_or(0.0);
    let s = if cfg.clamp_negative { s.max(0.0) } else { s };
    s.min(1.0)
}

/// Compares `answer` against the sent or accepted cards in `history`.
pub fn check_duplicate(answer: &Embedding, history: &[AnswerCard], cfg: &DedupConfig) -> SimilarityReport {
    let mut best: Option<(f64, &CardId)> = None;
    for card in history.iter().filter(|c| c.status.was_sent()) {
        let s = similarity(answer, &card.embedding, cfg);
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, &card.id));
        }
    }
    match best {
        None => SimilarityReport { max_similarity: 0.0, nearest_card_id: None, is_duplicate: false },
        Some((s, id)) => SimilarityReport { max_similarity: s, nearest_card_id: Some(id.clone()), is_duplicate: s > cfg.theta },
    }
}

/// Replays dedup over one session's answers in order. Returns, per answer,
/// whether it was suppressed and the index of its nearest sent answer.
pub fn simulate_session(answers: &[Embedding], cfg: &DedupConfig) -> Vec<(bool, Option<usize>)> {
    let mut sent: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(answers.len());
    for (i, a) in answers.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for &j in &sent {
            let s = similarity(a, &answers[j], cfg);
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, j));
            }
        }
        let dup = best.is_some_and(|(s, _)| s > cfg.theta);
        if !dup {
            sent.push(i);
        }
        out.push((dup, best.map(|(_, j)| j)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CardStatus, MessageId, SessionId};

    fn unit(v: &[f32]) -> Embedding {
        Embedding::normalized(v).unwrap()
    }

    fn card(id: &str, e: Embedding, status: CardStatus) -> AnswerCard {
        AnswerCard {
            id: CardId::from(id),
            session_id: SessionId::from("s"),
            trigger_message_id: MessageId::from("m"),
            rewritten_question: String::new(),
            answer_text: String::new(),
            citations: vec![],
            embedding: e,
            status,
            sent_seq: None,
            duplicate_of: None,
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_examples() {
        let v = unit(&[0.3, 0.4, 0.5]);
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(cosine(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])).unwrap(), 0.0);
        // hand computation: 1/sqrt(2)
        let s = cosine(&unit(&[1.0, 1.0, 0.0, 0.0]), &unit(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((s - 0.7071).abs() < 1e-4);
        assert!(matches!(cosine(&unit(&[1.0]), &unit(&[1.0, 0.0])), Err(DomainError::DimensionMismatch { .. })));
    }

    #[test]
    fn first_answer_never_duplicate() {
        let r = check_duplicate(&unit(&[1.0, 0.0]), &[], &DedupConfig::with_theta(0.0).unwrap());
        assert!(!r.is_duplicate);
        assert!(r.nearest_card_id.is_none());
    }

    #[test]
    fn theta_one_never_suppresses() {
        let e = unit(&[1.0, 2.0]);
        let r = check_duplicate(&e, &[card("c1", e.clone(), CardStatus::Sent)], &DedupConfig::with_theta(1.0).unwrap());
        assert!(r.max_similarity >= 1.0 - 1e-6);
        assert!(!r.is_duplicate);
    }

    #[test]
    fn theta_zero_suppresses_positive_similarity() {
        // cos = 0.3
        let a = unit(&[0.3, (1.0f32 - 0.09).sqrt()]);
        let b = unit(&[1.0, 0.0]);
        let r = check_duplicate(&a, &[card("c1", b, CardStatus::Sent)], &DedupConfig::with_theta(0.0).unwrap());
        assert!((r.max_similarity - 0.3).abs() < 1e-6);
        assert!(r.is_duplicate);
    }

    #[test]
    fn suppressed_and_negative_ignored() {
        let a = unit(&[1.0, 0.0]);
        let hist = [card("c1", a.clone(), CardStatus::Suppressed), card("c2", unit(&[-1.0, 0.1]), CardStatus::Accepted)];
        let r = check_duplicate(&a, &hist, &DedupConfig::with_theta(0.0).unwrap());
        assert_eq!(r.nearest_card_id, Some(CardId::from("c2")));
        assert_eq!(r.max_similarity, 0.0);
        assert!(!r.is_duplicate);
    }

    /// Sent-only comparison is not nested in general: an answer suppressed at
    /// a low theta can no longer suppress a later one, which a higher theta
    /// then does suppress.
    #[test]
    fn nesting_can_fail_without_cluster_structure() {
        let a = unit(&[1.0, 0.0]);
        let b = unit(&[0.8, 0.6]); // sim(a, b) = 0.8
        let c = unit(&[0.5, 0.86]); // sim(a, c) ~ 0.503, sim(b, c) ~ 0.921
        let answers = [a, b, c];
        let low = simulate_session(&answers, &DedupConfig::with_theta(0.6).unwrap());
        let high = simulate_session(&answers, &DedupConfig::with_theta(0.82).unwrap());
        assert_eq!(low.iter().map(|x| x.0).collect::<Vec<_>>(), vec![false, true, false]);
        assert_eq!(high.iter().map(|x| x.0).collect::<Vec<_>>(), vec![false, false, true]);
    }
}
