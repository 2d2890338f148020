//! Binary answer grading. Human labels win; the judge model covers the rest.

use oncall_core::answer::strip_markers;
use oncall_core::domain::{CardId, MessageId, SessionId};
use oncall_core::gateway::{FieldKind, Gateway, ResponseSchema, StructuredRequest, Turn};
use oncall_core::prompts::PromptId;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::corpus::{Correctness, LabeledCorpus};
use crate::replay::{CardPrediction, Predictions};

pub fn judge_schema() -> ResponseSchema {
    ResponseSchema::new("judge").required("verdict", FieldKind::Enum(vec!["Correct".into(), "Incorrect".into()]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Gold,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedCard {
    pub session_id: SessionId,
    pub card_id: CardId,
    pub trigger_message_id: MessageId,
    pub verdict: Correctness,
    pub source: VerdictSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeFailure {
    pub card_id: CardId,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub verdicts: Vec<JudgedCard>,
    pub failures: Vec<JudgeFailure>,
    pub correct: usize,
    pub judged: usize,
    /// Absent when nothing could be judged.
    pub accuracy: Option<f64>,
}

fn request(gateway: &Gateway, user_text: &str, attachments: &[String], card: &CardPrediction) -> StructuredRequest {
    let mut text = format!("# User message\n{user_text}\n");
    if !attachments.is_empty() {
        text.push_str(&format!("# Attachments\n{}\n", attachments.join("\n")));
    }
    text.push_str(&format!("# Answer\n{}", strip_markers(&card.answer_text)));
    let mut turn = Turn::instruction(text);
    turn.attachments = attachments.to_vec();
    StructuredRequest { system_prompt: gateway.prompt(PromptId::Judge), dialogue: vec![turn], response_schema: judge_schema() }
}

/// Grades every sent card. Judge failures leave the card out of the
/// accuracy denominator and are listed in the report.
pub fn judge_answers(preds: &Predictions, corpus: &LabeledCorpus, gateway: &Gateway) -> JudgeReport {
    let mut report = JudgeReport::default();
    for (sid, card) in preds.sent_cards() {
        let session = corpus.session(sid);
        let gold = session.and_then(|s| s.labels.card_correct.get(&card.trigger_message_id).copied());
        let (verdict, source) = match gold {
            Some(v) => (v, VerdictSource::Gold),
            None => {
                let trigger = session.and_then(|s| s.message(&card.trigger_message_id));
                let (text, attachments) =
                    trigger.map_or((card.rewritten_question.as_str(), &[][..]), |m| (m.text.as_str(), m.attachments.as_slice()));
                match gateway.complete_structured(&request(gateway, text, attachments, card)) {
                    Ok(v) => {
                        let verdict = if v["verdict"] == "Correct" { Correctness::Correct } else { Correctness::Incorrect };
                        (verdict, VerdictSource::Judge)
                    }
                    Err(e) => {
                        warn!(card = %card.card_id, error = %e, "judge failed");
                        report.failures.push(JudgeFailure { card_id: card.card_id.clone(), error: e.to_string() });
                        continue;
                    }
                }
            }
        };
        if verdict == Correctness::Correct {
            report.correct += 1;
        }
        report.judged += 1;
        report.verdicts.push(JudgedCard {
            session_id: sid.clone(),
            card_id: card.card_id.clone(),
            trigger_message_id: card.trigger_message_id.clone(),
            verdict,
            source,
        });
    }
    report.accuracy = (report.judged > 0).then(|| report.correct as f64 / report.judged as f64);
    report
}

impl JudgeReport {
    pub fn table(&self) -> String {
        let acc = self.accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.3}"));
        format!(
            "{:>6}  {:>7}  {:>8}  {:>8}\n{:>6}  {:>7}  {:>8}  {:>8}\n",
            "judged",
            "correct",
            "failures",
            "accuracy",
            self.judged,
            self.correct,
            self.failures.len(),
            acc
        )
    }
}
