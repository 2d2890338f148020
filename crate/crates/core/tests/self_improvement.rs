use std::collections::BTreeMap;
use std::sync::Arc;

use oncall_core::domain::{AuthorRole, CardId, EntryStatus, Message, SessionId};
use oncall_core::engine::{Effect, Engine, EngineConfig, SessionEvent};
use oncall_core::gateway::{Conditions, Failure, Gateway, ScriptRule, ScriptRules};
use oncall_core::kb::{KnowledgeStore, MutationCause, MutationOp, StoreConfig};
use serde_json::json;

const DIM: usize = 256;
const QUESTION: &str = "Why did the evacuation fail for my instance?";

fn analyst_says(needle: &str) -> Conditions {
    Conditions { role_contains: BTreeMap::from([("analyst".into(), vec![needle.into()])]), ..Default::default() }
}

fn rules() -> ScriptRules {
    ScriptRules {
        rules: vec![
            ScriptRule::new("extraction", analyst_says("workaround"), json!({"found": true, "answer": "{{role:analyst}}"})),
            ScriptRule::new("review", analyst_says("obsolete"), json!({"action": "Delete", "references": [1]})),
        ],
        defaults: BTreeMap::new(),
    }
    .merged_with(ScriptRules::builtin())
}

fn engine(gw: Gateway, store: Arc<KnowledgeStore>) -> Engine {
    Engine::new(gw, store, EngineConfig::default()).unwrap()
}

fn run_session(e: &Engine, sid: &str, turns: &[(AuthorRole, &str)]) -> Vec<Effect> {
    let sid = SessionId::from(sid);
    e.submit(SessionEvent::SessionOpened { session_id: sid.clone() }).unwrap();
    let mut effects = Vec::new();
    for (i, (role, text)) in turns.iter().enumerate() {
        let msg = Message::new(format!("m{i}"), sid.clone(), *role, *text);
        effects.extend(e.submit(SessionEvent::MessagePosted { message: msg }).unwrap().effects);
    }
    effects.extend(e.submit(SessionEvent::SessionClosed { session_id: sid }).unwrap().effects);
    effects
}

#[test]
fn extracted_entry_is_answerable_then_correctable() {
    let gw = Gateway::scripted(rules(), DIM);
    let store = Arc::new(KnowledgeStore::in_memory(DIM, StoreConfig::default()));
    let e = engine(gw, store.clone());

    let a = run_session(
        &e,
        "a",
        &[
            (AuthorRole::Analyst, "Hello, looking at it."),
            (AuthorRole::Customer, QUESTION),
            (AuthorRole::Analyst, "Known issue. The workaround is to stop the instance and migrate it to a reserved host."),
        ],
    );
    assert!(a.iter().any(|x| matches!(x, Effect::Refused { .. })));
    let snap = store.view();
    let (id, entry) = snap.entries.iter().next().expect("extraction stored an entry");
    assert_eq!(entry.status, EntryStatus::Provisional);
    assert!(entry.content.contains("reserved host"));
    let id = *id;

    let b = run_session(
        &e,
        "b",
        &[
            (AuthorRole::Analyst, "Hi there."),
            (AuthorRole::Customer, QUESTION),
            (AuthorRole::Analyst, "That migration advice is obsolete now; the platform evacuates automatically."),
        ],
    );
    let card = b.iter().find_map(|x| if let Effect::Card { card } = x { Some(card) } else { None }).expect("card in b");
    assert!(card.answer_text.contains("reserved host"));
    assert_eq!(card.citations[0].entry_id, id);
    assert!(store.view().get(id).is_none(), "review deleted the provisional entry");
    let history = store.history(id);
    assert_eq!(history.last().unwrap().op, MutationOp::Delete);
    assert!(matches!(history.last().unwrap().cause, MutationCause::ReviewDecision { .. }));
}

#[test]
fn accepted_card_is_stored_immediately_for_other_sessions() {
    let gw = Gateway::scripted(rules(), DIM);
    let store = Arc::new(KnowledgeStore::in_memory(DIM, StoreConfig::default()));
    store
        .insert_qa(
            &gw,
            QUESTION,
            "Use a reserved host.",
            oncall_core::domain::Provenance::ManualSeed,
            EntryStatus::Provisional,
            MutationCause::ManualSeed,
            None,
        )
        .unwrap();
    let e = engine(gw, store.clone());
    let sid = SessionId::from("x");
    e.submit(SessionEvent::SessionOpened { session_id: sid.clone() }).unwrap();
    e.submit(SessionEvent::MessagePosted { message: Message::new("m1", sid.clone(), AuthorRole::Analyst, "hi") }).unwrap();
    e.submit(SessionEvent::MessagePosted { message: Message::new("m2", sid.clone(), AuthorRole::Customer, QUESTION) }).unwrap();
    let before = store.version();
    e.submit(SessionEvent::CardAccepted { card_id: CardId::from("x-c1") }).unwrap();
    let snap = store.view();
    assert_eq!(snap.len(), 2);
    assert!(snap.entries.values().all(|e| e.status == EntryStatus::Validated));
    assert!(store.records_since(before).iter().all(|r| matches!(r.cause, MutationCause::AcceptedCard { .. })));
}

#[test]
fn gateway_outage_never_mutates() {
    let down = ScriptRules {
        rules: vec![
            ScriptRule { fail: Some(Failure::Unavailable), ..ScriptRule::new("review", Conditions::default(), json!(null)) },
            ScriptRule { fail: Some(Failure::Malformed), ..ScriptRule::new("extraction", Conditions::default(), json!(null)) },
        ],
        defaults: BTreeMap::new(),
    }
    .merged_with(rules());
    let gw = Gateway::scripted(down, DIM);
    let store = Arc::new(KnowledgeStore::in_memory(DIM, StoreConfig::default()));
    store
        .insert_qa(
            &gw,
            QUESTION,
            "Use a reserved host.",
            oncall_core::domain::Provenance::ManualSeed,
            EntryStatus::Provisional,
            MutationCause::ManualSeed,
            None,
        )
        .unwrap();
    let e = engine(gw, store.clone());
    let v = store.version();
    run_session(
        &e,
        "y",
        &[
            (AuthorRole::Analyst, "hi"),
            (AuthorRole::Customer, QUESTION),
            (AuthorRole::Analyst, "that is obsolete"),
            (AuthorRole::Customer, "Why can't I resize the volume?"),
            (AuthorRole::Analyst, "workaround: detach it first"),
        ],
    );
    assert_eq!(store.version(), v);
}
