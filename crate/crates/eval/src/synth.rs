//! Seeded synthetic scenarios for the scripted backend.
//!
//! [`dedup_scenario`] builds sessions around one topic family each: a
//! question, its near-duplicate sibling and rephrased repeats of both. Every
//! answer in a session is one of at most two texts, so answer similarities
//! within a session are ultrametric and suppression sets nest across theta.
//!
//! [`ablation_scenario`] builds rounds of sessions over topics whose seed
//! knowledge is correct, missing or outdated, so each self-improvement path
//! has something to fix.

use std::collections::BTreeMap;

use oncall_core::domain::{AuthorRole, MessageId, ScopeClass};
use oncall_core::gateway::{Conditions, ScriptRule, ScriptRules};
use oncall_core::kb::SeedEntry;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::corpus::{CorpusSession, LabeledCorpus, MessageLine};
use crate::scenario::Scenario;

struct Sibling {
    question: &'static str,
    answer: &'static str,
    rephrasings: [&'static str; 2],
}

struct Family {
    name: &'static str,
    siblings: [Sibling; 2],
}

const FAMILIES: &[Family] = &[
    Family {
        name: "lifecycle",
        siblings: [
            Sibling {
                question: "How do I add a lifecycle rule to my storage bucket?",
                answer: "Open the bucket, choose Lifecycle, then add a rule with a prefix and an expiry in days.",
                rephrasings: ["Where can I add a lifecycle rule on a storage bucket?", "Can I add a bucket lifecycle rule?"],
            },
            Sibling {
                question: "How do I remove a lifecycle rule from my storage bucket?",
                answer: "Open the bucket, choose Lifecycle, then remove the rule whose prefix you no longer need.",
                rephrasings: ["Where can I remove a lifecycle rule on a storage bucket?", "Can I remove a bucket lifecycle rule?"],
            },
        ],
    },
    Family {
        name: "versioning",
        siblings: [
            Sibling {
                question: "How do I enable object versioning for a bucket?",
                answer: "In bucket settings set object versioning to Enabled; older versions are kept from then on.",
                rephrasings: ["Where do I enable object versioning?", "Is there a way to enable object versioning on this bucket?"],
            },
            Sibling {
                question: "How do I suspend object versioning for a bucket?",
                answer: "In bucket settings set object versioning to Suspended; existing older versions are kept.",
                rephrasings: ["Where do I suspend object versioning?", "Is there a way to suspend object versioning on this bucket?"],
            },
        ],
    },
    Family {
        name: "snapshot",
        siblings: [
            Sibling {
                question: "How do I create a snapshot of a cloud disk?",
                answer: "On the disk page click Create Snapshot; the snapshot is crash-consistent and ready in minutes.",
                rephrasings: ["Can I create a cloud disk snapshot?", "What is the way to create a snapshot of my cloud disk?"],
            },
            Sibling {
                question: "How do I restore a cloud disk from a snapshot?",
                answer: "Stop the instance, then on the snapshot page click Roll Back Disk and start the instance again.",
                rephrasings: ["Can I restore my cloud disk from a snapshot?", "What is the way to restore a cloud disk from its snapshot?"],
            },
        ],
    },
    Family {
        name: "certificate",
        siblings: [
            Sibling {
                question: "How do I upload a TLS certificate to the load balancer?",
                answer: "In Certificates, upload the PEM chain and private key, then bind the certificate to the HTTPS listener.",
                rephrasings: [
                    "Where do I upload a TLS certificate for the load balancer?",
                    "Can I upload my own TLS certificate to a load balancer?",
                ],
            },
            Sibling {
                question: "How do I renew the TLS certificate on the load balancer?",
                answer: "In Certificates, upload the renewed PEM chain and key, then swap it onto the HTTPS listener.",
                rephrasings: [
                    "Where do I renew a TLS certificate for the load balancer?",
                    "Can I renew the TLS certificate of a load balancer?",
                ],
            },
        ],
    },
    Family {
        name: "quota",
        siblings: [
            Sibling {
                question: "How do I raise my vCPU quota in a region?",
                answer: "Open Quota Center, pick the region and request a higher vCPU limit; approval takes one business day.",
                rephrasings: ["Is it possible to raise the vCPU quota for a region?", "Where can I raise a regional vCPU quota?"],
            },
            Sibling {
                question: "How do I check current vCPU quota usage in a region?",
                answer: "Open Quota Center, pick the region and read the vCPU usage bar against the limit.",
                rephrasings: ["Is it possible to check vCPU quota usage for a region?", "Where can I check regional vCPU quota usage?"],
            },
        ],
    },
    Family {
        name: "dns",
        siblings: [
            Sibling {
                question: "How do I add a CNAME record to my DNS zone?",
                answer: "In the DNS zone click Add Record, choose CNAME, enter the host and target, and save.",
                rephrasings: ["Where do I add a CNAME record in the DNS zone?", "Can I add a CNAME record to a zone?"],
            },
            Sibling {
                question: "How do I delete a CNAME record from my DNS zone?",
                answer: "In the DNS zone find the CNAME record, choose Delete, and confirm the removal.",
                rephrasings: ["Where do I delete a CNAME record in the DNS zone?", "Can I delete a CNAME record from a zone?"],
            },
        ],
    },
    Family {
        name: "database",
        siblings: [
            Sibling {
                question: "How do I reset the admin password of a managed database?",
                answer: "On the database instance page choose Accounts, select admin and click Reset Password.",
                rephrasings: [
                    "Can I reset the managed database admin password?",
                    "Where is the admin password reset for a managed database?",
                ],
            },
            Sibling {
                question: "How do I unlock the admin account of a managed database?",
                answer: "On the database instance page choose Accounts, select admin and click Unlock Account.",
                rephrasings: [
                    "Can I unlock the managed database admin account?",
                    "Where is the admin account unlock for a managed database?",
                ],
            },
        ],
    },
    Family {
        name: "nodepool",
        siblings: [
            Sibling {
                question: "How do I scale out a Kubernetes node pool?",
                answer: "Edit the node pool, raise the desired node count, and the cluster adds nodes within minutes.",
                rephrasings: ["Can I scale out my Kubernetes node pool?", "Is there a way to scale out a node pool in Kubernetes?"],
            },
            Sibling {
                question: "How do I upgrade a Kubernetes node pool?",
                answer: "Edit the node pool, pick the target Kubernetes version, and nodes are drained and upgraded in batches.",
                rephrasings: ["Can I upgrade my Kubernetes node pool?", "Is there a way to upgrade a node pool in Kubernetes?"],
            },
        ],
    },
];

const GREETINGS: &[&str] =
    &["Hi, I'm taking a look now.", "Hello, an engineer here, checking your case.", "Good morning, reviewing the details."];
const ANALYST_FILLER: &[&str] =
    &["Let me check the console on our side.", "One moment while I look at the logs.", "I see the same on our end."];
const PHATIC: &[&str] = &["thanks, that helps", "ok got it", "thank you!"];
const OFF_SCOPE: &[&str] = &["Should our team switch to a competitor for storage?", "Is it worth buying the premium plan next year?"];

/// Seed knowledge for [`dedup_scenario`]: one validated entry per sibling.
fn family_seed() -> Vec<SeedEntry> {
    FAMILIES
        .iter()
        .flat_map(|f| f.siblings.iter())
        .map(|s| SeedEntry { question: s.question.into(), content: s.answer.into(), url: None, status: None })
        .collect()
}

struct SessionBuilder {
    session: CorpusSession,
    next: usize,
}

impl SessionBuilder {
    fn new(id: String) -> Self {
        Self { session: CorpusSession::new(&id), next: 1 }
    }

    fn post(&mut self, author: AuthorRole, text: &str) -> MessageId {
        let id = format!("m{}", self.next);
        self.next += 1;
        self.session.messages.push(MessageLine::new(&id, author, text));
        MessageId::new(id)
    }

    fn customer(&mut self, text: &str, scope: ScopeClass) -> MessageId {
        let id = self.post(AuthorRole::Customer, text);
        self.session.labels.scope.insert(id.clone(), scope);
        id
    }
}

/// `sessions` seeded sessions, each around one topic family.
pub fn dedup_scenario(seed: u64, sessions: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = LabeledCorpus::default();
    for n in 0..sessions {
        let family = FAMILIES.choose(&mut rng).expect("families");
        let mut b = SessionBuilder::new(format!("{}-{n:03}", family.name));
        // asks: (sibling, phrasing index; 0 is the canonical question)
        let mut asks: Vec<(usize, usize)> = Vec::new();
        let with_sibling = rng.random_bool(0.6);
        for sib in 0..if with_sibling { 2 } else { 1 } {
            let count = rng.random_range(1..=3);
            for _ in 0..count {
                asks.push((sib, rng.random_range(0..3)));
            }
        }
        asks.shuffle(&mut rng);
        if rng.random_bool(0.3) {
            b.post(AuthorRole::Customer, "Our console shows odd behaviour since this morning.");
        }
        b.post(AuthorRole::Analyst, GREETINGS.choose(&mut rng).expect("greetings"));
        let mut asked = [false; 2];
        for (sib, phrasing) in asks {
            let s = &family.siblings[sib];
            let text = if phrasing == 0 { s.question } else { s.rephrasings[phrasing - 1] };
            let id = b.customer(text, ScopeClass::WithinScope);
            b.session.labels.answer_expected.insert(id, !asked[sib]);
            asked[sib] = true;
            if rng.random_bool(0.4) {
                b.post(AuthorRole::Analyst, ANALYST_FILLER.choose(&mut rng).expect("filler"));
            }
            if rng.random_bool(0.25) {
                b.customer(PHATIC.choose(&mut rng).expect("phatic"), ScopeClass::NoAssistanceNeeded);
            }
            if rng.random_bool(0.1) {
                b.customer(OFF_SCOPE.choose(&mut rng).expect("off scope"), ScopeClass::OutOfScope);
            }
        }
        corpus.sessions.push(b.session);
    }
    Scenario { corpus, seed: family_seed(), rules: ScriptRules::default(), documents: BTreeMap::new() }
}

/// How a topic's seed knowledge stands before the replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopicKind {
    /// Seeded with the right answer.
    Correct,
    /// Not seeded; learnable from the analyst's resolution.
    Missing,
    /// Seeded with an outdated answer the analyst corrects.
    Outdated,
}

pub struct Topic {
    pub key: &'static str,
    pub kind: TopicKind,
    pub question: &'static str,
    /// Current, correct resolution; always contains `key`.
    pub fix: &'static str,
    pub outdated: Option<&'static str>,
}

pub const ABLATION_TOPICS: &[Topic] = &[
    Topic {
        key: "hugepages",
        kind: TopicKind::Correct,
        question: "Why does my kernel refuse to allocate hugepages on the large instance?",
        fix: "Reserve hugepages at boot with the hugepages kernel parameter and reboot the instance.",
        outdated: None,
    },
    Topic {
        key: "presigned",
        kind: TopicKind::Correct,
        question: "Why does my presigned download link expire early?",
        fix: "The presigned link lifetime is capped by the signing credential; sign with a long-lived key for presigned links.",
        outdated: None,
    },
    Topic {
        key: "peering",
        kind: TopicKind::Missing,
        question: "Why can't traffic cross the new VPC peering connection?",
        fix: "Add routes for the peer CIDR in both route tables; peering does not propagate routes automatically.",
        outdated: None,
    },
    Topic {
        key: "ipv6",
        kind: TopicKind::Missing,
        question: "Why is no IPv6 address shown for my elastic IP?",
        fix: "Enable dual stack on the subnet first, then assign an IPv6 address to the network interface.",
        outdated: None,
    },
    Topic {
        key: "cron",
        kind: TopicKind::Missing,
        question: "Why are scheduled function triggers firing twice?",
        fix: "Scheduled triggers are at-least-once; make the function idempotent with a cron execution key.",
        outdated: None,
    },
    Topic {
        key: "kms",
        kind: TopicKind::Outdated,
        question: "Why do decrypt calls fail after rotating the encryption key?",
        fix: "After rotation call decrypt with the key alias, not the old version id; kms resolves the alias itself.",
        outdated: Some("Re-encrypt every object manually with the new key material before decrypting."),
    },
    Topic {
        key: "autoscaling",
        kind: TopicKind::Outdated,
        question: "Why does the scaling group ignore my target CPU policy?",
        fix: "Target tracking needs the detailed monitoring metric; enable it or autoscaling falls back to step rules.",
        outdated: Some("Delete the scaling group and recreate it with a step policy."),
    },
    Topic {
        key: "replica",
        kind: TopicKind::Outdated,
        question: "Why is the read replica lagging behind the primary database?",
        fix: "Lag comes from the single apply thread; raise parallel replica workers in the parameter group.",
        outdated: Some("Lag of this kind is expected; rebuild the standby copy from a fresh snapshot each week."),
    },
];

fn analyst_says(needle: &str) -> Conditions {
    Conditions { role_contains: BTreeMap::from([("analyst".to_string(), vec![needle.to_string()])]), ..Default::default() }
}

fn ablation_rules() -> ScriptRules {
    let mut rules = vec![
        ScriptRule::new("extraction", analyst_says("resolved as follows"), json!({"found": true, "answer": "{{role:analyst}}"}))
            .named("extract-resolution"),
        ScriptRule::new(
            "review",
            analyst_says("no longer current"),
            json!({"action": "Update", "references": [1], "question": "{{section:Question (Q)}}", "answer": "{{role:analyst}}"}),
        )
        .named("update-outdated"),
    ];
    for t in ABLATION_TOPICS {
        let when = Conditions {
            section_contains: BTreeMap::from([
                ("User message".to_string(), vec![t.question.to_string()]),
                ("Answer".to_string(), vec![t.key.to_string()]),
            ]),
            ..Default::default()
        };
        rules.push(ScriptRule::new("judge", when, json!({"verdict": "Correct"})).named(&format!("judge-{}", t.key)));
    }
    ScriptRules { rules, defaults: BTreeMap::new() }
}

/// `rounds` rounds over [`ABLATION_TOPICS`]; topic order within a round is
/// shuffled by `seed`.
pub fn ablation_scenario(seed: u64, rounds: usize) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = LabeledCorpus::default();
    for round in 1..=rounds {
        let mut order: Vec<&Topic> = ABLATION_TOPICS.iter().collect();
        order.shuffle(&mut rng);
        for t in order {
            let mut b = SessionBuilder::new(format!("{}-r{round}", t.key));
            b.post(AuthorRole::Analyst, GREETINGS.choose(&mut rng).expect("greetings"));
            let q = b.customer(t.question, ScopeClass::WithinScope);
            match (t.kind, round) {
                (TopicKind::Correct, _) => {
                    b.session.labels.accept.push(q);
                    b.customer("thanks, that fixed it", ScopeClass::NoAssistanceNeeded);
                }
                (TopicKind::Missing, 1) => {
                    b.post(AuthorRole::Analyst, "Checked with the service team, this is resolved as follows.");
                    b.post(AuthorRole::Analyst, t.fix);
                }
                (TopicKind::Outdated, 1) => {
                    b.post(AuthorRole::Analyst, "That suggestion is no longer current.");
                    b.post(AuthorRole::Analyst, t.fix);
                }
                _ => {
                    b.post(AuthorRole::Analyst, ANALYST_FILLER.choose(&mut rng).expect("filler"));
                }
            }
            corpus.sessions.push(b.session);
        }
    }
    let seed_entries = ABLATION_TOPICS
        .iter()
        .filter_map(|t| {
            match t.kind {
                TopicKind::Correct => Some(t.fix),
                TopicKind::Outdated => t.outdated,
                TopicKind::Missing => None,
            }
            .map(|answer| (t.question, answer))
        })
        .map(|(q, a)| SeedEntry { question: q.into(), content: a.into(), url: None, status: None })
        .collect();
    Scenario { corpus, seed: seed_entries, rules: ablation_rules(), documents: BTreeMap::new() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn words(s: &str) -> HashSet<String> {
        s.split(|c: char| !c.is_alphanumeric()).filter(|w| w.len() >= 3).map(str::to_lowercase).collect()
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(dedup_scenario(3, 20).corpus, dedup_scenario(3, 20).corpus);
        assert_ne!(dedup_scenario(3, 20).corpus, dedup_scenario(4, 20).corpus);
        assert_eq!(ablation_scenario(1, 3).corpus, ablation_scenario(1, 3).corpus);
    }

    #[test]
    fn ablation_topics_do_not_share_vocabulary() {
        // the scripted generator only answers when half the question's
        // words are in the top reference
        for a in ABLATION_TOPICS {
            for b in ABLATION_TOPICS.iter().filter(|b| b.key != a.key) {
                let qa = words(a.question);
                let reference = words(&format!("Question: {} Answer: {} {}", b.question, b.fix, b.outdated.unwrap_or("")));
                let shared = qa.intersection(&reference).count() as f64;
                assert!(shared < 0.5 * qa.len() as f64, "{} vs {}", a.key, b.key);
            }
            assert!(a.fix.to_lowercase().contains(a.key));
            assert!(a.outdated.is_none_or(|o| !o.to_lowercase().contains(a.key)));
        }
    }

    #[test]
    fn dedup_sessions_carry_labels() {
        let s = dedup_scenario(9, 50);
        assert_eq!(s.corpus.sessions.len(), 50);
        for session in &s.corpus.sessions {
            let expected: Vec<bool> = session.labels.answer_expected.values().copied().collect();
            assert!(expected.iter().filter(|x| **x).count() <= 2);
            assert!(expected.iter().any(|x| *x));
        }
        let text = s.corpus.to_jsonl();
        assert_eq!(LabeledCorpus::parse(&text).unwrap(), s.corpus);
    }
}
