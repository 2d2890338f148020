//! Versioned system prompts, compiled into the binary.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptId {
    Identify,
    AlreadyAnswered,
    Rewrite,
    Generate,
    Review,
    Extract,
    Judge,
}

impl PromptId {
    pub const ALL: [PromptId; 7] =
        [Self::Identify, Self::AlreadyAnswered, Self::Rewrite, Self::Generate, Self::Review, Self::Extract, Self::Judge];

    /// Resource name, e.g. `identify.v1`.
    pub fn resource(self) -> &'static str {
        match self {
            Self::Identify => "identify.v1",
            Self::AlreadyAnswered => "already_answered.v1",
            Self::Rewrite => "rewrite.v1",
            Self::Generate => "generate.v1",
            Self::Review => "review.v1",
            Self::Extract => "extract.v1",
            Self::Judge => "judge.v1",
        }
    }

    fn template(self) -> &'static str {
        match self {
            Self::Identify => include_str!("../prompts/identify.v1.txt"),
            Self::AlreadyAnswered => include_str!("../prompts/already_answered.v1.txt"),
            Self::Rewrite => include_str!("../prompts/rewrite.v1.txt"),
            Self::Generate => include_str!("../prompts/generate.v1.txt"),
            Self::Review => include_str!("../prompts/review.v1.txt"),
            Self::Extract => include_str!("../prompts/extract.v1.txt"),
            Self::Judge => include_str!("../prompts/judge.v1.txt"),
        }
    }
}

pub const DEFAULT_PLATFORM: &str = "Volcano Engine";

/// Prompt texts with the platform name substituted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSet {
    pub platform: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self { platform: DEFAULT_PLATFORM.into() }
    }
}

impl PromptSet {
    pub fn render(&self, id: PromptId) -> String {
        id.template().replace("{{platform}}", &self.platform)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identify_prompt_names_the_three_labels() {
        let text = PromptSet::default().render(PromptId::Identify);
        assert!(text.starts_with("# Role\nYou are an intelligent on-call analysis expert of Volcano Engine.\n"));
        for label in ["\"Within Scope\"", "\"Out of Scope\"", "\"No assistance needed\""] {
            assert!(text.contains(label), "{label}");
        }
        assert!(!text.contains("{{"));
    }

    #[test]
    fn generate_prompt_carries_reference_rules() {
        let text = PromptSet::default().render(PromptId::Generate);
        for needle in [
            "* The target object is consistent.",
            "* The issue phenomenon is consistent.",
            "* The pre-conditions are consistent.",
            "Do not ask the user for additional information.",
            "reply with \"Unable to answer\" only",
            "<doc_1><doc_2><doc_n>",
        ] {
            assert!(text.contains(needle), "{needle}");
        }
    }

    #[test]
    fn review_prompt_has_three_actions() {
        let text = PromptSet::default().render(PromptId::Review);
        for needle in ["1. Keep:", "2. Delete:", "3. Update:"] {
            assert!(text.contains(needle));
        }
    }

    #[test]
    fn platform_is_substituted_everywhere() {
        let set = PromptSet { platform: "Acme Cloud".into() };
        for id in PromptId::ALL {
            let text = set.render(id);
            assert!(!text.contains("{{platform}}"), "{}", id.resource());
            assert!(!text.contains("Volcano"), "{}", id.resource());
        }
    }
}
