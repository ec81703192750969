//! Pre-retrieval topical guardrail.

use serde::{Deserialize, Serialize};

use super::policy::PolicyPrompt;
use super::provider::LlmRoles;

pub(crate) const CLASSIFIER_MARKER: &str = "You are a topic classifier";

pub const CATEGORY_ON_TOPIC: &str = "on-topic";
pub const CATEGORY_UNAVAILABLE: &str = "guardrail-unavailable";
pub const CATEGORY_UNPARSED: &str = "unparsed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topicality {
    OnTopic,
    OffTopic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardrailVerdict {
    pub decision: Topicality,
    pub category: String,
}

impl GuardrailVerdict {
    pub fn on_topic(category: &str) -> Self {
        Self {
            decision: Topicality::OnTopic,
            category: category.to_string(),
        }
    }

    pub fn is_off_topic(&self) -> bool {
        self.decision == Topicality::OffTopic
    }
}

pub fn classifier_prompt(policy: &PolicyPrompt) -> String {
    let mut out = format!(
        "{CLASSIFIER_MARKER} for a structural biology archive help desk. \
         Decide whether the user's message is something the help desk should answer.\n\nALLOWED topics:\n"
    );
    for topic in &policy.allowed_topics {
        out.push_str(&format!("- {topic}\n"));
    }
    out.push_str("\nDENIED categories (label: description):\n");
    for topic in &policy.denied_topics {
        out.push_str(&format!("- {}: {}\n", topic.label, topic.description));
    }
    out.push_str(
        "\nReply with exactly one line: `ON_TOPIC` if the message is allowed, \
         or `OFF_TOPIC: <label>` using one of the denied labels above. \
         When unsure, reply ON_TOPIC.",
    );
    out
}

/// Maps classifier output to a verdict. Unparseable output is on-topic.
pub fn parse_verdict(output: &str, policy: &PolicyPrompt) -> GuardrailVerdict {
    let line = output
        .lines()
        .map(|l| l.trim().trim_matches('`').trim())
        .find(|l| !l.is_empty())
        .unwrap_or("");
    let upper = line.to_ascii_uppercase().replace(['-', ' '], "_");
    if upper.starts_with("ON_TOPIC") {
        return GuardrailVerdict::on_topic(CATEGORY_ON_TOPIC);
    }
    if upper.starts_with("OFF_TOPIC") {
        let label = line
            .split_once(':')
            .map(|(_, l)| l.trim().to_ascii_lowercase())
            .unwrap_or_default();
        let fallback = policy
            .denied_topics
            .last()
            .map(|t| t.label.clone())
            .unwrap_or_else(|| "unrelated-spam".into());
        let category = policy
            .denied_topics
            .iter()
            .find(|t| t.label.eq_ignore_ascii_case(&label))
            .map(|t| t.label.clone())
            .unwrap_or(fallback);
        return GuardrailVerdict {
            decision: Topicality::OffTopic,
            category,
        };
    }
    GuardrailVerdict::on_topic(CATEGORY_UNPARSED)
}

/// One condense-role call; fails open.
pub async fn classify_topicality(message: &str, roles: &LlmRoles, policy: &PolicyPrompt) -> GuardrailVerdict {
    let req = roles.condense.request(classifier_prompt(policy), message.trim());
    match roles.condense.provider.complete(&req).await {
        Ok(output) => parse_verdict(&output, policy),
        Err(e) => {
            tracing::warn!(error = %e, "guardrail classifier failed, allowing message");
            GuardrailVerdict::on_topic(CATEGORY_UNAVAILABLE)
        }
    }
}
