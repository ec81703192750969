//! Follow-up condensing and context-in-system prompt assembly.

use serde::{Deserialize, Serialize};

use super::policy::PolicyPrompt;
use super::provider::LlmRoles;
use crate::vecstore::ScoredChunk;

pub(crate) const CONDENSE_MARKER: &str = "rephrase the follow-up question";
pub(crate) const CONTEXT_HEADER: &str = "CONTEXT:\n";

/// Turns of history handed to the condenser.
pub const HISTORY_TURNS: usize = 3;

/// One user message and the assistant reply to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub assistant: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

pub fn render_history(history: &[Turn]) -> String {
    let start = history.len().saturating_sub(HISTORY_TURNS);
    let mut out = String::new();
    for turn in &history[start..] {
        out.push_str(&format!("User: {}\nAssistant: {}\n", turn.user.trim(), turn.assistant.trim()));
    }
    out
}

/// Rewrites `followup` into a standalone question. No history means no
/// provider call; a failed or empty rewrite falls back to `followup`.
pub async fn condense_question(history: &[Turn], followup: &str, roles: &LlmRoles) -> String {
    if history.is_empty() {
        return followup.to_string();
    }
    let system = format!(
        "Given the conversation so far and a follow-up question, {CONDENSE_MARKER} \
         so that it can be understood without the conversation. Resolve pronouns and \
         references to earlier messages. Reply with the standalone question only."
    );
    let user = format!(
        "Chat history:\n{}\nFollow-up question: {}\n\nStandalone question:",
        render_history(history),
        followup.trim()
    );
    let req = roles.condense.request(system, user);
    match roles.condense.provider.complete(&req).await {
        Ok(out) if !out.trim().is_empty() => out.trim().to_string(),
        Ok(_) => followup.to_string(),
        Err(e) => {
            tracing::warn!(error = %e, "condense failed, using raw follow-up");
            followup.to_string()
        }
    }
}

/// Policy blocks plus retrieved chunks go in the system text; the user text
/// is the bare question.
pub fn assemble_prompt(policy: &PolicyPrompt, retrieved: &[ScoredChunk], question: &str) -> PromptPair {
    let mut system = policy.render();
    system.push('\n');
    system.push_str(CONTEXT_HEADER);
    if retrieved.is_empty() {
        system.push_str(
            "No relevant documentation was found for this question. \
             Reply with the OUT-OF-SCOPE WORDING above and nothing else.\n",
        );
    } else {
        for (i, c) in retrieved.iter().enumerate() {
            if i > 0 {
                system.push_str("\n\n");
            }
            system.push_str(&format!("[Source: {}]\n{}", c.chunk.source_title, c.chunk.text));
        }
        system.push('\n');
    }
    PromptPair {
        system,
        user: question.to_string(),
    }
}
