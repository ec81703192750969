//! Question answering: guardrail, condensing, retrieval, prompt assembly,
//! streamed generation and citation extraction.

pub mod citations;
pub mod guardrail;
pub mod pipeline;
pub mod policy;
pub mod prompt;
pub mod provider;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;

pub use citations::{extract_citations, Citation, CitationReport};
pub use guardrail::{classify_topicality, GuardrailVerdict, Topicality};
pub use pipeline::{AnswerEnvelope, PipelineError, RagPipeline};
pub use policy::{PolicyError, PolicyPrompt};
pub use prompt::{assemble_prompt, condense_question, PromptPair, Turn};
pub use provider::{
    ChatProvider, CompletionRequest, DeltaStream, ExtractiveChatProvider, HttpChatProvider, LlmRoles,
    ProviderError, RoleConfig, ScriptedChatProvider,
};

/// Process-wide pipeline counters.
#[derive(Debug, Default)]
pub struct Metrics {
    pub queries: AtomicU64,
    pub guardrail_declines: AtomicU64,
    pub guardrail_failures: AtomicU64,
    pub embed_calls: AtomicU64,
    pub retrieval_calls: AtomicU64,
    pub generation_failures: AtomicU64,
    pub citation_violations: AtomicU64,
    pub redactions: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MetricsSnapshot {
    pub queries: u64,
    pub guardrail_declines: u64,
    pub guardrail_failures: u64,
    pub embed_calls: u64,
    pub retrieval_calls: u64,
    pub generation_failures: u64,
    pub citation_violations: u64,
    pub redactions: u64,
}

impl Metrics {
    pub(crate) fn bump(counter: &AtomicU64, by: u64) {
        counter.fetch_add(by, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        MetricsSnapshot {
            queries: get(&self.queries),
            guardrail_declines: get(&self.guardrail_declines),
            guardrail_failures: get(&self.guardrail_failures),
            embed_calls: get(&self.embed_calls),
            retrieval_calls: get(&self.retrieval_calls),
            generation_failures: get(&self.generation_failures),
            citation_violations: get(&self.citation_violations),
            redactions: get(&self.redactions),
        }
    }
}
