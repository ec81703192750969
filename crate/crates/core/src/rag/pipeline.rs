//! The composed question → answer pipeline.

use std::sync::Arc;

use futures::StreamExt;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::citations::{extract_citations, Citation};
use super::guardrail::{classify_topicality, GuardrailVerdict, CATEGORY_UNAVAILABLE};
use super::policy::PolicyPrompt;
use super::prompt::{assemble_prompt, condense_question, Turn};
use super::provider::{LlmRoles, ProviderError};
use super::Metrics;
use crate::embed::{embed_query, EmbedError, EmbeddingProvider};
use crate::vecstore::{RetrievalConfig, Retriever, ScoredChunk, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerEnvelope {
    pub final_text: String,
    pub citations: Vec<Citation>,
    pub retrieved: Vec<ScoredChunk>,
    pub condensed_question: String,
    pub guardrail: GuardrailVerdict,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    /// Retrieval could not run; `user_text` is the service-degraded wording.
    #[error("retrieval unavailable: {reason}")]
    Degraded { reason: String, user_text: String },
    /// The answering model failed; `partial` holds what was streamed.
    #[error("generation failed: {reason}")]
    Generation {
        reason: String,
        partial: String,
        user_text: String,
    },
    /// The progress sink asked to stop (client went away).
    #[error("answer cancelled")]
    Cancelled { partial: String },
}

impl PipelineError {
    pub fn partial(&self) -> &str {
        match self {
            PipelineError::Degraded { .. } => "",
            PipelineError::Generation { partial, .. } | PipelineError::Cancelled { partial } => partial,
        }
    }

    /// Text shown to the user in place of an answer.
    pub fn user_text(&self) -> Option<&str> {
        match self {
            PipelineError::Degraded { user_text, .. } | PipelineError::Generation { user_text, .. } => Some(user_text),
            PipelineError::Cancelled { .. } => None,
        }
    }
}

/// Receives the accumulated answer text after each delta; returning
/// `false` cancels generation.
pub type Progress<'a> = &'a mut (dyn FnMut(&str) -> bool + Send);

pub struct RagPipeline {
    roles: LlmRoles,
    policy: RwLock<Arc<PolicyPrompt>>,
    embedder: Arc<dyn EmbeddingProvider>,
    retriever: Arc<dyn Retriever>,
    retrieval: RetrievalConfig,
    metrics: Arc<Metrics>,
}

impl RagPipeline {
    pub fn new(
        roles: LlmRoles,
        policy: PolicyPrompt,
        embedder: Arc<dyn EmbeddingProvider>,
        retriever: Arc<dyn Retriever>,
    ) -> Self {
        Self {
            roles,
            policy: RwLock::new(Arc::new(policy)),
            embedder,
            retriever,
            retrieval: RetrievalConfig::default(),
            metrics: Arc::new(Metrics::default()),
        }
    }

    pub fn with_retrieval(mut self, cfg: RetrievalConfig) -> Self {
        self.retrieval = cfg;
        self
    }

    pub fn with_metrics(mut self, metrics: Arc<Metrics>) -> Self {
        self.metrics = metrics;
        self
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        self.retrieval
    }

    pub fn roles(&self) -> &LlmRoles {
        &self.roles
    }

    pub fn policy(&self) -> Arc<PolicyPrompt> {
        self.policy.read().clone()
    }

    /// Swaps the policy for subsequent requests; in-flight requests keep theirs.
    pub fn set_policy(&self, policy: PolicyPrompt) {
        *self.policy.write() = Arc::new(policy);
    }

    /// Runs guardrail → condense → embed → retrieve → assemble → generate →
    /// screen → cite for one message.
    pub async fn answer_query(
        &self,
        history: &[Turn],
        message: &str,
        progress: Progress<'_>,
    ) -> Result<AnswerEnvelope, PipelineError> {
        let policy = self.policy();
        Metrics::bump(&self.metrics.queries, 1);

        let guardrail = classify_topicality(message, &self.roles, &policy).await;
        if guardrail.category == CATEGORY_UNAVAILABLE {
            Metrics::bump(&self.metrics.guardrail_failures, 1);
        }
        if guardrail.is_off_topic() {
            Metrics::bump(&self.metrics.guardrail_declines, 1);
            progress(&policy.off_topic_text);
            return Ok(AnswerEnvelope {
                final_text: policy.off_topic_text.clone(),
                citations: Vec::new(),
                retrieved: Vec::new(),
                condensed_question: message.to_string(),
                guardrail,
            });
        }

        let question = condense_question(history, message, &self.roles).await;

        Metrics::bump(&self.metrics.embed_calls, 1);
        let query = embed_query(self.embedder.as_ref(), &question)
            .await
            .map_err(|e| self.degraded(&policy, embed_reason(&e)))?;

        Metrics::bump(&self.metrics.retrieval_calls, 1);
        let retrieval = self
            .retriever
            .retrieve(self.embedder.model_id(), &query, &self.retrieval)
            .map_err(|e| self.degraded(&policy, store_reason(&e)))?;
        let retrieved = retrieval.results;

        if retrieved.is_empty() {
            progress(&policy.refusal_text);
            return Ok(AnswerEnvelope {
                final_text: policy.refusal_text.clone(),
                citations: Vec::new(),
                retrieved,
                condensed_question: question,
                guardrail,
            });
        }

        let pair = assemble_prompt(&policy, &retrieved, &question);
        let raw = self.generate(&pair.system, &pair.user, &policy, progress).await?;

        let (final_text, redactions) = policy.screen(&raw);
        Metrics::bump(&self.metrics.redactions, redactions as u64);
        let report = extract_citations(&final_text, &retrieved);
        Metrics::bump(&self.metrics.citation_violations, report.dropped.len() as u64);
        if !report.dropped.is_empty() {
            tracing::warn!(titles = ?report.dropped, "answer cited documents that were not retrieved");
        }

        Ok(AnswerEnvelope {
            final_text,
            citations: report.citations,
            retrieved,
            condensed_question: question,
            guardrail,
        })
    }

    async fn generate(
        &self,
        system: &str,
        user: &str,
        policy: &PolicyPrompt,
        progress: Progress<'_>,
    ) -> Result<String, PipelineError> {
        let role = &self.roles.qa;
        let req = role.request(system, user);
        let fail = |reason: ProviderError, partial: String| {
            Metrics::bump(&self.metrics.generation_failures, 1);
            PipelineError::Generation {
                reason: reason.to_string(),
                partial,
                user_text: policy.failure_text.clone(),
            }
        };
        if !role.streaming {
            let text = role.provider.complete(&req).await.map_err(|e| fail(e, String::new()))?;
            if !progress(&text) {
                return Err(PipelineError::Cancelled { partial: text });
            }
            return Ok(text);
        }
        let mut stream = role.provider.stream(&req).await.map_err(|e| fail(e, String::new()))?;
        let mut text = String::new();
        let mut deltas = 0u32;
        while let Some(item) = stream.next().await {
            match item {
                Ok(delta) => {
                    if delta.is_empty() {
                        continue;
                    }
                    deltas += 1;
                    if deltas > role.max_tokens {
                        break;
                    }
                    text.push_str(&delta);
                    if !progress(&text) {
                        return Err(PipelineError::Cancelled { partial: text });
                    }
                }
                Err(e) => return Err(fail(e, text)),
            }
        }
        Ok(text)
    }

    fn degraded(&self, policy: &PolicyPrompt, reason: String) -> PipelineError {
        tracing::warn!(%reason, "retrieval unavailable");
        PipelineError::Degraded {
            reason,
            user_text: policy.degraded_text.clone(),
        }
    }
}

fn embed_reason(e: &EmbedError) -> String {
    format!("query embedding failed: {e}")
}

fn store_reason(e: &StoreError) -> String {
    e.to_string()
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::chunker::ChunkRecord;
    use crate::embed::HashingEmbedder;
    use crate::rag::provider::ScriptedChatProvider;
    use crate::vecstore::Retrieval;

    struct CountingRetriever {
        calls: AtomicUsize,
        results: Result<Vec<ScoredChunk>, StoreError>,
    }

    impl Retriever for CountingRetriever {
        fn retrieve(&self, model_id: &str, _q: &[f32], cfg: &RetrievalConfig) -> Result<Retrieval, StoreError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            assert_eq!(*cfg, RetrievalConfig::default());
            self.results.clone().map(|results| Retrieval {
                generation_id: 1,
                model_id: model_id.into(),
                results,
            })
        }
    }

    fn scored(doc: &str, title: &str, text: &str) -> ScoredChunk {
        ScoredChunk {
            chunk: ChunkRecord {
                chunk_id: format!("{doc}#0"),
                doc_id: doc.into(),
                seq: 0,
                text: text.into(),
                char_count: text.chars().count(),
                section_path: vec![],
                source_title: title.into(),
            },
            similarity: 0.9,
            vector: Arc::from(vec![1.0f32]),
            generation_id: 1,
        }
    }

    fn retriever(results: Result<Vec<ScoredChunk>, StoreError>) -> Arc<CountingRetriever> {
        Arc::new(CountingRetriever {
            calls: AtomicUsize::new(0),
            results,
        })
    }

    fn pipeline(
        qa: Arc<ScriptedChatProvider>,
        condense: Arc<ScriptedChatProvider>,
        store: Arc<CountingRetriever>,
    ) -> (RagPipeline, Arc<HashingEmbedder>) {
        let embedder = Arc::new(HashingEmbedder::new(64).unwrap());
        let p = RagPipeline::new(LlmRoles::new(qa, condense), PolicyPrompt::builtin(), embedder.clone(), store);
        (p, embedder)
    }

    fn sink() -> impl FnMut(&str) -> bool + Send {
        |_: &str| true
    }

    #[tokio::test]
    async fn off_topic_skips_retrieval() {
        let qa = Arc::new(ScriptedChatProvider::fixed(["never"]));
        let condense = Arc::new(ScriptedChatProvider::fixed(["OFF_TOPIC: sales-pitch"]));
        let store = retriever(Ok(vec![]));
        let (p, embedder) = pipeline(qa.clone(), condense, store.clone());
        let mut s = sink();
        let env = p
            .answer_query(&[], "Special discount on lab reagents, register as vendor today", &mut s)
            .await
            .unwrap();
        assert!(env.guardrail.is_off_topic());
        assert_eq!(env.final_text, PolicyPrompt::builtin().off_topic_text);
        assert_eq!(store.calls.load(Ordering::SeqCst), 0);
        assert_eq!(embedder.calls(), 0);
        assert_eq!(qa.call_count(), 0);
    }

    #[tokio::test]
    async fn on_topic_answer_with_citations() {
        let qa = Arc::new(ScriptedChatProvider::fixed([
            "Use the deposition system ",
            "[Source: Deposition Guide]. ",
            "Contact x@y.org [Source: Nowhere]",
        ]));
        let condense = Arc::new(ScriptedChatProvider::fixed(["ON_TOPIC"]));
        let store = retriever(Ok(vec![scored("dep.md", "Deposition Guide", "How to deposit")]));
        let (p, _) = pipeline(qa.clone(), condense, store.clone());
        let mut seen = Vec::new();
        let mut s = |t: &str| {
            seen.push(t.to_string());
            true
        };
        let env = p.answer_query(&[], "How do I deposit?", &mut s).await.unwrap();
        assert_eq!(seen.len(), 3);
        assert!(seen.windows(2).all(|w| w[1].starts_with(&w[0])));
        assert!(env.final_text.contains("[redacted]"));
        assert_eq!(env.citations.len(), 1);
        assert_eq!(env.citations[0].doc_id, "dep.md");
        let m = p.metrics().snapshot();
        assert_eq!((m.redactions, m.citation_violations, m.retrieval_calls), (1, 1, 1));
        let call = &qa.calls()[0];
        assert_eq!(call.user, "How do I deposit?");
        assert!(call.system.contains("[Source: Deposition Guide]\nHow to deposit"));
        assert_eq!((call.temperature, call.max_tokens), (0.0, 8192));
    }

    #[tokio::test]
    async fn empty_retrieval_returns_refusal() {
        let qa = Arc::new(ScriptedChatProvider::fixed(["never"]));
        let condense = Arc::new(ScriptedChatProvider::fixed(["ON_TOPIC"]));
        let (p, _) = pipeline(qa.clone(), condense, retriever(Ok(vec![])));
        let mut s = sink();
        let env = p.answer_query(&[], "Anything?", &mut s).await.unwrap();
        assert!(env.final_text.contains("rating and comments section"));
        assert_eq!(qa.call_count(), 0);
    }

    #[tokio::test]
    async fn store_failure_is_degraded() {
        let qa = Arc::new(ScriptedChatProvider::fixed(["never"]));
        let condense = Arc::new(ScriptedChatProvider::fixed(["ON_TOPIC"]));
        let (p, _) = pipeline(qa, condense, retriever(Err(StoreError::Unavailable("no live".into()))));
        let mut s = sink();
        let err = p.answer_query(&[], "How?", &mut s).await.unwrap_err();
        assert!(matches!(err, PipelineError::Degraded { .. }));
        assert_eq!(err.user_text(), Some(PolicyPrompt::builtin().degraded_text.as_str()));
    }

    #[tokio::test]
    async fn mid_stream_failure_keeps_partial() {
        let qa = Arc::new(ScriptedChatProvider::fixed(["Dep", "osit", " more"]).with_failure_after(2));
        let condense = Arc::new(ScriptedChatProvider::fixed(["ON_TOPIC"]));
        let (p, _) = pipeline(qa, condense, retriever(Ok(vec![scored("a.md", "A", "x")])));
        let mut s = sink();
        let err = p.answer_query(&[], "How?", &mut s).await.unwrap_err();
        assert_eq!(err.partial(), "Deposit");
        assert!(matches!(err, PipelineError::Generation { .. }));
    }

    #[tokio::test]
    async fn sink_can_cancel() {
        let qa = Arc::new(ScriptedChatProvider::fixed(["a", "b", "c"]));
        let condense = Arc::new(ScriptedChatProvider::fixed(["ON_TOPIC"]));
        let (p, _) = pipeline(qa, condense, retriever(Ok(vec![scored("a.md", "A", "x")])));
        let mut s = |t: &str| t.len() < 2;
        let err = p.answer_query(&[], "How?", &mut s).await.unwrap_err();
        assert_eq!(err, PipelineError::Cancelled { partial: "ab".into() });
    }

    #[tokio::test]
    async fn condensed_question_drives_retrieval() {
        let qa = Arc::new(ScriptedChatProvider::fixed(["ok"]));
        let condense = Arc::new(ScriptedChatProvider::queue(["ON_TOPIC", "How do I update entry 1ABC?"]));
        let (p, _) = pipeline(qa.clone(), condense, retriever(Ok(vec![scored("a.md", "A", "x")])));
        let history = vec![Turn {
            user: "I deposited entry 1ABC".into(),
            assistant: "Noted.".into(),
        }];
        let mut s = sink();
        let env = p.answer_query(&history, "How do I update it?", &mut s).await.unwrap();
        assert_eq!(env.condensed_question, "How do I update entry 1ABC?");
        assert_eq!(qa.calls()[0].user, "How do I update entry 1ABC?");
    }
}
