//! Wires the chat store, the RAG pipeline and the vector store into
//! exchanges: user message committed, answer streamed, reply committed.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;
use tokio::task::JoinHandle;

use crate::chat::{AssistantReply, ChatError, ChatStore, MessageStatus};
use crate::rag::{Citation, PipelineError, PolicyError, PolicyPrompt, RagPipeline};
use crate::vecstore::{Readiness, VectorStore};

pub const DEFAULT_ANSWER_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeDone {
    pub message_id: String,
    pub status: MessageStatus,
    pub answer: String,
    pub citations: Vec<Citation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Degraded,
    Generation,
    Timeout,
    Storage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeFailure {
    pub kind: FailureKind,
    pub message: String,
    /// Interrupted assistant message, when one was stored.
    pub message_id: Option<String>,
    pub partial: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExchangeEvent {
    /// Accumulated answer text so far.
    Progress(String),
    Done(ExchangeDone),
    Failed(ExchangeFailure),
}

pub struct ExchangeHandle {
    pub user_message_id: String,
    pub events: mpsc::UnboundedReceiver<ExchangeEvent>,
    pub task: JoinHandle<()>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthStatus {
    Ok,
    Degraded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReport {
    pub status: HealthStatus,
    pub detail: String,
}

pub struct HelpDesk {
    chat: Arc<ChatStore>,
    pipeline: Arc<RagPipeline>,
    store: Option<Arc<VectorStore>>,
    timeout: Duration,
    policy_path: Option<PathBuf>,
}

impl HelpDesk {
    pub fn new(chat: Arc<ChatStore>, pipeline: Arc<RagPipeline>) -> Self {
        Self {
            chat,
            pipeline,
            store: None,
            timeout: DEFAULT_ANSWER_TIMEOUT,
            policy_path: None,
        }
    }

    /// The store whose readiness health reports.
    pub fn with_store(mut self, store: Arc<VectorStore>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_policy_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.policy_path = Some(path.into());
        self
    }

    pub fn chat(&self) -> &Arc<ChatStore> {
        &self.chat
    }

    pub fn pipeline(&self) -> &Arc<RagPipeline> {
        &self.pipeline
    }

    pub fn store(&self) -> Option<&Arc<VectorStore>> {
        self.store.as_ref()
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn health(&self) -> HealthReport {
        let mut problems = Vec::new();
        let mut detail = Vec::new();
        if let Some(store) = &self.store {
            match store.readiness() {
                Readiness::Ready { generation_id } => detail.push(format!("index generation {generation_id} live")),
                Readiness::Degraded { reason } => problems.push(format!("index: {reason}")),
            }
        }
        match self.chat.ping() {
            Ok(()) => detail.push("chat store reachable".to_string()),
            Err(e) => problems.push(format!("chat store: {e}")),
        }
        if problems.is_empty() {
            HealthReport {
                status: HealthStatus::Ok,
                detail: detail.join("; "),
            }
        } else {
            HealthReport {
                status: HealthStatus::Degraded,
                detail: problems.join("; "),
            }
        }
    }

    /// Re-reads the policy file; the old policy stays on failure.
    pub fn reload_policy(&self) -> Result<Option<String>, PolicyError> {
        let Some(path) = &self.policy_path else {
            return Ok(None);
        };
        let policy = PolicyPrompt::load(path)?;
        let version = policy.version.clone();
        self.pipeline.set_policy(policy);
        tracing::info!(%version, path = %path.display(), "policy reloaded");
        Ok(Some(version))
    }

    /// Commits the user message, then answers it on a background task.
    ///
    /// Dropping the event receiver cancels generation; whatever was produced
    /// is stored as an interrupted reply.
    pub fn start_exchange(&self, thread_id: &str, message: &str) -> Result<ExchangeHandle, ChatError> {
        let user_message_id = self.chat.begin_exchange(thread_id, message)?;
        let (tx, rx) = mpsc::unbounded_channel();
        let task = tokio::spawn(run_exchange(
            self.chat.clone(),
            self.pipeline.clone(),
            self.timeout,
            thread_id.to_string(),
            user_message_id.clone(),
            message.to_string(),
            tx,
        ));
        Ok(ExchangeHandle {
            user_message_id,
            events: rx,
            task,
        })
    }

    /// Closes exchanges left pending by a previous process; returns how many.
    pub fn recover_pending(&self) -> Result<usize, ChatError> {
        let pending = self.chat.pending_exchanges()?;
        for (thread_id, message_id) in &pending {
            self.chat
                .complete_exchange(thread_id, message_id, &AssistantReply::interrupted(""))?;
        }
        Ok(pending.len())
    }
}

async fn run_exchange(
    chat: Arc<ChatStore>,
    pipeline: Arc<RagPipeline>,
    timeout: Duration,
    thread_id: String,
    user_message_id: String,
    message: String,
    tx: mpsc::UnboundedSender<ExchangeEvent>,
) {
    let history = match chat.history_window(&thread_id) {
        Ok(h) => h,
        Err(e) => {
            let failure = finish_failed(&chat, &thread_id, &user_message_id, FailureKind::Storage, e.to_string(), "");
            let _ = tx.send(ExchangeEvent::Failed(failure));
            return;
        }
    };

    let mut last = String::new();
    let outcome = {
        let mut sink = |text: &str| {
            last.clear();
            last.push_str(text);
            tx.send(ExchangeEvent::Progress(text.to_string())).is_ok()
        };
        tokio::time::timeout(timeout, pipeline.answer_query(&history, &message, &mut sink)).await
    };

    let event = match outcome {
        Ok(Ok(envelope)) => {
            let reply = AssistantReply::complete(&envelope);
            match chat.complete_exchange(&thread_id, &user_message_id, &reply) {
                Ok(message_id) => ExchangeEvent::Done(ExchangeDone {
                    message_id,
                    status: MessageStatus::Complete,
                    answer: reply.content,
                    citations: reply.citations,
                }),
                Err(e) => ExchangeEvent::Failed(ExchangeFailure {
                    kind: FailureKind::Storage,
                    message: e.to_string(),
                    message_id: None,
                    partial: reply.content,
                }),
            }
        }
        Ok(Err(PipelineError::Cancelled { partial })) => {
            tracing::info!(thread = %thread_id, "client went away, storing partial answer");
            finish_failed(&chat, &thread_id, &user_message_id, FailureKind::Generation, "cancelled".into(), &partial);
            return;
        }
        Ok(Err(err)) => {
            let kind = match err {
                PipelineError::Degraded { .. } => FailureKind::Degraded,
                _ => FailureKind::Generation,
            };
            let text = err.user_text().unwrap_or_default().to_string();
            ExchangeEvent::Failed(finish_failed(&chat, &thread_id, &user_message_id, kind, text, err.partial()))
        }
        Err(_elapsed) => {
            tracing::warn!(thread = %thread_id, ?timeout, "answer timed out");
            let text = format!("The answer took longer than {} seconds and was stopped.", timeout.as_secs());
            ExchangeEvent::Failed(finish_failed(&chat, &thread_id, &user_message_id, FailureKind::Timeout, text, &last))
        }
    };
    let _ = tx.send(event);
}

fn finish_failed(
    chat: &ChatStore,
    thread_id: &str,
    user_message_id: &str,
    kind: FailureKind,
    message: String,
    partial: &str,
) -> ExchangeFailure {
    let message_id = match chat.complete_exchange(thread_id, user_message_id, &AssistantReply::interrupted(partial)) {
        Ok(id) => Some(id),
        Err(e) => {
            tracing::error!(error = %e, thread = %thread_id, "could not store interrupted reply");
            None
        }
    };
    ExchangeFailure {
        kind,
        message,
        message_id,
        partial: partial.to_string(),
    }
}
