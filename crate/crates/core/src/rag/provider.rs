//! Chat-completion providers.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::stream::{self, BoxStream, StreamExt};
use parking_lot::Mutex;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("provider transport error: {0}")]
    Transport(String),
    #[error("provider rejected the request: {0}")]
    Rejected(String),
    #[error("provider misconfigured: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub system: String,
    pub user: String,
    pub temperature: f32,
    pub max_tokens: u32,
}

pub type DeltaStream = BoxStream<'static, Result<String, ProviderError>>;

#[async_trait]
pub trait ChatProvider: Send + Sync {
    fn model_id(&self) -> &str;
    async fn complete(&self, req: &CompletionRequest) -> Result<String, ProviderError>;
    async fn stream(&self, req: &CompletionRequest) -> Result<DeltaStream, ProviderError>;
}

/// A provider plus the generation settings one role uses it with.
#[derive(Clone)]
pub struct RoleConfig {
    pub provider: Arc<dyn ChatProvider>,
    pub temperature: f32,
    pub max_tokens: u32,
    pub streaming: bool,
}

impl RoleConfig {
    pub fn request(&self, system: impl Into<String>, user: impl Into<String>) -> CompletionRequest {
        CompletionRequest {
            system: system.into(),
            user: user.into(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

/// Answering model and the condense/guardrail model.
#[derive(Clone)]
pub struct LlmRoles {
    pub qa: RoleConfig,
    pub condense: RoleConfig,
}

impl LlmRoles {
    pub const QA_MAX_TOKENS: u32 = 8192;
    pub const CONDENSE_MAX_TOKENS: u32 = 512;

    pub fn new(qa: Arc<dyn ChatProvider>, condense: Arc<dyn ChatProvider>) -> Self {
        Self {
            qa: RoleConfig {
                provider: qa,
                temperature: 0.0,
                max_tokens: Self::QA_MAX_TOKENS,
                streaming: true,
            },
            condense: RoleConfig {
                provider: condense,
                temperature: 0.0,
                max_tokens: Self::CONDENSE_MAX_TOKENS,
                streaming: false,
            },
        }
    }
}

type Script = dyn Fn(&CompletionRequest) -> Result<Vec<String>, ProviderError> + Send + Sync;

/// Test double driven by a closure that maps a request to its deltas.
///
/// Each delta counts as one token against `max_tokens`. Streams can be
/// slowed down or broken after a number of deltas.
pub struct ScriptedChatProvider {
    model_id: String,
    script: Box<Script>,
    delta_delay: Duration,
    fail_after: Option<usize>,
    calls: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedChatProvider {
    pub fn new(
        script: impl Fn(&CompletionRequest) -> Result<Vec<String>, ProviderError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            model_id: "scripted".into(),
            script: Box::new(script),
            delta_delay: Duration::ZERO,
            fail_after: None,
            calls: Mutex::new(Vec::new()),
        }
    }

    /// Always answers with the same deltas.
    pub fn fixed<S: Into<String>>(deltas: impl IntoIterator<Item = S>) -> Self {
        let deltas: Vec<String> = deltas.into_iter().map(Into::into).collect();
        Self::new(move |_| Ok(deltas.clone()))
    }

    /// Answers from a queue; an exhausted queue is a transport error.
    pub fn queue<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        let queue: Mutex<VecDeque<String>> =
            Mutex::new(responses.into_iter().map(Into::into).collect());
        Self::new(move |_| {
            queue
                .lock()
                .pop_front()
                .map(|r| vec![r])
                .ok_or_else(|| ProviderError::Transport("script exhausted".into()))
        })
    }

    pub fn failing(err: ProviderError) -> Self {
        Self::new(move |_| Err(err.clone()))
    }

    pub fn with_delay(mut self, per_delta: Duration) -> Self {
        self.delta_delay = per_delta;
        self
    }

    /// Streams break with a transport error after `n` deltas.
    pub fn with_failure_after(mut self, n: usize) -> Self {
        self.fail_after = Some(n);
        self
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    pub fn calls(&self) -> Vec<CompletionRequest> {
        self.calls.lock().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().len()
    }

    fn run(&self, req: &CompletionRequest) -> Result<Vec<String>, ProviderError> {
        self.calls.lock().push(req.clone());
        let mut deltas = (self.script)(req)?;
        deltas.truncate(req.max_tokens as usize);
        Ok(deltas)
    }
}

#[async_trait]
impl ChatProvider for ScriptedChatProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    async fn complete(&self, req: &CompletionRequest) -> Result<String, ProviderError> {
        let deltas = self.run(req)?;
        if let Some(n) = self.fail_after {
            if n < deltas.len() {
                return Err(ProviderError::Transport("scripted failure".into()));
            }
        }
        Ok(deltas.concat())
    }

    async fn stream(&self, req: &CompletionRequest) -> Result<DeltaStream, ProviderError> {
        let deltas = self.run(req)?;
        let delay = self.delta_delay;
        let fail_after = self.fail_after;
        let items = deltas.into_iter().enumerate().map(move |(i, d)| {
            if fail_after.is_some_and(|n| i >= n) {
                Err(ProviderError::Transport("scripted failure mid-stream".into()))
            } else {
                Ok(d)
            }
        });
        Ok(stream::iter(items)
            .then(move |item| async move {
                if !delay.is_zero() {
                    tokio::time::sleep(delay).await;
                }
                item
            })
            .scan(false, |failed, item| {
                // stop after the first error
                if *failed {
                    return futures::future::ready(None);
                }
                *failed = item.is_err();
                futures::future::ready(Some(item))
            })
            .boxed())
    }
}

/// Offline provider for demos and smoke tests: answers from the first
/// context block of the system prompt and cites it. Guardrail prompts get
/// `ON_TOPIC`; condense prompts get the follow-up back.
pub struct ExtractiveChatProvider;

impl ExtractiveChatProvider {
    fn answer(req: &CompletionRequest) -> String {
        if req.system.contains(super::guardrail::CLASSIFIER_MARKER) {
            return "ON_TOPIC".into();
        }
        if req.system.contains(super::prompt::CONDENSE_MARKER) {
            return req
                .user
                .rsplit_once("Follow-up question:")
                .map(|(_, q)| q.lines().next().unwrap_or("").trim().to_string())
                .unwrap_or_else(|| req.user.clone());
        }
        let Some((_, context)) = req.system.split_once(super::prompt::CONTEXT_HEADER) else {
            return "I could not find relevant documentation for this question.".into();
        };
        let Some(block) = context.split("[Source: ").nth(1) else {
            return context.trim().to_string();
        };
        let (title, body) = block.split_once("]\n").unwrap_or((block, ""));
        let excerpt: String = body.split("\n\n").next().unwrap_or("").chars().take(600).collect();
        format!("{} [Source: {}]", excerpt.trim(), title.trim())
    }
}

#[async_trait]
impl ChatProvider for ExtractiveChatProvider {
    fn model_id(&self) -> &str {
        "extractive"
    }

    async fn complete(&self, req: &CompletionRequest) -> Result<String, ProviderError> {
        Ok(Self::answer(req))
    }

    async fn stream(&self, req: &CompletionRequest) -> Result<DeltaStream, ProviderError> {
        let text = Self::answer(req);
        let deltas: Vec<Result<String, ProviderError>> = text
            .split_inclusive(' ')
            .take(req.max_tokens as usize)
            .map(|w| Ok(w.to_string()))
            .collect();
        Ok(stream::iter(deltas).boxed())
    }
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatProvider {
    client: reqwest::Client,
    endpoint: String,
    api_key: Option<String>,
    model_id: String,
}

impl HttpChatProvider {
    pub fn new(base_url: &str, api_key: Option<String>, model_id: impl Into<String>) -> Result<Self, ProviderError> {
        let client = reqwest::Client::builder()
            .connect_timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            model_id: model_id.into(),
        })
    }

    async fn send(&self, req: &CompletionRequest, stream: bool) -> Result<reqwest::Response, ProviderError> {
        let body = serde_json::json!({
            "model": self.model_id,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "stream": stream,
        });
        let mut builder = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await.unwrap_or_default();
        let msg = format!("HTTP {status}: {}", text.chars().take(200).collect::<String>());
        Err(if status.is_server_error() || status.as_u16() == 429 {
            ProviderError::Transport(msg)
        } else {
            ProviderError::Rejected(msg)
        })
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    #[serde(default)]
    message: Option<ChatMessageBody>,
    #[serde(default)]
    delta: Option<ChatMessageBody>,
}

#[derive(Deserialize)]
struct ChatMessageBody {
    #[serde(default)]
    content: Option<String>,
}

/// Pulls the content delta out of one `data:` payload of a streamed reply.
fn parse_stream_payload(payload: &str) -> Result<Option<String>, ProviderError> {
    let parsed: ChatResponse =
        serde_json::from_str(payload).map_err(|e| ProviderError::Transport(format!("bad chunk: {e}")))?;
    Ok(parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.delta)
        .and_then(|d| d.content)
        .filter(|s| !s.is_empty()))
}

#[async_trait]
impl ChatProvider for HttpChatProvider {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    async fn complete(&self, req: &CompletionRequest) -> Result<String, ProviderError> {
        let resp = self.send(req, false).await?;
        let body: ChatResponse = resp
            .json()
            .await
            .map_err(|e| ProviderError::Transport(e.to_string()))?;
        Ok(body
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message)
            .and_then(|m| m.content)
            .unwrap_or_default())
    }

    async fn stream(&self, req: &CompletionRequest) -> Result<DeltaStream, ProviderError> {
        let resp = self.send(req, true).await?;
        let bytes = resp.bytes_stream();
        struct State<S> {
            bytes: S,
            buf: String,
            pending: VecDeque<Result<String, ProviderError>>,
            done: bool,
        }
        let state = State {
            bytes,
            buf: String::new(),
            pending: VecDeque::new(),
            done: false,
        };
        Ok(stream::unfold(state, |mut st| async move {
            loop {
                if let Some(item) = st.pending.pop_front() {
                    if item.is_err() {
                        st.done = true;
                    }
                    return Some((item, st));
                }
                if st.done {
                    return None;
                }
                match st.bytes.next().await {
                    None => {
                        st.done = true;
                    }
                    Some(Err(e)) => st.pending.push_back(Err(ProviderError::Transport(e.to_string()))),
                    Some(Ok(chunk)) => {
                        st.buf.push_str(&String::from_utf8_lossy(&chunk));
                        while let Some(pos) = st.buf.find('\n') {
                            let line: String = st.buf.drain(..=pos).collect();
                            let Some(payload) = line.trim_end().strip_prefix("data:") else {
                                continue;
                            };
                            let payload = payload.trim();
                            if payload == "[DONE]" {
                                st.done = true;
                                break;
                            }
                            match parse_stream_payload(payload) {
                                Ok(Some(delta)) => st.pending.push_back(Ok(delta)),
                                Ok(None) => {}
                                Err(e) => st.pending.push_back(Err(e)),
                            }
                        }
                    }
                }
            }
        })
        .boxed())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(max_tokens: u32) -> CompletionRequest {
        CompletionRequest {
            system: "s".into(),
            user: "u".into(),
            temperature: 0.0,
            max_tokens,
        }
    }

    #[tokio::test]
    async fn scripted_stream_concatenates_to_complete() {
        let p = ScriptedChatProvider::fixed(["Dep", "osit"]);
        let streamed: Vec<_> = p.stream(&req(10)).await.unwrap().collect().await;
        let joined: String = streamed.into_iter().map(Result::unwrap).collect();
        assert_eq!(joined, "Deposit");
        assert_eq!(p.complete(&req(10)).await.unwrap(), joined);
        assert_eq!(p.call_count(), 2);
    }

    #[tokio::test]
    async fn scripted_respects_max_tokens() {
        let p = ScriptedChatProvider::fixed(["a", "b", "c"]);
        assert_eq!(p.complete(&req(2)).await.unwrap(), "ab");
    }

    #[tokio::test]
    async fn scripted_failure_mid_stream() {
        let p = ScriptedChatProvider::fixed(["a", "b", "c"]).with_failure_after(1);
        let items: Vec<_> = p.stream(&req(10)).await.unwrap().collect().await;
        assert_eq!(items.len(), 2);
        assert_eq!(items[0], Ok("a".to_string()));
        assert!(items[1].is_err());
    }

    #[test]
    fn roles_defaults() {
        let p: Arc<dyn ChatProvider> = Arc::new(ExtractiveChatProvider);
        let roles = LlmRoles::new(p.clone(), p);
        assert_eq!((roles.qa.temperature, roles.qa.max_tokens, roles.qa.streaming), (0.0, 8192, true));
        assert_eq!(
            (roles.condense.temperature, roles.condense.max_tokens, roles.condense.streaming),
            (0.0, 512, false)
        );
    }

    #[test]
    fn stream_payload_parsing() {
        assert_eq!(
            parse_stream_payload(r#"{"choices":[{"delta":{"content":"Hi"}}]}"#).unwrap(),
            Some("Hi".into())
        );
        assert_eq!(parse_stream_payload(r#"{"choices":[{"delta":{}}]}"#).unwrap(), None);
        assert!(parse_stream_payload("not json").is_err());
    }
}
