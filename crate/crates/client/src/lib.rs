//! HTTP client for the help desk service.

use futures::stream::{Stream, StreamExt};
use reqwest::{header, Response, StatusCode};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("{status}: {code}: {message}")]
    Api {
        status: StatusCode,
        code: String,
        message: String,
        retry_after: Option<u64>,
    },
    #[error("malformed response: {0}")]
    Decode(String),
}

impl ClientError {
    pub fn status(&self) -> Option<StatusCode> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Transport(e) => e.status(),
            ClientError::Decode(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Citation {
    pub doc_id: String,
    pub source_title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Done {
    pub message_id: String,
    pub status: String,
    pub answer: String,
    #[serde(default)]
    pub citations: Vec<Citation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub kind: String,
    pub message: String,
    pub message_id: Option<String>,
    #[serde(default)]
    pub partial: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackReceipt {
    pub feedback_id: String,
    pub answer_preview: String,
    pub answer_length: i64,
    pub num_references: i64,
    pub star_rating: i64,
    pub created_at: String,
}

/// One decoded event from `POST /api/chat`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChatEvent {
    /// Accumulated answer text so far.
    Message(String),
    Done(Done),
    Error(Failure),
}

/// Raw SSE frame; comment frames have `event == None`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Frame {
    pub event: Option<String>,
    pub data: String,
    pub comment: Option<String>,
}

/// Incremental SSE decoder; feed bytes in any split, take complete frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) -> Vec<Frame> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        while let Some(end) = self.buf.windows(2).position(|w| w == b"\n\n") {
            let block: Vec<u8> = self.buf.drain(..end + 2).collect();
            let text = String::from_utf8_lossy(&block[..end]);
            if let Some(frame) = parse_block(&text) {
                out.push(frame);
            }
        }
        out
    }

    /// Bytes held back waiting for a frame terminator.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

fn parse_block(block: &str) -> Option<Frame> {
    if block.is_empty() {
        return None;
    }
    let mut frame = Frame::default();
    let mut data: Vec<&str> = Vec::new();
    for line in block.split('\n') {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if let Some(c) = line.strip_prefix(':') {
            frame.comment = Some(c.trim_start().to_string());
        } else if let Some(e) = line.strip_prefix("event:") {
            frame.event = Some(e.trim_start().to_string());
        } else if let Some(d) = line.strip_prefix("data:") {
            data.push(d.strip_prefix(' ').unwrap_or(d));
        }
    }
    frame.data = data.join("\n");
    Some(frame)
}

/// Splits a complete SSE body into frames.
pub fn parse_frames(text: &str) -> Vec<Frame> {
    let mut dec = FrameDecoder::new();
    dec.push(text.as_bytes())
}

impl ChatEvent {
    pub fn from_frame(frame: &Frame) -> Result<Option<ChatEvent>, ClientError> {
        let decode = |e: serde_json::Error| ClientError::Decode(format!("{}: {e}", frame.data));
        Ok(match frame.event.as_deref() {
            Some("message") => Some(ChatEvent::Message(frame.data.clone())),
            Some("done") => Some(ChatEvent::Done(serde_json::from_str(&frame.data).map_err(decode)?)),
            Some("error") => Some(ChatEvent::Error(serde_json::from_str(&frame.data).map_err(decode)?)),
            _ => None,
        })
    }
}

/// A chat response being streamed.
pub struct ChatStream {
    pub user_message_id: Option<String>,
    response: Response,
    decoder: FrameDecoder,
    queued: std::collections::VecDeque<Frame>,
    raw: Vec<u8>,
    keep_raw: bool,
}

impl ChatStream {
    /// Keeps a copy of every byte received, readable with [`ChatStream::raw`].
    pub fn record_raw(mut self) -> Self {
        self.keep_raw = true;
        self
    }

    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    /// Next frame, including `: flush` comments; `None` once the body ends.
    pub async fn next_frame(&mut self) -> Result<Option<Frame>, ClientError> {
        loop {
            if let Some(f) = self.queued.pop_front() {
                return Ok(Some(f));
            }
            match self.response.chunk().await? {
                Some(bytes) => {
                    if self.keep_raw {
                        self.raw.extend_from_slice(&bytes);
                    }
                    self.queued.extend(self.decoder.push(&bytes));
                }
                None => return Ok(None),
            }
        }
    }

    /// Next answer event, skipping comments.
    pub async fn next_event(&mut self) -> Result<Option<ChatEvent>, ClientError> {
        while let Some(frame) = self.next_frame().await? {
            if let Some(ev) = ChatEvent::from_frame(&frame)? {
                return Ok(Some(ev));
            }
        }
        Ok(None)
    }

    /// Drains the stream and returns the terminal event.
    pub async fn finish(mut self) -> Result<ChatEvent, ClientError> {
        let mut last = None;
        while let Some(ev) = self.next_event().await? {
            if !matches!(ev, ChatEvent::Message(_)) {
                last = Some(ev);
            }
        }
        last.ok_or_else(|| ClientError::Decode("stream ended without done or error".into()))
    }

    pub fn into_events(self) -> impl Stream<Item = Result<ChatEvent, ClientError>> {
        futures::stream::unfold(self, |mut s| async move {
            match s.next_event().await {
                Ok(Some(ev)) => Some((Ok(ev), s)),
                Ok(None) => None,
                Err(e) => Some((Err(e), s)),
            }
        })
        .boxed()
    }
}

#[derive(Debug, Clone)]
pub struct HelpdeskClient {
    base: String,
    http: reqwest::Client,
    admin_token: Option<String>,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    session_id: &'a str,
    thread_id: &'a str,
    message: &'a str,
}

#[derive(Serialize)]
struct FeedbackBody<'a> {
    thread_id: &'a str,
    star_rating: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    comment: Option<&'a str>,
}

impl HelpdeskClient {
    pub fn new(base: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
            admin_token: None,
        }
    }

    pub fn with_admin_token(mut self, token: impl Into<String>) -> Self {
        self.admin_token = Some(token.into());
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn admin(&self, req: reqwest::RequestBuilder) -> reqwest::RequestBuilder {
        match &self.admin_token {
            Some(t) => req.bearer_auth(t),
            None => req,
        }
    }

    async fn check(resp: Response) -> Result<Response, ClientError> {
        if resp.status().is_success() {
            return Ok(resp);
        }
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get(header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.parse().ok());
        let body: Value = resp.json().await.unwrap_or(Value::Null);
        let field = |k: &str| body.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
        Err(ClientError::Api {
            status,
            code: field("error"),
            message: field("message"),
            retry_after,
        })
    }

    async fn json<T: serde::de::DeserializeOwned>(resp: Response) -> Result<T, ClientError> {
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        Self::json(self.http.get(self.url("/api/health")).send().await?).await
    }

    pub async fn metrics(&self) -> Result<Value, ClientError> {
        Self::json(self.http.get(self.url("/api/metrics")).send().await?).await
    }

    pub async fn create_session(&self) -> Result<String, ClientError> {
        let v: Value = Self::json(self.http.post(self.url("/api/session")).send().await?).await?;
        string_field(&v, "session_id")
    }

    pub async fn create_thread(&self, session_id: &str) -> Result<String, ClientError> {
        let url = self.url(&format!("/api/session/{session_id}/thread"));
        let v: Value = Self::json(self.http.post(url).send().await?).await?;
        string_field(&v, "thread_id")
    }

    pub async fn session(&self, session_id: &str) -> Result<Value, ClientError> {
        Self::json(self.http.get(self.url(&format!("/api/session/{session_id}"))).send().await?).await
    }

    pub async fn thread(&self, session_id: &str, thread_id: &str) -> Result<Value, ClientError> {
        let url = self.url(&format!("/api/session/{session_id}/thread/{thread_id}"));
        Self::json(self.http.get(url).send().await?).await
    }

    pub async fn chat(&self, session_id: &str, thread_id: &str, message: &str) -> Result<ChatStream, ClientError> {
        let resp = self
            .http
            .post(self.url("/api/chat"))
            .json(&ChatBody {
                session_id,
                thread_id,
                message,
            })
            .send()
            .await?;
        let resp = Self::check(resp).await?;
        let user_message_id = resp
            .headers()
            .get("x-user-message-id")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        Ok(ChatStream {
            user_message_id,
            response: resp,
            decoder: FrameDecoder::new(),
            queued: Default::default(),
            raw: Vec::new(),
            keep_raw: false,
        })
    }

    pub async fn feedback(
        &self,
        thread_id: &str,
        star_rating: i64,
        comment: Option<&str>,
    ) -> Result<FeedbackReceipt, ClientError> {
        let resp = self
            .http
            .post(self.url("/api/feedback"))
            .json(&FeedbackBody {
                thread_id,
                star_rating,
                comment,
            })
            .send()
            .await?;
        Self::json(resp).await
    }

    /// Feedback CSV; bounds are RFC 3339 or `YYYY-MM-DD`.
    pub async fn export_feedback(&self, since: Option<&str>, until: Option<&str>) -> Result<String, ClientError> {
        let mut query = Vec::new();
        if let Some(s) = since {
            query.push(("since", s));
        }
        if let Some(u) = until {
            query.push(("until", u));
        }
        let req = self.admin(self.http.get(self.url("/api/feedback/export")).query(&query));
        Ok(Self::check(req.send().await?).await?.text().await?)
    }

    pub async fn ingest(&self, force: bool, dry_run: bool) -> Result<Value, ClientError> {
        let req = self.admin(
            self.http
                .post(self.url("/api/admin/ingest"))
                .json(&serde_json::json!({ "force": force, "dry_run": dry_run })),
        );
        Self::json(req.send().await?).await
    }

    pub async fn reload_policy(&self) -> Result<Value, ClientError> {
        let req = self.admin(self.http.post(self.url("/api/admin/policy/reload")));
        Self::json(req.send().await?).await
    }
}

fn string_field(v: &Value, key: &str) -> Result<String, ClientError> {
    v.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ClientError::Decode(format!("missing {key}")))
}
