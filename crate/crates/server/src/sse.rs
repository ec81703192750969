//! Server-sent event framing for the chat stream.
//!
//! `message` frames carry the accumulated answer so far, `done` and `error`
//! frames carry JSON, and every terminated stream ends with three `: flush`
//! comment frames.

use std::convert::Infallible;

use axum::body::{Body, Bytes};
use futures::stream::{self, Stream, StreamExt};
use helpdesk_core::desk::{ExchangeEvent, ExchangeHandle};
use serde::Serialize;

pub const FLUSH_FRAME: &str = ": flush\n\n";
pub const FLUSH_FRAMES: usize = 3;

pub fn frame(event: &str, data: &str) -> String {
    let mut out = format!("event: {event}\n");
    // split on '\n' so an empty payload still has one data line
    for line in data.split('\n') {
        out.push_str("data: ");
        out.push_str(line.strip_suffix('\r').unwrap_or(line));
        out.push('\n');
    }
    out.push('\n');
    out
}

pub fn json_frame(event: &str, payload: &impl Serialize) -> String {
    frame(event, &serde_json::to_string(payload).expect("serializable payload"))
}

/// A terminal frame followed by the flush padding.
pub fn terminal(event: &str, payload: &impl Serialize) -> String {
    let mut out = json_frame(event, payload);
    for _ in 0..FLUSH_FRAMES {
        out.push_str(FLUSH_FRAME);
    }
    out
}

#[derive(Debug, Serialize)]
struct ErrorPayload<'a> {
    kind: &'a str,
    message: &'a str,
    message_id: Option<&'a str>,
    partial: &'a str,
}

fn encode(event: ExchangeEvent) -> (String, bool) {
    match event {
        ExchangeEvent::Progress(text) => (frame("message", &text), false),
        ExchangeEvent::Done(done) => (terminal("done", &done), true),
        ExchangeEvent::Failed(f) => {
            let kind = serde_json::to_value(f.kind)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            let payload = ErrorPayload {
                kind: &kind,
                message: &f.message,
                message_id: f.message_id.as_deref(),
                partial: &f.partial,
            };
            (terminal("error", &payload), true)
        }
    }
}

/// Byte stream for one exchange. A channel that closes without a terminal
/// event still gets an error frame and padding.
pub fn exchange_stream(handle: ExchangeHandle) -> impl Stream<Item = Result<Bytes, Infallible>> + Send {
    let ExchangeHandle { events, .. } = handle;
    stream::unfold(Some(events), |state| async move {
        let mut events = state?;
        match events.recv().await {
            Some(event) => {
                let (bytes, last) = encode(event);
                Some((Ok(Bytes::from(bytes)), (!last).then_some(events)))
            }
            None => {
                let payload = ErrorPayload {
                    kind: "internal",
                    message: "the answer stream ended unexpectedly",
                    message_id: None,
                    partial: "",
                };
                Some((Ok(Bytes::from(terminal("error", &payload))), None))
            }
        }
    })
}

pub fn exchange_body(handle: ExchangeHandle) -> Body {
    Body::from_stream(exchange_stream(handle).boxed())
}

/// One parsed frame; comment frames have `event == None` and `comment` set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedFrame {
    pub event: Option<String>,
    pub data: String,
    pub comment: Option<String>,
}

/// Splits a complete SSE byte stream into frames.
pub fn parse_frames(text: &str) -> Vec<ParsedFrame> {
    text.split("\n\n")
        .filter(|block| !block.is_empty())
        .map(|block| {
            let mut event = None;
            let mut data: Vec<&str> = Vec::new();
            let mut comment = None;
            for line in block.split('\n') {
                if let Some(c) = line.strip_prefix(':') {
                    comment = Some(c.trim_start().to_string());
                } else if let Some(e) = line.strip_prefix("event:") {
                    event = Some(e.trim_start().to_string());
                } else if let Some(d) = line.strip_prefix("data:") {
                    data.push(d.strip_prefix(' ').unwrap_or(d));
                }
            }
            ParsedFrame {
                event,
                data: data.join("\n"),
                comment,
            }
        })
        .collect()
}
