//! Sessions, threads, messages and feedback on an embedded SQL store, plus
//! the bounded per-thread history cache.

use std::io;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, SecondsFormat, Utc};
use lru::LruCache;
use parking_lot::Mutex;
use rand::RngCore;
use rusqlite::{params, Connection, OptionalExtension, TransactionBehavior};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rag::{AnswerEnvelope, Citation, Turn};

pub const MAX_THREADS_PER_SESSION: u32 = 50;
pub const MAX_MESSAGE_CHARS: usize = 10_000;
pub const HISTORY_CAPACITY: usize = 500;
pub const HISTORY_TURNS: usize = 3;
pub const ANSWER_PREVIEW_CHARS: usize = 200;
pub const FEEDBACK_CSV_HEADER: &str =
    "created_at,question,answer_preview,answer_length,num_references,star_rating,comment";

/// Source of timestamps; swapped out in tests.
pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChatError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("session already has the maximum of {limit} threads")]
    CapExceeded { limit: u32 },
    #[error("message is {len} characters, the limit is {limit}")]
    MessageTooLong { len: usize, limit: usize },
    #[error("message is empty")]
    EmptyMessage,
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("storage error: {0}")]
    Storage(String),
}

impl From<rusqlite::Error> for ChatError {
    fn from(e: rusqlite::Error) -> Self {
        ChatError::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    fn parse(s: &str) -> Result<Self, ChatError> {
        match s {
            "user" => Ok(Role::User),
            "assistant" => Ok(Role::Assistant),
            other => Err(ChatError::Storage(format!("unknown role {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageStatus {
    Complete,
    Interrupted,
}

impl MessageStatus {
    fn as_str(self) -> &'static str {
        match self {
            MessageStatus::Complete => "complete",
            MessageStatus::Interrupted => "interrupted",
        }
    }

    fn parse(s: &str) -> Result<Self, ChatError> {
        match s {
            "complete" => Ok(MessageStatus::Complete),
            "interrupted" => Ok(MessageStatus::Interrupted),
            other => Err(ChatError::Storage(format!("unknown status {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSession {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub thread_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub message_id: String,
    pub role: Role,
    pub content: String,
    pub citations: Vec<Citation>,
    pub created_at: DateTime<Utc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<MessageStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatThread {
    pub thread_id: String,
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub messages: Vec<ChatMessage>,
}

/// What gets persisted as the assistant side of an exchange.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssistantReply {
    pub content: String,
    pub citations: Vec<Citation>,
    pub status: MessageStatus,
}

impl AssistantReply {
    pub fn complete(envelope: &AnswerEnvelope) -> Self {
        Self {
            content: envelope.final_text.clone(),
            citations: envelope.citations.clone(),
            status: MessageStatus::Complete,
        }
    }

    pub fn interrupted(partial: impl Into<String>) -> Self {
        Self {
            content: partial.into(),
            citations: Vec::new(),
            status: MessageStatus::Interrupted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub feedback_id: String,
    pub thread_id: String,
    pub question: String,
    pub answer_preview: String,
    pub answer_length: u64,
    pub num_references: u64,
    pub star_rating: u8,
    pub comment: Option<String>,
    pub created_at: DateTime<Utc>,
}

/// One exported feedback row, in CSV column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRow {
    pub created_at: DateTime<Utc>,
    pub question: String,
    pub answer_preview: String,
    pub answer_length: u64,
    pub num_references: u64,
    pub star_rating: u8,
    pub comment: Option<String>,
}

impl From<&FeedbackRecord> for FeedbackRow {
    fn from(r: &FeedbackRecord) -> Self {
        Self {
            created_at: r.created_at,
            question: r.question.clone(),
            answer_preview: r.answer_preview.clone(),
            answer_length: r.answer_length,
            num_references: r.num_references,
            star_rating: r.star_rating,
            comment: r.comment.clone(),
        }
    }
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS sessions (
    session_id   TEXT PRIMARY KEY,
    created_at   TEXT NOT NULL,
    thread_count INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS threads (
    thread_id  TEXT PRIMARY KEY,
    session_id TEXT NOT NULL REFERENCES sessions(session_id),
    created_at TEXT NOT NULL,
    pending_message_id TEXT
);
CREATE TABLE IF NOT EXISTS messages (
    id         INTEGER PRIMARY KEY AUTOINCREMENT,
    message_id TEXT NOT NULL UNIQUE,
    thread_id  TEXT NOT NULL REFERENCES threads(thread_id),
    role       TEXT NOT NULL,
    content    TEXT NOT NULL,
    citations  TEXT NOT NULL DEFAULT '[]',
    status     TEXT,
    created_at TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS messages_by_thread ON messages(thread_id, id);
CREATE TABLE IF NOT EXISTS feedback (
    id             INTEGER PRIMARY KEY AUTOINCREMENT,
    feedback_id    TEXT NOT NULL UNIQUE,
    thread_id      TEXT NOT NULL REFERENCES threads(thread_id),
    question       TEXT NOT NULL,
    answer_preview TEXT NOT NULL,
    answer_length  INTEGER NOT NULL,
    num_references INTEGER NOT NULL,
    star_rating    INTEGER NOT NULL,
    comment        TEXT,
    created_at     TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS feedback_by_time ON feedback(created_at, id);
";

// Fixed-width UTC timestamps sort lexicographically.
fn ts(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, true)
}

fn parse_ts(s: &str) -> Result<DateTime<Utc>, ChatError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| ChatError::Storage(format!("bad timestamp {s:?}: {e}")))
}

fn new_id() -> String {
    uuid::Uuid::new_v4().to_string()
}

/// 32 random bytes, URL-safe base64 without padding (43 chars).
pub fn new_session_token() -> String {
    let mut bytes = [0u8; 32];
    rand::rngs::OsRng.fill_bytes(&mut bytes);
    URL_SAFE_NO_PAD.encode(bytes)
}

fn preview(text: &str) -> String {
    text.chars().take(ANSWER_PREVIEW_CHARS).collect()
}

pub fn system_clock() -> Clock {
    Arc::new(Utc::now)
}

pub struct ChatStore {
    conn: Mutex<Connection>,
    cache: Mutex<LruCache<String, Vec<Turn>>>,
    clock: Clock,
    history_loads: AtomicU64,
}

impl ChatStore {
    pub fn open(path: &Path) -> Result<Self, ChatError> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "FULL")?;
        Self::with_connection(conn)
    }

    pub fn open_in_memory() -> Result<Self, ChatError> {
        Self::with_connection(Connection::open_in_memory()?)
    }

    fn with_connection(conn: Connection) -> Result<Self, ChatError> {
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
            cache: Mutex::new(LruCache::new(NonZeroUsize::new(HISTORY_CAPACITY).expect("non-zero"))),
            clock: system_clock(),
            history_loads: AtomicU64::new(0),
        })
    }

    pub fn with_history_capacity(self, capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("non-zero");
        *self.cache.lock() = LruCache::new(cap);
        self
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    // Microsecond precision so stored and exported values compare equal.
    fn now(&self) -> DateTime<Utc> {
        let t = (self.clock)();
        DateTime::from_timestamp_micros(t.timestamp_micros()).unwrap_or(t)
    }

    /// Storage connectivity check for health reporting.
    pub fn ping(&self) -> Result<(), ChatError> {
        self.conn.lock().query_row("SELECT 1", [], |_| Ok(()))?;
        Ok(())
    }

    pub fn create_session(&self) -> Result<ChatSession, ChatError> {
        let session = ChatSession {
            session_id: new_session_token(),
            created_at: self.now(),
            thread_count: 0,
        };
        self.conn.lock().execute(
            "INSERT INTO sessions (session_id, created_at, thread_count) VALUES (?1, ?2, 0)",
            params![session.session_id, ts(session.created_at)],
        )?;
        Ok(session)
    }

    pub fn session(&self, session_id: &str) -> Result<ChatSession, ChatError> {
        let row = self
            .conn
            .lock()
            .query_row(
                "SELECT created_at, thread_count FROM sessions WHERE session_id = ?1",
                params![session_id],
                |r| Ok((r.get::<_, String>(0)?, r.get::<_, u32>(1)?)),
            )
            .optional()?;
        let (created, thread_count) = row.ok_or_else(|| ChatError::NotFound("session".into()))?;
        Ok(ChatSession {
            session_id: session_id.to_string(),
            created_at: parse_ts(&created)?,
            thread_count,
        })
    }

    /// Check-and-increment of the session's thread count in one transaction.
    pub fn create_thread(&self, session_id: &str) -> Result<String, ChatError> {
        let mut conn = self.conn.lock();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let bumped = tx.execute(
            "UPDATE sessions SET thread_count = thread_count + 1
             WHERE session_id = ?1 AND thread_count < ?2",
            params![session_id, MAX_THREADS_PER_SESSION],
        )?;
        if bumped == 0 {
            let exists: bool = tx
                .query_row("SELECT 1 FROM sessions WHERE session_id = ?1", params![session_id], |_| Ok(true))
                .optional()?
                .unwrap_or(false);
            return Err(if exists {
                ChatError::CapExceeded {
                    limit: MAX_THREADS_PER_SESSION,
                }
            } else {
                ChatError::NotFound("session".into())
            });
        }
        let thread_id = new_id();
        tx.execute(
            "INSERT INTO threads (thread_id, session_id, created_at) VALUES (?1, ?2, ?3)",
            params![thread_id, session_id, ts(self.now())],
        )?;
        tx.commit()?;
        Ok(thread_id)
    }

    /// Thread ids of a session, oldest first.
    pub fn session_threads(&self, session_id: &str) -> Result<Vec<String>, ChatError> {
        self.session(session_id)?;
        let conn = self.conn.lock();
        let mut stmt = conn.prepare("SELECT thread_id FROM threads WHERE session_id = ?1 ORDER BY created_at, rowid")?;
        let rows = stmt.query_map(params![session_id], |r| r.get(0))?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Owning session of a thread.
    pub fn thread_session(&self, thread_id: &str) -> Result<String, ChatError> {
        self.conn
            .lock()
            .query_row(
                "SELECT session_id FROM threads WHERE thread_id = ?1",
                params![thread_id],
                |r| r.get(0),
            )
            .optional()?
            .ok_or_else(|| ChatError::NotFound("thread".into()))
    }

    pub fn thread(&self, thread_id: &str) -> Result<ChatThread, ChatError> {
        let conn = self.conn.lock();
        let (session_id, created): (String, String) = conn
            .query_row(
                "SELECT session_id, created_at FROM threads WHERE thread_id = ?1",
                params![thread_id],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()?
            .ok_or_else(|| ChatError::NotFound("thread".into()))?;
        let messages = load_messages(&conn, thread_id)?;
        Ok(ChatThread {
            thread_id: thread_id.to_string(),
            session_id,
            created_at: parse_ts(&created)?,
            messages,
        })
    }

    /// Id of the user message still awaiting a reply, if any.
    pub fn pending_message(&self, thread_id: &str) -> Result<Option<String>, ChatError> {
        self.conn
            .lock()
            .query_row(
                "SELECT pending_message_id FROM threads WHERE thread_id = ?1",
                params![thread_id],
                |r| r.get::<_, Option<String>>(0),
            )
            .optional()?
            .ok_or_else(|| ChatError::NotFound("thread".into()))
    }

    /// (thread_id, user_message_id) for every thread awaiting a reply.
    pub fn pending_exchanges(&self) -> Result<Vec<(String, String)>, ChatError> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare(
            "SELECT thread_id, pending_message_id FROM threads
             WHERE pending_message_id IS NOT NULL ORDER BY thread_id",
        )?;
        let rows = stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    /// Transaction 1: durably stores the user message and marks the thread busy.
    pub fn begin_exchange(&self, thread_id: &str, content: &str) -> Result<String, ChatError> {
        let len = content.chars().count();
        if len > MAX_MESSAGE_CHARS {
            return Err(ChatError::MessageTooLong {
                len,
                limit: MAX_MESSAGE_CHARS,
            });
        }
        if content.trim().is_empty() {
            return Err(ChatError::EmptyMessage);
        }
        let mut conn = self.conn.lock();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
        let pending: Option<String> = tx
            .query_row(
                "SELECT pending_message_id FROM threads WHERE thread_id = ?1",
                params![thread_id],
                |r| r.get(0),
            )
            .optional()?
            .ok_or_else(|| ChatError::NotFound("thread".into()))?;
        if pending.is_some() {
            return Err(ChatError::Conflict("thread is still waiting for a reply".into()));
        }
        let message_id = new_id();
        tx.execute(
            "INSERT INTO messages (message_id, thread_id, role, content, created_at)
             VALUES (?1, ?2, 'user', ?3, ?4)",
            params![message_id, thread_id, content, ts(self.now())],
        )?;
        tx.execute(
            "UPDATE threads SET pending_message_id = ?1 WHERE thread_id = ?2",
            params![message_id, thread_id],
        )?;
        tx.commit()?;
        Ok(message_id)
    }

    /// Transaction 2: stores the assistant reply and frees the thread.
    pub fn complete_exchange(
        &self,
        thread_id: &str,
        user_message_id: &str,
        reply: &AssistantReply,
    ) -> Result<String, ChatError> {
        let message_id = new_id();
        let user_content = {
            let mut conn = self.conn.lock();
            let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;
            let pending: Option<String> = tx
                .query_row(
                    "SELECT pending_message_id FROM threads WHERE thread_id = ?1",
                    params![thread_id],
                    |r| r.get(0),
                )
                .optional()?
                .ok_or_else(|| ChatError::NotFound("thread".into()))?;
            if pending.as_deref() != Some(user_message_id) {
                return Err(ChatError::State(format!(
                    "message {user_message_id} is not awaiting a reply"
                )));
            }
            let user_content: String = tx.query_row(
                "SELECT content FROM messages WHERE message_id = ?1",
                params![user_message_id],
                |r| r.get(0),
            )?;
            let citations = serde_json::to_string(&reply.citations).map_err(|e| ChatError::Storage(e.to_string()))?;
            tx.execute(
                "INSERT INTO messages (message_id, thread_id, role, content, citations, status, created_at)
                 VALUES (?1, ?2, 'assistant', ?3, ?4, ?5, ?6)",
                params![
                    message_id,
                    thread_id,
                    reply.content,
                    citations,
                    reply.status.as_str(),
                    ts(self.now())
                ],
            )?;
            tx.execute(
                "UPDATE threads SET pending_message_id = NULL WHERE thread_id = ?1",
                params![thread_id],
            )?;
            tx.commit()?;
            user_content
        };
        if reply.status == MessageStatus::Complete {
            let mut cache = self.cache.lock();
            if let Some(turns) = cache.get_mut(thread_id) {
                turns.push(Turn {
                    user: user_content,
                    assistant: reply.content.clone(),
                });
                let excess = turns.len().saturating_sub(HISTORY_TURNS);
                turns.drain(..excess);
            }
        }
        Ok(message_id)
    }

    /// Last three completed turns, from cache or storage.
    pub fn history_window(&self, thread_id: &str) -> Result<Vec<Turn>, ChatError> {
        if let Some(turns) = self.cache.lock().get(thread_id) {
            return Ok(turns.clone());
        }
        let turns = {
            let conn = self.conn.lock();
            let exists = conn
                .query_row("SELECT 1 FROM threads WHERE thread_id = ?1", params![thread_id], |_| Ok(()))
                .optional()?;
            if exists.is_none() {
                return Err(ChatError::NotFound("thread".into()));
            }
            completed_turns(&load_messages(&conn, thread_id)?)
        };
        self.history_loads.fetch_add(1, Ordering::Relaxed);
        self.cache.lock().put(thread_id.to_string(), turns.clone());
        Ok(turns)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().len()
    }

    pub fn is_cached(&self, thread_id: &str) -> bool {
        self.cache.lock().contains(thread_id)
    }

    /// Storage reads performed by `history_window` on cache misses.
    pub fn history_loads(&self) -> u64 {
        self.history_loads.load(Ordering::Relaxed)
    }

    /// Feedback on the thread's most recent answered exchange.
    pub fn record_feedback(
        &self,
        thread_id: &str,
        star_rating: i64,
        comment: Option<&str>,
    ) -> Result<FeedbackRecord, ChatError> {
        if !(1..=5).contains(&star_rating) {
            return Err(ChatError::Validation(format!(
                "star_rating must be between 1 and 5, got {star_rating}"
            )));
        }
        let conn = self.conn.lock();
        let exists = conn
            .query_row("SELECT 1 FROM threads WHERE thread_id = ?1", params![thread_id], |_| Ok(()))
            .optional()?;
        if exists.is_none() {
            return Err(ChatError::NotFound("thread".into()));
        }
        let messages = load_messages(&conn, thread_id)?;
        let answer_at = messages
            .iter()
            .rposition(|m| m.role == Role::Assistant)
            .ok_or_else(|| ChatError::State("thread has no answered question yet".into()))?;
        let answer = &messages[answer_at];
        let question = messages[..answer_at]
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.clone())
            .unwrap_or_default();
        let record = FeedbackRecord {
            feedback_id: new_id(),
            thread_id: thread_id.to_string(),
            question,
            answer_preview: preview(&answer.content),
            answer_length: answer.content.chars().count() as u64,
            num_references: answer.citations.len() as u64,
            star_rating: star_rating as u8,
            comment: comment.map(str::trim).filter(|c| !c.is_empty()).map(str::to_string),
            created_at: self.now(),
        };
        conn.execute(
            "INSERT INTO feedback (feedback_id, thread_id, question, answer_preview, answer_length,
                                   num_references, star_rating, comment, created_at)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            params![
                record.feedback_id,
                record.thread_id,
                record.question,
                record.answer_preview,
                record.answer_length as i64,
                record.num_references as i64,
                record.star_rating,
                record.comment,
                ts(record.created_at)
            ],
        )?;
        Ok(record)
    }

    /// Rows with `since <= created_at < until`, oldest first.
    pub fn export_feedback(
        &self,
        since: Option<DateTime<Utc>>,
        until: Option<DateTime<Utc>>,
    ) -> Result<Vec<FeedbackRow>, ChatError> {
        let conn = self.conn.lock();
        let mut stmt = conn.prepare(
            "SELECT created_at, question, answer_preview, answer_length, num_references, star_rating, comment
             FROM feedback
             WHERE (?1 IS NULL OR created_at >= ?1) AND (?2 IS NULL OR created_at < ?2)
             ORDER BY created_at, id",
        )?;
        let rows = stmt.query_map(params![since.map(ts), until.map(ts)], |r| {
            Ok((
                r.get::<_, String>(0)?,
                r.get::<_, String>(1)?,
                r.get::<_, String>(2)?,
                r.get::<_, i64>(3)?,
                r.get::<_, i64>(4)?,
                r.get::<_, u8>(5)?,
                r.get::<_, Option<String>>(6)?,
            ))
        })?;
        let mut out = Vec::new();
        for row in rows {
            let (created, question, answer_preview, len, refs, star_rating, comment) = row?;
            out.push(FeedbackRow {
                created_at: parse_ts(&created)?,
                question,
                answer_preview,
                answer_length: len as u64,
                num_references: refs as u64,
                star_rating,
                comment,
            });
        }
        Ok(out)
    }
}

fn load_messages(conn: &Connection, thread_id: &str) -> Result<Vec<ChatMessage>, ChatError> {
    let mut stmt = conn.prepare(
        "SELECT message_id, role, content, citations, status, created_at
         FROM messages WHERE thread_id = ?1 ORDER BY id",
    )?;
    let rows = stmt.query_map(params![thread_id], |r| {
        Ok((
            r.get::<_, String>(0)?,
            r.get::<_, String>(1)?,
            r.get::<_, String>(2)?,
            r.get::<_, String>(3)?,
            r.get::<_, Option<String>>(4)?,
            r.get::<_, String>(5)?,
        ))
    })?;
    let mut out = Vec::new();
    for row in rows {
        let (message_id, role, content, citations, status, created) = row?;
        out.push(ChatMessage {
            message_id,
            role: Role::parse(&role)?,
            content,
            citations: serde_json::from_str(&citations).map_err(|e| ChatError::Storage(e.to_string()))?,
            status: status.as_deref().map(MessageStatus::parse).transpose()?,
            created_at: parse_ts(&created)?,
        });
    }
    Ok(out)
}

/// User/assistant pairs whose reply completed, last three kept.
fn completed_turns(messages: &[ChatMessage]) -> Vec<Turn> {
    let mut turns = Vec::new();
    for pair in messages.windows(2) {
        if pair[0].role == Role::User
            && pair[1].role == Role::Assistant
            && pair[1].status == Some(MessageStatus::Complete)
        {
            turns.push(Turn {
                user: pair[0].content.clone(),
                assistant: pair[1].content.clone(),
            });
        }
    }
    let excess = turns.len().saturating_sub(HISTORY_TURNS);
    turns.drain(..excess);
    turns
}

/// RFC 4180 CSV with the fixed header; an absent comment is an empty field.
pub fn write_feedback_csv<W: io::Write>(rows: &[FeedbackRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(FEEDBACK_CSV_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.created_at.to_rfc3339_opts(SecondsFormat::Micros, true),
            r.question.clone(),
            r.answer_preview.clone(),
            r.answer_length.to_string(),
            r.num_references.to_string(),
            r.star_rating.to_string(),
            r.comment.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn feedback_csv_string(rows: &[FeedbackRow]) -> String {
    let mut buf = Vec::new();
    write_feedback_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is UTF-8")
}

pub fn parse_feedback_csv<R: io::Read>(input: R) -> Result<Vec<FeedbackRow>, csv::Error> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != FEEDBACK_CSV_HEADER {
        return Err(csv::Error::from(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("unexpected header {:?}", header.join(",")),
        )));
    }
    let bad = |msg: String| csv::Error::from(io::Error::new(io::ErrorKind::InvalidData, msg));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(bad(format!("expected 7 fields, got {}", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<u64>().map_err(|e| bad(format!("field {i}: {e}")));
        out.push(FeedbackRow {
            created_at: DateTime::parse_from_rfc3339(&rec[0])
                .map_err(|e| bad(format!("created_at: {e}")))?
                .with_timezone(&Utc),
            question: rec[1].to_string(),
            answer_preview: rec[2].to_string(),
            answer_length: num(3)?,
            num_references: num(4)?,
            star_rating: rec[5].parse().map_err(|e| bad(format!("star_rating: {e}")))?,
            comment: Some(rec[6].to_string()).filter(|c| !c.is_empty()),
        });
    }
    Ok(out)
}
