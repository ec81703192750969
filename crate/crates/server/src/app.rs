//! HTTP routes, error mapping, rate limiting and security headers.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{ConnectInfo, DefaultBodyLimit, Path, Query, Request, State};
use axum::http::header::{self, HeaderMap, HeaderName, HeaderValue};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, NaiveDate, Utc};
use helpdesk_core::chat::{feedback_csv_string, ChatError, MAX_MESSAGE_CHARS};
use helpdesk_core::desk::HelpDesk;
use helpdesk_core::embed::EmbeddingProvider;
use helpdesk_core::ingest::{run_ingest, IngestOptions};
use helpdesk_core::vecstore::VectorStore;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::config::{LimitsConfig, SecurityConfig};
use crate::ratelimit::{LimitClass, RateLimiter};
use crate::sse;

/// What the admin ingest endpoint rebuilds from.
pub struct IngestContext {
    pub corpus: PathBuf,
    pub store: Arc<VectorStore>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub options: IngestOptions,
    pub running: tokio::sync::Mutex<()>,
}

pub struct AppState {
    pub desk: Arc<HelpDesk>,
    pub limiter: Arc<RateLimiter>,
    pub limits: LimitsConfig,
    pub security: SecurityConfig,
    pub admin_token: Option<String>,
    pub static_dir: Option<PathBuf>,
    pub ingest: Option<IngestContext>,
}

impl AppState {
    pub fn new(desk: Arc<HelpDesk>, limits: LimitsConfig) -> Self {
        let limiter = Arc::new(RateLimiter::new(limits.chat_per_minute, limits.feedback_per_minute));
        Self {
            desk,
            limiter,
            limits,
            security: SecurityConfig::default(),
            admin_token: None,
            static_dir: None,
            ingest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

impl From<ChatError> for ApiError {
    fn from(e: ChatError) -> Self {
        let (status, code) = match &e {
            ChatError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ChatError::CapExceeded { .. } => (StatusCode::CONFLICT, "thread_cap_exceeded"),
            ChatError::MessageTooLong { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "message_too_long"),
            ChatError::EmptyMessage => (StatusCode::UNPROCESSABLE_ENTITY, "empty_message"),
            ChatError::Conflict(_) => (StatusCode::CONFLICT, "reply_pending"),
            ChatError::State(_) => (StatusCode::CONFLICT, "invalid_state"),
            ChatError::Validation(_) => (StatusCode::UNPROCESSABLE_ENTITY, "validation_failed"),
            ChatError::Storage(_) => (StatusCode::SERVICE_UNAVAILABLE, "storage_unavailable"),
        };
        if matches!(e, ChatError::Storage(_)) {
            tracing::error!(error = %e, "chat storage failure");
        }
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let code = match r.status() {
            StatusCode::PAYLOAD_TOO_LARGE => "body_too_large",
            StatusCode::UNPROCESSABLE_ENTITY => "invalid_body",
            StatusCode::UNSUPPORTED_MEDIA_TYPE => "unsupported_media_type",
            _ => "malformed_body",
        };
        ApiError::new(r.status(), code, r.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload.map(|Json(v)| v).map_err(ApiError::from)
}

pub fn router(state: Arc<AppState>) -> Router {
    let chat_class = Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{session_id}/thread", post(create_thread))
        .route("/api/chat", post(chat))
        .route_layer(middleware::from_fn_with_state(state.clone(), limit_chat));
    let feedback_class = Router::new()
        .route("/api/feedback", post(feedback))
        .route_layer(middleware::from_fn_with_state(state.clone(), limit_feedback));
    let open = Router::new()
        .route("/api/health", get(health))
        .route("/api/metrics", get(metrics))
        .route("/api/session/{session_id}", get(get_session))
        .route("/api/session/{session_id}/thread/{thread_id}", get(get_thread))
        .route("/api/feedback/export", get(export_feedback))
        .route("/api/admin/policy/reload", post(reload_policy))
        .route("/api/admin/ingest", post(ingest));

    let mut app = Router::new().merge(chat_class).merge(feedback_class).merge(open);
    app = match &state.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.fallback(not_found),
    };
    app.layer(DefaultBodyLimit::max(state.limits.max_body_bytes))
        .layer(middleware::from_fn_with_state(state.clone(), security_headers))
        .with_state(state)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

/// Client identity for rate limiting: the trusted proxy header when
/// configured (its last hop), else the peer address.
pub fn client_key(headers: &HeaderMap, peer: Option<SocketAddr>, trusted_header: Option<&str>) -> String {
    if let Some(name) = trusted_header {
        let forwarded = headers
            .get_all(name)
            .iter()
            .filter_map(|v| v.to_str().ok())
            .flat_map(|v| v.split(','))
            .map(str::trim).rfind(|v| !v.is_empty());
        if let Some(ip) = forwarded {
            return ip.to_string();
        }
    }
    peer.map(|p| p.ip().to_string()).unwrap_or_else(|| "unknown".into())
}

async fn apply_limit(state: &AppState, class: LimitClass, req: Request, next: Next) -> Response {
    let peer = req.extensions().get::<ConnectInfo<SocketAddr>>().map(|c| c.0);
    let key = client_key(req.headers(), peer, state.limits.trusted_proxy_header.as_deref());
    match state.limiter.check(class, &key) {
        Ok(()) => next.run(req).await,
        Err(rejected) => {
            let secs = rejected.retry_after_secs();
            let mut resp = ApiError::new(
                StatusCode::TOO_MANY_REQUESTS,
                "rate_limited",
                format!(
                    "limit of {} requests per minute reached, retry in {secs}s",
                    state.limiter.limit(class)
                ),
            )
            .into_response();
            resp.headers_mut()
                .insert(header::RETRY_AFTER, HeaderValue::from(secs));
            resp
        }
    }
}

async fn limit_chat(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    apply_limit(&state, LimitClass::Chat, req, next).await
}

async fn limit_feedback(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    apply_limit(&state, LimitClass::Feedback, req, next).await
}

async fn security_headers(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let mut resp = next.run(req).await;
    let headers = resp.headers_mut();
    let mut set = |name: HeaderName, value: String| {
        if let Ok(v) = HeaderValue::from_str(&value) {
            headers.entry(name).or_insert(v);
        }
    };
    set(header::CONTENT_SECURITY_POLICY, state.security.content_security_policy.clone());
    set(
        header::STRICT_TRANSPORT_SECURITY,
        format!("max-age={}; includeSubDomains", state.security.hsts_max_age_secs),
    );
    set(header::X_CONTENT_TYPE_OPTIONS, "nosniff".into());
    set(header::X_FRAME_OPTIONS, "DENY".into());
    set(header::REFERRER_POLICY, "no-referrer".into());
    resp
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

async fn create_session(State(state): State<Arc<AppState>>) -> ApiResult<Json<SessionCreated>> {
    let session = state.desk.chat().create_session()?;
    Ok(Json(SessionCreated {
        session_id: session.session_id,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ThreadCreated {
    pub thread_id: String,
}

async fn create_thread(
    State(state): State<Arc<AppState>>,
    Path(session_id): Path<String>,
) -> ApiResult<Json<ThreadCreated>> {
    let thread_id = state.desk.chat().create_thread(&session_id)?;
    Ok(Json(ThreadCreated { thread_id }))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(session_id): Path<String>) -> ApiResult<Response> {
    let chat = state.desk.chat();
    let session = chat.session(&session_id)?;
    let threads = chat.session_threads(&session_id)?;
    Ok(Json(json!({
        "session_id": session.session_id,
        "created_at": session.created_at,
        "thread_count": session.thread_count,
        "threads": threads,
    }))
    .into_response())
}

async fn get_thread(
    State(state): State<Arc<AppState>>,
    Path((session_id, thread_id)): Path<(String, String)>,
) -> ApiResult<Response> {
    let thread = state.desk.chat().thread(&thread_id)?;
    if thread.session_id != session_id {
        return Err(ChatError::NotFound("thread".into()).into());
    }
    Ok(Json(thread).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ChatRequest {
    pub session_id: String,
    pub thread_id: String,
    pub message: String,
}

async fn chat(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<ChatRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let req = body(payload)?;
    let len = req.message.chars().count();
    if len > MAX_MESSAGE_CHARS {
        return Err(ChatError::MessageTooLong {
            len,
            limit: MAX_MESSAGE_CHARS,
        }
        .into());
    }
    let chat = state.desk.chat();
    if chat.thread_session(&req.thread_id)? != req.session_id {
        return Err(ChatError::NotFound("thread".into()).into());
    }
    let handle = state.desk.start_exchange(&req.thread_id, &req.message)?;
    let user_message_id = handle.user_message_id.clone();
    let mut resp = sse::exchange_body(handle).into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("text/event-stream"));
    headers.insert(header::CACHE_CONTROL, HeaderValue::from_static("no-cache"));
    headers.insert(HeaderName::from_static("x-accel-buffering"), HeaderValue::from_static("no"));
    if let Ok(v) = HeaderValue::from_str(&user_message_id) {
        headers.insert(HeaderName::from_static("x-user-message-id"), v);
    }
    Ok(resp)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub thread_id: String,
    pub star_rating: i64,
    #[serde(default)]
    pub comment: Option<String>,
}

async fn feedback(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<FeedbackRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let req = body(payload)?;
    let record = state
        .desk
        .chat()
        .record_feedback(&req.thread_id, req.star_rating, req.comment.as_deref())?;
    Ok(Json(json!({
        "feedback_id": record.feedback_id,
        "answer_preview": record.answer_preview,
        "answer_length": record.answer_length,
        "num_references": record.num_references,
        "star_rating": record.star_rating,
        "created_at": record.created_at,
    }))
    .into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    Json(state.desk.health()).into_response()
}

async fn metrics(State(state): State<Arc<AppState>>) -> Response {
    Json(state.desk.pipeline().metrics().snapshot()).into_response()
}

fn require_admin(state: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let Some(expected) = state.admin_token.as_deref() else {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "admin_disabled",
            "admin endpoints are disabled; set admin_token in the config",
        ));
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or("");
    let same = given.len() == expected.len()
        && given
            .bytes()
            .zip(expected.bytes())
            .fold(0u8, |acc, (a, b)| acc | (a ^ b))
            == 0;
    if same {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong admin token"))
    }
}

/// RFC 3339 timestamp or a bare `YYYY-MM-DD` (midnight UTC).
pub fn parse_time_bound(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .ok()
        .or_else(|| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .map(|t| t.and_utc())
        })
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    since: Option<String>,
    until: Option<String>,
}

async fn export_feedback(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<ExportQuery>,
) -> ApiResult<Response> {
    require_admin(&state, &headers)?;
    let bound = |v: &Option<String>, name: &str| -> ApiResult<Option<DateTime<Utc>>> {
        v.as_deref()
            .map(|s| {
                parse_time_bound(s).ok_or_else(|| {
                    ApiError::new(
                        StatusCode::UNPROCESSABLE_ENTITY,
                        "invalid_time",
                        format!("{name} must be RFC 3339 or YYYY-MM-DD"),
                    )
                })
            })
            .transpose()
    };
    let rows = state
        .desk
        .chat()
        .export_feedback(bound(&q.since, "since")?, bound(&q.until, "until")?)?;
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8"),
            (header::CONTENT_DISPOSITION, "attachment; filename=\"feedback.csv\""),
        ],
        feedback_csv_string(&rows),
    )
        .into_response())
}

async fn reload_policy(State(state): State<Arc<AppState>>, headers: HeaderMap) -> ApiResult<Response> {
    require_admin(&state, &headers)?;
    match state.desk.reload_policy() {
        Ok(Some(version)) => Ok(Json(json!({ "reloaded": true, "version": version })).into_response()),
        Ok(None) => Ok(Json(json!({ "reloaded": false, "version": state.desk.pipeline().policy().version }))
            .into_response()),
        Err(e) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_policy", e.to_string())),
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct IngestRequest {
    force: bool,
    dry_run: bool,
}

async fn ingest(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    payload: Result<Json<IngestRequest>, JsonRejection>,
) -> ApiResult<Response> {
    require_admin(&state, &headers)?;
    let req = match payload {
        Ok(Json(r)) => r,
        Err(JsonRejection::MissingJsonContentType(_)) => IngestRequest::default(),
        Err(e) => return Err(e.into()),
    };
    let Some(ctx) = &state.ingest else {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "ingest_unavailable", "no corpus configured"));
    };
    let _running = ctx
        .running
        .try_lock()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, "ingest_running", "an ingest is already running"))?;
    let opts = IngestOptions {
        force: req.force,
        dry_run: req.dry_run,
        ..ctx.options.clone()
    };
    match run_ingest(&ctx.corpus, &ctx.store, ctx.embedder.as_ref(), &opts).await {
        Ok(report) => Ok(Json(json!({
            "summary": report.to_string(),
            "report": report,
        }))
        .into_response()),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "ingest_failed", e.to_string())),
    }
}
