//! TOML service configuration and construction of the runtime pieces.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use helpdesk_core::chat::{ChatError, ChatStore};
use helpdesk_core::chunker::ChunkConfig;
use helpdesk_core::desk::HelpDesk;
use helpdesk_core::embed::{EmbedError, EmbedOptions, EmbeddingProvider, HashingEmbedder, HttpEmbedder, RetryPolicy};
use helpdesk_core::rag::{
    ChatProvider, ExtractiveChatProvider, HttpChatProvider, LlmRoles, PolicyError, PolicyPrompt, ProviderError,
    RagPipeline,
};
use helpdesk_core::vecstore::{FileBackend, IndexBackend, MemoryBackend, RetrievalConfig, StoreError, VectorStore};
use serde::Deserialize;
use thiserror::Error;

pub const API_KEY_ENV: &str = "HELPDESK_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config value {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("{provider} provider needs an API key: set {env} or `api_key` in the config")]
    MissingCredential { provider: &'static str, env: String },
    #[error("index backend {0:?} is not available in this build; use \"file\" or \"memory\"")]
    UnsupportedBackend(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Chat(#[from] ChatError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen: SocketAddr,
    pub corpus_dir: PathBuf,
    /// Optional policy file; the built-in policy is used when unset.
    pub policy_path: Option<PathBuf>,
    /// Directory served at `/` for the browser client.
    pub static_dir: Option<PathBuf>,
    /// Bearer token for the admin endpoints; they are disabled when unset.
    pub admin_token: Option<String>,
    pub index: IndexConfig,
    pub chat_store: ChatStoreConfig,
    pub embedding: EmbeddingConfig,
    pub llm: LlmConfig,
    pub limits: LimitsConfig,
    pub security: SecurityConfig,
    pub retrieval: RetrievalConfig,
    pub chunking: ChunkConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".parse().expect("valid address"),
            corpus_dir: PathBuf::from("corpus"),
            policy_path: None,
            static_dir: None,
            admin_token: None,
            index: IndexConfig::default(),
            chat_store: ChatStoreConfig::default(),
            embedding: EmbeddingConfig::default(),
            llm: LlmConfig::default(),
            limits: LimitsConfig::default(),
            security: SecurityConfig::default(),
            retrieval: RetrievalConfig::default(),
            chunking: ChunkConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    /// "file" or "memory".
    pub backend: String,
    pub dir: PathBuf,
    pub connection: Option<String>,
    pub retain_generations: usize,
    pub probe_interval_secs: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            backend: "file".into(),
            dir: PathBuf::from("data/index"),
            connection: None,
            retain_generations: VectorStore::DEFAULT_RETAINED,
            probe_interval_secs: 2.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatStoreConfig {
    /// SQLite file, or ":memory:".
    pub path: String,
    pub history_capacity: usize,
}

impl Default for ChatStoreConfig {
    fn default() -> Self {
        Self {
            path: "data/chat.db".into(),
            history_capacity: helpdesk_core::chat::HISTORY_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// "hashing" (local, deterministic) or "openai" (any compatible endpoint).
    pub provider: String,
    pub dimension: usize,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub batch_size: usize,
    pub max_retries: u32,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: "hashing".into(),
            dimension: 256,
            base_url: None,
            model: None,
            api_key: None,
            batch_size: 64,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    /// "extractive" (local, no model) or "openai".
    pub provider: String,
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Model for condensing and the guardrail; defaults to `model`.
    pub condense_model: Option<String>,
    pub api_key: Option<String>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            provider: "extractive".into(),
            base_url: None,
            model: None,
            condense_model: None,
            api_key: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsConfig {
    pub max_body_bytes: usize,
    pub chat_per_minute: usize,
    pub feedback_per_minute: usize,
    pub answer_timeout_secs: u64,
    pub shutdown_grace_secs: u64,
    /// Header carrying the client address when behind a trusted proxy,
    /// e.g. "x-forwarded-for". Unset means the socket peer address is used.
    pub trusted_proxy_header: Option<String>,
}

impl Default for LimitsConfig {
    fn default() -> Self {
        Self {
            max_body_bytes: 65_536,
            chat_per_minute: 10,
            feedback_per_minute: 20,
            answer_timeout_secs: 300,
            shutdown_grace_secs: 30,
            trusted_proxy_header: None,
        }
    }
}

pub const DEFAULT_CSP: &str = "default-src 'self'; script-src 'self'; style-src 'self'; img-src 'self' data:; \
connect-src 'self'; object-src 'none'; base-uri 'self'; form-action 'self'; frame-ancestors 'none'";

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecurityConfig {
    pub content_security_policy: String,
    pub hsts_max_age_secs: u64,
}

impl Default for SecurityConfig {
    fn default() -> Self {
        Self {
            content_security_policy: DEFAULT_CSP.into(),
            hsts_max_age_secs: 31_536_000,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_relative_to(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Relative paths in a config file are taken relative to that file.
    fn resolve_relative_to(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_dir);
        fix(&mut self.index.dir);
        if let Some(p) = self.policy_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.static_dir.as_mut() {
            fix(p);
        }
        if self.chat_store.path != ":memory:" && Path::new(&self.chat_store.path).is_relative() {
            self.chat_store.path = base.join(&self.chat_store.path).display().to_string();
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field, reason: &str| ConfigError::Invalid {
            field,
            reason: reason.to_string(),
        };
        self.retrieval.validate().map_err(|r| invalid("retrieval", &r))?;
        self.chunking
            .validate()
            .map_err(|e| invalid("chunking", &e.to_string()))?;
        if self.limits.max_body_bytes == 0 {
            return Err(invalid("limits.max_body_bytes", "must be positive"));
        }
        if self.limits.chat_per_minute == 0 || self.limits.feedback_per_minute == 0 {
            return Err(invalid("limits", "rate limits must be positive"));
        }
        if self.limits.answer_timeout_secs == 0 {
            return Err(invalid("limits.answer_timeout_secs", "must be positive"));
        }
        if !(self.index.probe_interval_secs > 0.0 && self.index.probe_interval_secs.is_finite()) {
            return Err(invalid("index.probe_interval_secs", "must be a positive number"));
        }
        if self.embedding.batch_size == 0 {
            return Err(invalid("embedding.batch_size", "must be positive"));
        }
        Ok(())
    }

    pub fn answer_timeout(&self) -> Duration {
        Duration::from_secs(self.limits.answer_timeout_secs)
    }

    pub fn probe_interval(&self) -> Duration {
        Duration::from_secs_f64(self.index.probe_interval_secs)
    }

    pub fn embed_options(&self) -> EmbedOptions {
        EmbedOptions {
            batch_size: self.embedding.batch_size,
            retry: RetryPolicy {
                max_retries: self.embedding.max_retries,
                ..RetryPolicy::default()
            },
        }
    }
}

/// Environment wins over the config file.
fn credential(from_file: &Option<String>, env: &dyn Fn(&str) -> Option<String>) -> Option<String> {
    env(API_KEY_ENV)
        .filter(|v| !v.trim().is_empty())
        .or_else(|| from_file.clone().filter(|v| !v.trim().is_empty()))
}

fn required<'a>(value: &'a Option<String>, field: &'static str) -> Result<&'a str, ConfigError> {
    value.as_deref().filter(|v| !v.is_empty()).ok_or(ConfigError::Invalid {
        field,
        reason: "required for the openai provider".into(),
    })
}

pub fn build_embedder(
    cfg: &EmbeddingConfig,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<Arc<dyn EmbeddingProvider>, ConfigError> {
    match cfg.provider.as_str() {
        "hashing" => Ok(Arc::new(HashingEmbedder::new(cfg.dimension)?)),
        "openai" => {
            let key = credential(&cfg.api_key, env).ok_or_else(|| ConfigError::MissingCredential {
                provider: "embedding",
                env: API_KEY_ENV.into(),
            })?;
            let base = required(&cfg.base_url, "embedding.base_url")?;
            let model = required(&cfg.model, "embedding.model")?;
            Ok(Arc::new(HttpEmbedder::new(base, Some(key), model, cfg.dimension)?))
        }
        other => Err(ConfigError::Invalid {
            field: "embedding.provider",
            reason: format!("unknown provider {other:?}"),
        }),
    }
}

pub fn build_roles(cfg: &LlmConfig, env: &dyn Fn(&str) -> Option<String>) -> Result<LlmRoles, ConfigError> {
    match cfg.provider.as_str() {
        "extractive" => {
            let p: Arc<dyn ChatProvider> = Arc::new(ExtractiveChatProvider);
            Ok(LlmRoles::new(p.clone(), p))
        }
        "openai" => {
            let key = credential(&cfg.api_key, env).ok_or_else(|| ConfigError::MissingCredential {
                provider: "llm",
                env: API_KEY_ENV.into(),
            })?;
            let base = required(&cfg.base_url, "llm.base_url")?;
            let model = required(&cfg.model, "llm.model")?;
            let condense = cfg.condense_model.as_deref().unwrap_or(model);
            let qa = Arc::new(HttpChatProvider::new(base, Some(key.clone()), model)?);
            let condense = Arc::new(HttpChatProvider::new(base, Some(key), condense)?);
            Ok(LlmRoles::new(qa, condense))
        }
        other => Err(ConfigError::Invalid {
            field: "llm.provider",
            reason: format!("unknown provider {other:?}"),
        }),
    }
}

pub fn build_store(cfg: &IndexConfig) -> Result<Arc<VectorStore>, ConfigError> {
    let backend: Arc<dyn IndexBackend> = match cfg.backend.as_str() {
        "file" => Arc::new(FileBackend::open_dir(&cfg.dir)?),
        "memory" => Arc::new(MemoryBackend::new()),
        other => return Err(ConfigError::UnsupportedBackend(other.to_string())),
    };
    Ok(Arc::new(VectorStore::new(backend).with_retention(cfg.retain_generations)))
}

pub fn build_chat_store(cfg: &ChatStoreConfig) -> Result<Arc<ChatStore>, ConfigError> {
    let store = if cfg.path == ":memory:" {
        ChatStore::open_in_memory()?
    } else {
        let path = Path::new(&cfg.path);
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| ConfigError::Chat(ChatError::Storage(e.to_string())))?;
        }
        ChatStore::open(path)?
    };
    Ok(Arc::new(store.with_history_capacity(cfg.history_capacity)))
}

pub fn load_policy(cfg: &Config) -> Result<PolicyPrompt, ConfigError> {
    Ok(match &cfg.policy_path {
        Some(path) => PolicyPrompt::load(path)?,
        None => PolicyPrompt::builtin(),
    })
}

/// Everything `serve` needs, built from one config.
pub struct Runtime {
    pub desk: Arc<HelpDesk>,
    pub store: Arc<VectorStore>,
    pub embedder: Arc<dyn EmbeddingProvider>,
}

pub fn build_runtime(cfg: &Config, env: &dyn Fn(&str) -> Option<String>) -> Result<Runtime, ConfigError> {
    cfg.validate()?;
    let policy = load_policy(cfg)?;
    let embedder = build_embedder(&cfg.embedding, env)?;
    let roles = build_roles(&cfg.llm, env)?;
    let store = build_store(&cfg.index)?;
    let chat = build_chat_store(&cfg.chat_store)?;
    let pipeline = Arc::new(
        RagPipeline::new(roles, policy, embedder.clone(), store.clone()).with_retrieval(cfg.retrieval),
    );
    let mut desk = HelpDesk::new(chat, pipeline)
        .with_store(store.clone())
        .with_timeout(cfg.answer_timeout());
    if let Some(path) = &cfg.policy_path {
        desk = desk.with_policy_path(path);
    }
    Ok(Runtime {
        desk: Arc::new(desk),
        store,
        embedder,
    })
}

pub fn process_env(name: &str) -> Option<String> {
    std::env::var(name).ok()
}
