//! Embedding providers and the cosine kernel.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::ChunkRecord;

pub type Vector = Vec<f32>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    /// Network or server-side failure; worth retrying.
    #[error("embedding transport error: {0}")]
    Transport(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("provider returned an invalid vector: {0}")]
    InvalidVector(String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("embedding provider misconfigured: {0}")]
    Config(String),
}

impl EmbedError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, EmbedError::Transport(_))
    }
}

#[async_trait]
pub trait EmbeddingProvider: Send + Sync {
    fn model_id(&self) -> &str;
    fn dimension(&self) -> usize;
    /// One vector per input, in input order.
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vector>, EmbedError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedChunk {
    pub chunk: ChunkRecord,
    pub vector: Vector,
    pub model_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    /// Three retries, waiting 1s, 2s, then 4s.
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay: Duration::ZERO,
        }
    }

    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedOptions {
    pub batch_size: usize,
    pub retry: RetryPolicy,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            batch_size: 64,
            retry: RetryPolicy::default(),
        }
    }
}

/// The string actually embedded for a chunk: heading path, blank line, text.
pub fn embedding_text(chunk: &ChunkRecord) -> String {
    format!("{}\n\n{}", chunk.section_path.join(" > "), chunk.text)
}

fn check_vectors(vectors: &[Vector], expected_len: usize, dim: usize) -> Result<(), EmbedError> {
    if vectors.len() != expected_len {
        return Err(EmbedError::CountMismatch {
            expected: expected_len,
            got: vectors.len(),
        });
    }
    for v in vectors {
        if v.len() != dim {
            return Err(EmbedError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::InvalidVector("non-finite component".into()));
        }
        if norm(v) == 0.0 {
            return Err(EmbedError::InvalidVector("zero-norm vector".into()));
        }
    }
    Ok(())
}

async fn embed_with_retry(
    provider: &dyn EmbeddingProvider,
    texts: &[String],
    retry: RetryPolicy,
) -> Result<Vec<Vector>, EmbedError> {
    let mut attempt = 0;
    loop {
        match provider.embed(texts).await {
            Err(e) if e.is_retriable() && attempt < retry.max_retries => {
                let wait = retry.delay(attempt);
                tracing::warn!(error = %e, attempt, ?wait, "embedding batch failed, retrying");
                tokio::time::sleep(wait).await;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Embeds `chunks` in order, batch by batch. Any failure fails the whole call.
pub async fn embed_chunks(
    provider: &dyn EmbeddingProvider,
    chunks: &[ChunkRecord],
    opts: &EmbedOptions,
) -> Result<Vec<EmbeddedChunk>, EmbedError> {
    if opts.batch_size == 0 {
        return Err(EmbedError::Config("batch_size must be positive".into()));
    }
    let dim = provider.dimension();
    let mut out = Vec::with_capacity(chunks.len());
    for batch in chunks.chunks(opts.batch_size) {
        let texts: Vec<String> = batch.iter().map(embedding_text).collect();
        let vectors = embed_with_retry(provider, &texts, opts.retry).await?;
        check_vectors(&vectors, batch.len(), dim)?;
        out.extend(batch.iter().zip(vectors).map(|(chunk, vector)| EmbeddedChunk {
            chunk: chunk.clone(),
            vector,
            model_id: provider.model_id().to_string(),
        }));
    }
    Ok(out)
}

pub async fn embed_query(provider: &dyn EmbeddingProvider, query: &str) -> Result<Vector, EmbedError> {
    let query = query.trim();
    if query.is_empty() {
        return Err(EmbedError::EmptyQuery);
    }
    let mut vectors = provider.embed(&[query.to_string()]).await?;
    check_vectors(&vectors, 1, provider.dimension())?;
    Ok(vectors.pop().expect("one vector"))
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityError {
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroNorm,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Cosine similarity in f64, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::DimensionMismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Deterministic offline embedder: character trigrams hashed into buckets,
/// then L2-normalized. Similar spellings give similar vectors.
#[derive(Debug)]
pub struct HashingEmbedder {
    model_id: String,
    dimension: usize,
    calls: AtomicUsize,
}

impl HashingEmbedder {
    pub const MIN_DIMENSION: usize = 8;

    pub fn new(dimension: usize) -> Result<Self, EmbedError> {
        if dimension < Self::MIN_DIMENSION {
            return Err(EmbedError::Config(format!(
                "hashing embedder needs dimension >= {}",
                Self::MIN_DIMENSION
            )));
        }
        Ok(Self {
            model_id: format!("hash-trigram-{dimension}"),
            dimension,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of `embed` invocations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn embed_one(&self, text: &str) -> Vector {
        let mut padded: Vec<char> = vec!['\u{2}', '\u{2}'];
        padded.extend(text.to_lowercase().chars());
        padded.extend(['\u{3}', '\u{3}']);
        let mut acc = vec![0f64; self.dimension];
        let mut buf = [0u8; 12];
        for tri in padded.windows(3) {
            let mut len = 0;
            for c in tri {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            let bucket = (fnv1a(&buf[..len]) % self.dimension as u64) as usize;
            acc[bucket] += 1.0;
        }
        let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        acc.into_iter().map(|x| (x / n) as f32).collect()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[async_trait]
impl EmbeddingProvider for HashingEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vector>, EmbedError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

pub fn deterministic_test_embedder(dimension: usize) -> Result<Arc<HashingEmbedder>, EmbedError> {
    HashingEmbedder::new(dimension).map(Arc::new)
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
pub struct HttpEmbedder {
    client: reqwest::Client,
    endpoint: String,
    api_key: Option<String>,
    model_id: String,
    dimension: usize,
}

impl HttpEmbedder {
    pub fn new(
        base_url: &str,
        api_key: Option<String>,
        model_id: impl Into<String>,
        dimension: usize,
    ) -> Result<Self, EmbedError> {
        if dimension == 0 {
            return Err(EmbedError::Config("dimension must be positive".into()));
        }
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| EmbedError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: format!("{}/embeddings", base_url.trim_end_matches('/')),
            api_key,
            model_id: model_id.into(),
            dimension,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: usize,
    embedding: Vector,
}

#[async_trait]
impl EmbeddingProvider for HttpEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    async fn embed(&self, texts: &[String]) -> Result<Vec<Vector>, EmbedError> {
        let mut req = self.client.post(&self.endpoint).json(&serde_json::json!({
            "model": self.model_id,
            "input": texts,
        }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            let err = format!("HTTP {status}: {}", body.chars().take(200).collect::<String>());
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                EmbedError::Transport(err)
            } else {
                EmbedError::Config(err)
            });
        }
        let mut body: EmbeddingResponse = resp
            .json()
            .await
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        body.data.sort_by_key(|d| d.index);
        Ok(body.data.into_iter().map(|d| d.embedding).collect())
    }
}
