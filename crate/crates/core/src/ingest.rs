//! Scan → diff → chunk → embed → build → swap → manifest.

use std::fmt;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::chunker::{chunk_document, ChunkConfig, ChunkConfigError};
use crate::corpus::{diff_manifests, load_documents, scan_corpus, ChangeSet, CorpusError, Manifest};
use crate::embed::{embed_chunks, EmbedError, EmbedOptions, EmbeddingProvider};
use crate::vecstore::{GenerationId, StoreError, VectorStore};

pub const SKIP_MESSAGE: &str = "no changes, rebuild skipped";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Config(#[from] ChunkConfigError),
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("index build failed: {0}")]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub force: bool,
    pub dry_run: bool,
    pub include: Vec<String>,
    pub chunking: ChunkConfig,
    pub embedding: EmbedOptions,
}

impl IngestOptions {
    fn extensions(&self) -> Vec<&str> {
        if self.include.is_empty() {
            crate::corpus::DEFAULT_EXTENSIONS.to_vec()
        } else {
            self.include.iter().map(String::as_str).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum IngestOutcome {
    Skipped,
    DryRun,
    Rebuilt {
        generation_id: GenerationId,
        previous: Option<GenerationId>,
        documents: usize,
        chunks: usize,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct IngestReport {
    pub changes: ChangeSet,
    pub outcome: IngestOutcome,
    /// Why a rebuild ran with an empty change set.
    pub reason: Option<String>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.outcome {
            IngestOutcome::Skipped => write!(f, "{SKIP_MESSAGE}"),
            IngestOutcome::DryRun => write!(f, "dry run: {}", self.changes),
            IngestOutcome::Rebuilt {
                generation_id,
                documents,
                chunks,
                ..
            } => {
                write!(
                    f,
                    "rebuilt generation {generation_id}: {documents} documents, {chunks} chunks ({}) in {:.2}s",
                    self.changes,
                    self.elapsed.as_secs_f64()
                )?;
                if let Some(reason) = &self.reason {
                    write!(f, " [{reason}]")?;
                }
                Ok(())
            }
        }
    }
}

/// Rebuilds the index when the corpus differs from its manifest. Nothing is
/// written unless every stage succeeds; the manifest is stored last.
pub async fn run_ingest(
    corpus: &Path,
    store: &VectorStore,
    embedder: &dyn EmbeddingProvider,
    opts: &IngestOptions,
) -> Result<IngestReport, IngestError> {
    let started = Instant::now();
    opts.chunking.validate()?;
    let stored = Manifest::load(corpus)?;
    let scanned = scan_corpus(corpus, &opts.extensions())?;
    let changes = diff_manifests(&stored, &scanned);

    let report = |outcome, reason| IngestReport {
        changes: changes.clone(),
        outcome,
        reason,
        elapsed: started.elapsed(),
    };
    if opts.dry_run {
        return Ok(report(IngestOutcome::DryRun, None));
    }

    let reason = if opts.force {
        Some("forced".to_string())
    } else if !changes.is_empty() {
        None
    } else {
        match store.live_meta() {
            None => Some("no live index generation".to_string()),
            Some(meta) if meta.model_id != embedder.model_id() => Some(format!(
                "embedding model changed from {} to {}",
                meta.model_id,
                embedder.model_id()
            )),
            Some(_) => return Ok(report(IngestOutcome::Skipped, None)),
        }
    };

    let documents = load_documents(corpus, &scanned)?;
    let chunks: Vec<_> = documents
        .iter()
        .flat_map(|d| chunk_document(d, &opts.chunking))
        .collect();
    let embedded = embed_chunks(embedder, &chunks, &opts.embedding).await?;
    let previous = store.live_meta().map(|m| m.generation_id);
    let meta = store.rebuild(&embedded)?;
    scanned.store(corpus)?;

    Ok(report(
        IngestOutcome::Rebuilt {
            generation_id: meta.generation_id,
            previous,
            documents: documents.len(),
            chunks: chunks.len(),
        },
        reason,
    ))
}
