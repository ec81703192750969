//! Versioned vector index generations with exact cosine search and MMR.
//!
//! A build writes a complete *staging* generation next to the live one;
//! [`VectorStore::swap_live`] promotes it in one step. Readers pin the live
//! generation for the duration of a call, so every answer comes from exactly
//! one generation.

use std::cmp::Ordering as CmpOrdering;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunker::ChunkRecord;
use crate::embed::{cosine_similarity, EmbeddedChunk};

pub type GenerationId = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("vector store unavailable: {0}")]
    Unavailable(String),
    /// Connection-level failure; the handle is reloaded and the call retried.
    #[error("transient storage error: {0}")]
    Transient(String),
    #[error("query dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("query model {got:?} does not match index model {expected:?}")]
    ModelMismatch { expected: String, got: String },
    #[error("build failed: {0}")]
    Build(String),
    #[error("swap failed: {0}")]
    Swap(String),
    #[error("storage error: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub generation_id: GenerationId,
    pub model_id: String,
    pub dimension: usize,
    pub count: usize,
    pub built_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Staging,
    Live,
    Retired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationInfo {
    #[serde(flatten)]
    pub meta: GenerationMeta,
    pub status: GenerationStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk: ChunkRecord,
    pub similarity: f64,
    #[serde(skip)]
    pub vector: Arc<[f32]>,
    #[serde(skip)]
    pub generation_id: GenerationId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub fetch_k: usize,
    pub lambda: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 8,
            fetch_k: 30,
            lambda: 0.7,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 || self.k > self.fetch_k {
            return Err(format!("need 1 <= k <= fetch_k, got k={} fetch_k={}", self.k, self.fetch_k));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Readiness {
    Ready { generation_id: GenerationId },
    Degraded { reason: String },
}

impl Readiness {
    pub fn is_ready(&self) -> bool {
        matches!(self, Readiness::Ready { .. })
    }
}

/// One query's results, all taken from `generation_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub generation_id: GenerationId,
    pub model_id: String,
    pub results: Vec<ScoredChunk>,
}

/// A loaded, immutable generation that can answer scans.
pub trait GenerationReader: Send + Sync {
    fn meta(&self) -> &GenerationMeta;
    /// The `fetch_k` most similar records, similarity descending, ties by chunk id.
    fn scan(&self, query: &[f32], fetch_k: usize) -> Result<Vec<ScoredChunk>, StoreError>;
}

/// Durable home of generations. Implementations must make `promote` atomic
/// with respect to `live`.
pub trait IndexBackend: Send + Sync {
    fn live(&self) -> Result<Option<GenerationId>, StoreError>;
    fn list(&self) -> Result<Vec<GenerationMeta>, StoreError>;
    /// Persists a complete staging generation under a fresh, larger id.
    fn write_staging(&self, records: &[EmbeddedChunk]) -> Result<GenerationMeta, StoreError>;
    fn open(&self, id: GenerationId) -> Result<Arc<dyn GenerationReader>, StoreError>;
    /// Marks `id` live and returns the previously live id.
    fn promote(&self, id: GenerationId) -> Result<Option<GenerationId>, StoreError>;
    fn delete(&self, id: GenerationId) -> Result<(), StoreError>;
}

/// Records held in memory; scanned exhaustively.
pub struct LoadedGeneration {
    meta: GenerationMeta,
    records: Vec<(ChunkRecord, Arc<[f32]>)>,
}

impl LoadedGeneration {
    pub fn new(meta: GenerationMeta, records: Vec<EmbeddedChunk>) -> Self {
        Self {
            meta,
            records: records
                .into_iter()
                .map(|r| (r.chunk, Arc::from(r.vector)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub(crate) fn rank_order(a: &ScoredChunk, b: &ScoredChunk) -> CmpOrdering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(CmpOrdering::Equal)
        .then_with(|| a.chunk.chunk_id.cmp(&b.chunk.chunk_id))
}

impl GenerationReader for LoadedGeneration {
    fn meta(&self) -> &GenerationMeta {
        &self.meta
    }

    fn scan(&self, query: &[f32], fetch_k: usize) -> Result<Vec<ScoredChunk>, StoreError> {
        if query.len() != self.meta.dimension {
            return Err(StoreError::DimensionMismatch {
                expected: self.meta.dimension,
                got: query.len(),
            });
        }
        let mut scored = Vec::with_capacity(self.records.len());
        for (chunk, vector) in &self.records {
            let similarity = cosine_similarity(query, vector)
                .map_err(|e| StoreError::Storage(format!("{}: {e}", chunk.chunk_id)))?;
            scored.push(ScoredChunk {
                chunk: chunk.clone(),
                similarity,
                vector: vector.clone(),
                generation_id: self.meta.generation_id,
            });
        }
        scored.sort_by(rank_order);
        scored.truncate(fetch_k);
        Ok(scored)
    }
}

fn validate_records(records: &[EmbeddedChunk]) -> Result<(String, usize), StoreError> {
    let first = records
        .first()
        .ok_or_else(|| StoreError::Build("no records to index".into()))?;
    let model_id = first.model_id.clone();
    let dimension = first.vector.len();
    if dimension == 0 {
        return Err(StoreError::Build("zero-dimension vectors".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if r.model_id != model_id {
            return Err(StoreError::Build(format!(
                "mixed embedding models: {model_id:?} and {:?}",
                r.model_id
            )));
        }
        if r.vector.len() != dimension {
            return Err(StoreError::Build(format!(
                "mixed dimensions: {dimension} and {} ({})",
                r.vector.len(),
                r.chunk.chunk_id
            )));
        }
        if !seen.insert(r.chunk.chunk_id.as_str()) {
            return Err(StoreError::Build(format!("duplicate chunk id {}", r.chunk.chunk_id)));
        }
    }
    Ok((model_id, dimension))
}

/// Generations kept in process memory only.
#[derive(Default)]
pub struct MemoryBackend {
    inner: Mutex<MemoryState>,
}

#[derive(Default)]
struct MemoryState {
    generations: BTreeMap<GenerationId, Arc<LoadedGeneration>>,
    live: Option<GenerationId>,
    next_id: GenerationId,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl IndexBackend for MemoryBackend {
    fn live(&self) -> Result<Option<GenerationId>, StoreError> {
        Ok(self.inner.lock().live)
    }

    fn list(&self) -> Result<Vec<GenerationMeta>, StoreError> {
        Ok(self
            .inner
            .lock()
            .generations
            .values()
            .map(|g| g.meta.clone())
            .collect())
    }

    fn write_staging(&self, records: &[EmbeddedChunk]) -> Result<GenerationMeta, StoreError> {
        let (model_id, dimension) = validate_records(records)?;
        let mut state = self.inner.lock();
        state.next_id += 1;
        let meta = GenerationMeta {
            generation_id: state.next_id,
            model_id,
            dimension,
            count: records.len(),
            built_at: Utc::now(),
        };
        let generation = Arc::new(LoadedGeneration::new(meta.clone(), records.to_vec()));
        state.generations.insert(meta.generation_id, generation);
        Ok(meta)
    }

    fn open(&self, id: GenerationId) -> Result<Arc<dyn GenerationReader>, StoreError> {
        self.inner
            .lock()
            .generations
            .get(&id)
            .map(|g| g.clone() as Arc<dyn GenerationReader>)
            .ok_or_else(|| StoreError::Unavailable(format!("generation {id} not found")))
    }

    fn promote(&self, id: GenerationId) -> Result<Option<GenerationId>, StoreError> {
        let mut state = self.inner.lock();
        check_promotable(id, state.generations.contains_key(&id), state.live)?;
        Ok(state.live.replace(id))
    }

    fn delete(&self, id: GenerationId) -> Result<(), StoreError> {
        let mut state = self.inner.lock();
        if state.live == Some(id) {
            return Err(StoreError::Storage(format!("refusing to delete live generation {id}")));
        }
        state.generations.remove(&id);
        Ok(())
    }
}

fn check_promotable(
    id: GenerationId,
    exists: bool,
    live: Option<GenerationId>,
) -> Result<(), StoreError> {
    if !exists {
        return Err(StoreError::Swap(format!("unknown generation {id}")));
    }
    match live {
        Some(l) if l == id => Err(StoreError::Swap(format!("generation {id} is already live"))),
        Some(l) if id < l => Err(StoreError::Swap(format!(
            "generation {id} is retired (live is {l})"
        ))),
        _ => Ok(()),
    }
}

/// On-disk layout: `gen-<id>/{meta.json,records.jsonl}` plus a `LIVE` marker
/// holding the live id, replaced by rename.
pub struct FileBackend {
    dir: PathBuf,
}

const LIVE_MARKER: &str = "LIVE";

impl FileBackend {
    pub fn open_dir(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn gen_dir(&self, id: GenerationId) -> PathBuf {
        self.dir.join(format!("gen-{id}"))
    }

    fn read_meta(&self, id: GenerationId) -> Result<GenerationMeta, StoreError> {
        let path = self.gen_dir(id).join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Storage(format!("{}: {e}", path.display())))
    }

    fn ids(&self) -> Result<Vec<GenerationId>, StoreError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| io_err(&self.dir, e))? {
            let entry = entry.map_err(|e| io_err(&self.dir, e))?;
            let name = entry.file_name();
            if let Some(id) = name
                .to_str()
                .and_then(|n| n.strip_prefix("gen-"))
                .and_then(|n| n.parse::<GenerationId>().ok())
            {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        Ok(ids)
    }
}

fn io_err(path: &Path, e: std::io::Error) -> StoreError {
    let msg = format!("{}: {e}", path.display());
    match e.kind() {
        std::io::ErrorKind::NotFound => StoreError::Unavailable(msg),
        _ => StoreError::Storage(msg),
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    chunk: ChunkRecord,
    vector: Vec<f32>,
}

impl IndexBackend for FileBackend {
    fn live(&self) -> Result<Option<GenerationId>, StoreError> {
        let path = self.dir.join(LIVE_MARKER);
        match fs::read_to_string(&path) {
            Ok(text) => text
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| StoreError::Storage(format!("corrupt LIVE marker {text:?}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path, e)),
        }
    }

    fn list(&self) -> Result<Vec<GenerationMeta>, StoreError> {
        self.ids()?.into_iter().map(|id| self.read_meta(id)).collect()
    }

    fn write_staging(&self, records: &[EmbeddedChunk]) -> Result<GenerationMeta, StoreError> {
        let (model_id, dimension) = validate_records(records)?;
        let id = self.ids()?.last().copied().unwrap_or(0).max(self.live()?.unwrap_or(0)) + 1;
        let meta = GenerationMeta {
            generation_id: id,
            model_id: model_id.clone(),
            dimension,
            count: records.len(),
            built_at: Utc::now(),
        };
        let partial = self.dir.join(format!(".partial-gen-{id}-{:08x}", rand::random::<u32>()));
        let result = (|| {
            fs::create_dir_all(&partial).map_err(|e| io_err(&partial, e))?;
            let path = partial.join("records.jsonl");
            let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            let mut out = BufWriter::new(file);
            for r in records {
                let line = RecordLine {
                    chunk: r.chunk.clone(),
                    vector: r.vector.clone(),
                };
                serde_json::to_writer(&mut out, &line)
                    .map_err(|e| StoreError::Storage(e.to_string()))?;
                out.write_all(b"\n").map_err(|e| io_err(&path, e))?;
            }
            let file = out.into_inner().map_err(|e| io_err(&path, e.into_error()))?;
            file.sync_all().map_err(|e| io_err(&path, e))?;
            let meta_path = partial.join("meta.json");
            let meta_json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
            fs::write(&meta_path, meta_json).map_err(|e| io_err(&meta_path, e))?;
            fs::rename(&partial, self.gen_dir(id)).map_err(|e| io_err(&partial, e))
        })();
        if let Err(e) = result {
            let _ = fs::remove_dir_all(&partial);
            return Err(StoreError::Build(e.to_string()));
        }
        Ok(meta)
    }

    fn open(&self, id: GenerationId) -> Result<Arc<dyn GenerationReader>, StoreError> {
        let meta = self.read_meta(id)?;
        let path = self.gen_dir(id).join("records.jsonl");
        let file = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
        let mut records = Vec::with_capacity(meta.count);
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io_err(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine = serde_json::from_str(&line).map_err(|e| {
                StoreError::Storage(format!("{}:{}: {e}", path.display(), n + 1))
            })?;
            if rec.vector.len() != meta.dimension {
                return Err(StoreError::Storage(format!(
                    "{}:{}: vector dimension {} != {}",
                    path.display(),
                    n + 1,
                    rec.vector.len(),
                    meta.dimension
                )));
            }
            records.push(EmbeddedChunk {
                chunk: rec.chunk,
                vector: rec.vector,
                model_id: meta.model_id.clone(),
            });
        }
        if records.len() != meta.count {
            return Err(StoreError::Storage(format!(
                "generation {id} holds {} records, meta says {}",
                records.len(),
                meta.count
            )));
        }
        Ok(Arc::new(LoadedGeneration::new(meta, records)))
    }

    fn promote(&self, id: GenerationId) -> Result<Option<GenerationId>, StoreError> {
        let exists = self.gen_dir(id).join("meta.json").exists();
        let previous = self.live()?;
        check_promotable(id, exists, previous)?;
        let tmp = self.dir.join(format!(".LIVE.tmp-{:08x}", rand::random::<u32>()));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            writeln!(f, "{id}")?;
            f.sync_all()?;
            fs::rename(&tmp, self.dir.join(LIVE_MARKER))
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            StoreError::Swap(e.to_string())
        })?;
        Ok(previous)
    }

    fn delete(&self, id: GenerationId) -> Result<(), StoreError> {
        if self.live()? == Some(id) {
            return Err(StoreError::Storage(format!("refusing to delete live generation {id}")));
        }
        let dir = self.gen_dir(id);
        match fs::remove_dir_all(&dir) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(io_err(&dir, e)),
        }
    }
}

/// Greedy maximal-marginal-relevance selection.
///
/// The first pick is the most similar candidate; each further pick maximizes
/// `lambda * sim(query, d) - (1 - lambda) * max_{s in selected} sim(d, s)`.
/// Ties go to the smaller chunk id.
pub fn mmr_select(candidates: &[ScoredChunk], k: usize, lambda: f64) -> Vec<ScoredChunk> {
    let take = k.min(candidates.len());
    let mut selected: Vec<usize> = Vec::with_capacity(take);
    let mut remaining: Vec<usize> = (0..candidates.len()).collect();
    // max similarity to anything already selected, per candidate
    let mut redundancy = vec![f64::NEG_INFINITY; candidates.len()];

    while selected.len() < take {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &i) in remaining.iter().enumerate() {
            let c = &candidates[i];
            let score = if selected.is_empty() {
                c.similarity
            } else {
                lambda * c.similarity - (1.0 - lambda) * redundancy[i]
            };
            let better = match best {
                None => true,
                Some((bpos, bscore)) => {
                    score > bscore
                        || (score == bscore
                            && c.chunk.chunk_id < candidates[remaining[bpos]].chunk.chunk_id)
                }
            };
            if better {
                best = Some((pos, score));
            }
        }
        let (pos, _) = best.expect("remaining is non-empty while under k");
        let picked = remaining.swap_remove(pos);
        selected.push(picked);
        for &i in &remaining {
            let sim = cosine_similarity(&candidates[i].vector, &candidates[picked].vector)
                .unwrap_or(0.0);
            if sim > redundancy[i] {
                redundancy[i] = sim;
            }
        }
    }
    selected.into_iter().map(|i| candidates[i].clone()).collect()
}

/// Anything that can answer `retrieve` calls; the pipeline depends on this.
pub trait Retriever: Send + Sync {
    fn retrieve(
        &self,
        model_id: &str,
        query: &[f32],
        cfg: &RetrievalConfig,
    ) -> Result<Retrieval, StoreError>;
}

/// Serving front of an [`IndexBackend`]: the pinned live generation, the
/// single-writer build/swap path and readiness.
pub struct VectorStore {
    backend: Arc<dyn IndexBackend>,
    live: RwLock<Option<Arc<dyn GenerationReader>>>,
    writer: Mutex<()>,
    last_error: RwLock<Option<String>>,
    retain_retired: usize,
    reloads: AtomicU64,
}

impl VectorStore {
    pub const DEFAULT_RETAINED: usize = 1;

    /// Wraps `backend` and attempts an initial load of the live generation.
    pub fn new(backend: Arc<dyn IndexBackend>) -> Self {
        let store = Self {
            backend,
            live: RwLock::new(None),
            writer: Mutex::new(()),
            last_error: RwLock::new(None),
            retain_retired: Self::DEFAULT_RETAINED,
            reloads: AtomicU64::new(0),
        };
        store.refresh();
        store
    }

    pub fn with_retention(mut self, retired: usize) -> Self {
        self.retain_retired = retired;
        self
    }

    pub fn backend(&self) -> &Arc<dyn IndexBackend> {
        &self.backend
    }

    /// How many times the live handle has been (re)loaded.
    pub fn reload_count(&self) -> u64 {
        self.reloads.load(Ordering::SeqCst)
    }

    fn pinned(&self) -> Option<Arc<dyn GenerationReader>> {
        self.live.read().clone()
    }

    pub fn live_meta(&self) -> Option<GenerationMeta> {
        self.pinned().map(|g| g.meta().clone())
    }

    /// Re-reads the live marker and loads a newer generation if one appeared.
    pub fn refresh(&self) -> Readiness {
        match self.reload(false) {
            Ok(_) => *self.last_error.write() = None,
            Err(e) => *self.last_error.write() = Some(e.to_string()),
        }
        self.readiness()
    }

    fn reload(&self, force: bool) -> Result<Option<GenerationId>, StoreError> {
        let Some(id) = self.backend.live()? else {
            *self.live.write() = None;
            return Ok(None);
        };
        let current = self.pinned().map(|g| g.meta().generation_id);
        if force || current != Some(id) {
            let reader = self.backend.open(id)?;
            let mut slot = self.live.write();
            // never move backwards past a generation swapped in meanwhile
            if force || slot.as_ref().is_none_or(|g| g.meta().generation_id <= id) {
                *slot = Some(reader);
                self.reloads.fetch_add(1, Ordering::SeqCst);
            }
        }
        Ok(Some(id))
    }

    pub fn readiness(&self) -> Readiness {
        match self.pinned() {
            Some(g) => Readiness::Ready {
                generation_id: g.meta().generation_id,
            },
            None => Readiness::Degraded {
                reason: self
                    .last_error
                    .read()
                    .clone()
                    .unwrap_or_else(|| "no live index generation".to_string()),
            },
        }
    }

    pub fn build_generation(&self, records: &[EmbeddedChunk]) -> Result<GenerationMeta, StoreError> {
        let _writer = self.writer.lock();
        self.backend.write_staging(records)
    }

    /// Promotes a staging generation; returns the previously live id.
    pub fn swap_live(&self, staging_id: GenerationId) -> Result<Option<GenerationId>, StoreError> {
        let _writer = self.writer.lock();
        let reader = self.backend.open(staging_id).map_err(|e| match e {
            StoreError::Unavailable(m) => StoreError::Swap(m),
            other => other,
        })?;
        let previous = self.backend.promote(staging_id)?;
        *self.live.write() = Some(reader);
        self.reloads.fetch_add(1, Ordering::SeqCst);
        *self.last_error.write() = None;
        self.prune(staging_id)?;
        Ok(previous)
    }

    /// Builds and promotes in one writer critical section.
    pub fn rebuild(&self, records: &[EmbeddedChunk]) -> Result<GenerationMeta, StoreError> {
        let meta = self.build_generation(records)?;
        self.swap_live(meta.generation_id)?;
        Ok(meta)
    }

    fn prune(&self, live: GenerationId) -> Result<(), StoreError> {
        let mut older: Vec<GenerationId> = self
            .backend
            .list()?
            .into_iter()
            .map(|m| m.generation_id)
            .filter(|&id| id < live)
            .collect();
        older.sort_unstable_by(|a, b| b.cmp(a));
        for id in older.into_iter().skip(self.retain_retired) {
            self.backend.delete(id)?;
        }
        Ok(())
    }

    pub fn generations(&self) -> Result<Vec<GenerationInfo>, StoreError> {
        let live = self.backend.live()?;
        Ok(self
            .backend
            .list()?
            .into_iter()
            .map(|meta| {
                let status = match live {
                    Some(l) if meta.generation_id == l => GenerationStatus::Live,
                    Some(l) if meta.generation_id < l => GenerationStatus::Retired,
                    _ => GenerationStatus::Staging,
                };
                GenerationInfo { meta, status }
            })
            .collect())
    }

    /// Runs `op` against the pinned generation; on a transient failure the
    /// handle is reloaded from the backend and `op` retried once.
    fn with_live<T>(
        &self,
        op: impl Fn(&dyn GenerationReader) -> Result<T, StoreError>,
    ) -> Result<T, StoreError> {
        let reader = self
            .pinned()
            .ok_or_else(|| StoreError::Unavailable("no live index generation".into()))?;
        match op(reader.as_ref()) {
            Err(StoreError::Transient(msg)) => {
                tracing::warn!(error = %msg, "transient vector store error, reloading handle");
                self.reload(true)?;
                let reader = self
                    .pinned()
                    .ok_or_else(|| StoreError::Unavailable("no live index generation".into()))?;
                op(reader.as_ref())
            }
            other => other,
        }
    }

    pub fn search_candidates(&self, query: &[f32], fetch_k: usize) -> Result<Vec<ScoredChunk>, StoreError> {
        self.with_live(|g| g.scan(query, fetch_k))
    }

    /// Candidate scan followed by MMR, both against one pinned generation.
    pub fn retrieve_with(&self, query: &[f32], cfg: &RetrievalConfig) -> Result<Retrieval, StoreError> {
        cfg.validate().map_err(StoreError::Storage)?;
        self.with_live(|g| {
            let candidates = g.scan(query, cfg.fetch_k)?;
            Ok(Retrieval {
                generation_id: g.meta().generation_id,
                model_id: g.meta().model_id.clone(),
                results: mmr_select(&candidates, cfg.k, cfg.lambda),
            })
        })
    }

    /// Polls the backend every `interval` until the returned handle is dropped
    /// or aborted.
    pub fn spawn_probe(self: &Arc<Self>, interval: Duration) -> tokio::task::JoinHandle<()> {
        let store = Arc::downgrade(self);
        tokio::spawn(async move {
            let mut ticker = tokio::time::interval(interval);
            ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                ticker.tick().await;
                let Some(store) = store.upgrade() else { break };
                let before = store.readiness();
                let store2 = store.clone();
                let after = tokio::task::spawn_blocking(move || store2.refresh())
                    .await
                    .unwrap_or(before.clone());
                if before != after {
                    tracing::info!(?before, ?after, "vector store readiness changed");
                }
            }
        })
    }
}

impl Retriever for VectorStore {
    fn retrieve(
        &self,
        model_id: &str,
        query: &[f32],
        cfg: &RetrievalConfig,
    ) -> Result<Retrieval, StoreError> {
        cfg.validate().map_err(StoreError::Storage)?;
        self.with_live(|g| {
            if g.meta().model_id != model_id {
                return Err(StoreError::ModelMismatch {
                    expected: g.meta().model_id.clone(),
                    got: model_id.to_string(),
                });
            }
            let candidates = g.scan(query, cfg.fetch_k)?;
            Ok(Retrieval {
                generation_id: g.meta().generation_id,
                model_id: g.meta().model_id.clone(),
                results: mmr_select(&candidates, cfg.k, cfg.lambda),
            })
        })
    }
}
