//! Acceptance criteria, one test per criterion. Each prints a single
//! `PASS`/`FAIL` line to stderr, visible without `--nocapture`.

mod support;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::future::Future;
use std::io::Write as _;
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::FutureExt;
use helpdesk_client::{ChatEvent, ClientError};
use helpdesk_core::chat::{
    feedback_csv_string, parse_feedback_csv, ChatStore, MessageStatus, Role, MAX_MESSAGE_CHARS,
    MAX_THREADS_PER_SESSION,
};
use helpdesk_core::chunker::{chunk_document, split_markdown, ChunkConfig, ChunkRecord};
use helpdesk_core::corpus::{load_documents, scan_corpus, sha256_hex, SourceDocument, DEFAULT_EXTENSIONS};
use helpdesk_core::desk::{ExchangeEvent, FailureKind, HelpDesk};
use helpdesk_core::embed::{embed_chunks, EmbedOptions, EmbeddedChunk, EmbeddingProvider, HashingEmbedder};
use helpdesk_core::ingest::{run_ingest, IngestOutcome, SKIP_MESSAGE};
use helpdesk_core::rag::{LlmRoles, PolicyPrompt, RagPipeline, ScriptedChatProvider, Turn};
use helpdesk_core::vecstore::{
    mmr_select, FileBackend, GenerationId, GenerationMeta, GenerationReader, IndexBackend, MemoryBackend,
    RetrievalConfig, ScoredChunk, StoreError, VectorStore,
};
use helpdesk_server::app::AppState;
use helpdesk_server::config::{Config, LimitsConfig};
use helpdesk_server::sse::parse_frames;
use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use support::*;

type Outcome = Result<(), String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn report(id: u32, name: &str, outcome: Outcome) {
    let line = match &outcome {
        Ok(()) => format!("acceptance C{id:02} PASS {name}"),
        Err(e) => format!("acceptance C{id:02} FAIL {name}: {e}"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
    if let Err(e) = outcome {
        panic!("C{id:02} {name}: {e}");
    }
}

async fn criterion<F: Future<Output = Outcome>>(id: u32, name: &str, body: F) {
    let outcome = match AssertUnwindSafe(body).catch_unwind().await {
        Ok(o) => o,
        Err(p) => Err(panic_text(p)),
    };
    report(id, name, outcome);
}

fn criterion_sync(id: u32, name: &str, body: impl FnOnce() -> Outcome) {
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| Err(panic_text(p)));
    report(id, name, outcome);
}

fn source_doc(id: &str, text: &str) -> SourceDocument {
    SourceDocument {
        doc_id: id.into(),
        title: id.into(),
        relative_path: id.into(),
        content_hash: sha256_hex(text.as_bytes()),
        markdown_text: text.into(),
        byte_length: text.len(),
    }
}

// ---------------------------------------------------------------- C01

const WORDS: &[&str] = &[
    "deposit", "map", "model", "entry", "validation", "report", "cryo-EM", "ligand", "chain", "résumé", "結晶",
    "sequence", "archive", "release", "hold", "citation", "x-ray", "density", "μ", "fit",
];

fn random_markdown(rng: &mut StdRng) -> String {
    let mut out = String::new();
    for _ in 0..rng.gen_range(0..12) {
        match rng.gen_range(0..10) {
            0 | 1 => {
                let level = rng.gen_range(1..=6);
                out.push_str(&format!("{} {}\n", "#".repeat(level), WORDS.choose(rng).unwrap()));
            }
            2 => {
                out.push_str("```\n# not a heading\n");
                for _ in 0..rng.gen_range(0..30) {
                    out.push_str("let x = 1;\n");
                }
                out.push_str("```\n");
            }
            3 => {
                // no separators at all
                let c = *['a', 'é', 'z'].choose(rng).unwrap();
                out.extend(std::iter::repeat_n(c, rng.gen_range(1..5000)));
                out.push('\n');
            }
            4 => {
                for _ in 0..rng.gen_range(1..20) {
                    out.push_str(&format!("- {}\n", WORDS.choose(rng).unwrap()));
                }
            }
            _ => {
                let sentences = rng.gen_range(1..80);
                for _ in 0..sentences {
                    let n = rng.gen_range(1..25);
                    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
                    out.push_str(&words.join(" "));
                    out.push_str(if rng.gen_bool(0.2) { ".\n" } else { ". " });
                }
                out.push_str("\n\n");
            }
        }
    }
    out
}

/// Char positions that belong to ATX heading lines outside ``` fences.
fn heading_positions(text: &str) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut in_fence = false;
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let n = line.chars().count();
        if line.starts_with("```") {
            in_fence = !in_fence;
        } else if !in_fence {
            let hashes = line.chars().take_while(|&c| c == '#').count();
            if (1..=6).contains(&hashes) && line[hashes..].starts_with([' ', '\n']) {
                out.extend(pos..pos + n);
            }
        }
        pos += n;
    }
    out
}

/// Where a piece sits in its segment, in chars: the occurrence after the
/// previous piece that reaches furthest while staying contiguous with it
/// (overlapping, or separated only by whitespace); otherwise the next one.
fn place_piece(seg: &SegIndex, piece: &str, prev: Option<(usize, usize)>) -> Option<usize> {
    let SegIndex { text: seg, bounds, chars } = seg;
    let at = |i: usize| seg[bounds[i]..].starts_with(piece);
    let Some((pstart, pend)) = prev else {
        return seg.find(piece).map(|b| seg[..b].chars().count());
    };
    let gap_end = pend + chars[pend..].iter().take_while(|c| c.is_whitespace()).count();
    if let Some(i) = (pstart + 1..=gap_end.min(chars.len())).rev().find(|&i| at(i)) {
        return Some(i);
    }
    let from = bounds[(pstart + 1).min(chars.len())];
    seg[from..].find(piece).map(|b| pstart + 1 + seg[from..from + b].chars().count())
}

struct SegIndex<'a> {
    text: &'a str,
    bounds: Vec<usize>,
    chars: Vec<char>,
}

impl<'a> SegIndex<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            text,
            bounds: text.char_indices().map(|(b, _)| b).chain([text.len()]).collect(),
            chars: text.chars().collect(),
        }
    }
}

fn check_chunk_invariants(doc: &SourceDocument, chunks: &[ChunkRecord]) -> Outcome {
    let body: Vec<char> = doc.markdown_text.chars().collect();
    let segments = split_markdown(doc);
    let indexed: Vec<SegIndex> = segments.iter().map(|s| SegIndex::new(&s.text)).collect();
    for c in chunks {
        check!(c.char_count > 0 && c.char_count <= 2000, "chunk length {} out of range", c.char_count);
        check!(c.char_count == c.text.chars().count(), "char_count mismatch");
    }
    let mut covered = vec![false; body.len()];
    let mut seg = 0usize;
    // (start, end) of the previous piece in the current segment, in chars
    let mut prev: Option<(usize, usize)> = None;
    for c in chunks {
        loop {
            check!(seg < segments.len(), "chunk {} is not inside any single segment", c.chunk_id);
            let s = &segments[seg];
            if s.section_path == c.section_path {
                if let Some(at) = place_piece(&indexed[seg], &c.text, prev) {
                    let start = s.start_offset + at;
                    covered[start..start + c.char_count].iter_mut().for_each(|x| *x = true);
                    prev = Some((at, at + c.char_count));
                    break;
                }
            }
            seg += 1;
            prev = None;
        }
    }
    let headings = heading_positions(&doc.markdown_text);
    for (i, ch) in body.iter().enumerate() {
        if !ch.is_whitespace() && !headings.contains(&i) && !covered[i] {
            return Err(format!("char {i} ({ch:?}) of {} not covered", doc.doc_id));
        }
    }
    Ok(())
}

fn sliding_window_oracle(text: &str, size: usize, overlap: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + size).min(chars.len());
        out.push(chars[start..end].iter().collect());
        if end == chars.len() {
            return out;
        }
        start += size - overlap;
    }
}

#[test]
fn c01_chunking_property_suite() {
    criterion_sync(1, "chunking property suite", || {
        let started = Instant::now();
        let cfg = ChunkConfig::default();
        let mut rng = StdRng::seed_from_u64(0xC401);
        let mut total = 0;
        for i in 0..1000 {
            let doc = source_doc(&format!("doc{i}.md"), &random_markdown(&mut rng));
            let chunks = chunk_document(&doc, &cfg);
            total += chunks.len();
            check_chunk_invariants(&doc, &chunks)?;
        }
        check!(total > 1000, "generator too weak: only {total} chunks");

        let text = "k".repeat(4600);
        let chunks = chunk_document(&source_doc("flat.md", &text), &cfg);
        let expected = sliding_window_oracle(&text, 2000, 400);
        check!(expected.len() == 3, "oracle gave {} windows", expected.len());
        let got: Vec<&str> = chunks.iter().map(|c| c.text.as_str()).collect();
        check!(got == expected, "4600-char case differs from the sliding-window oracle");
        check!(chunks.iter().map(|c| c.seq).eq(0..3), "seq must be 0,1,2");

        let elapsed = started.elapsed();
        check!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
        Ok(())
    });
}

// ---------------------------------------------------------------- C02

fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
    let norm = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    (dot / (norm(a) * norm(b))).clamp(-1.0, 1.0)
}

fn oracle_mmr(c: &[ScoredChunk], k: usize, lambda: f64) -> Vec<String> {
    let mut picked: Vec<usize> = Vec::new();
    while picked.len() < k.min(c.len()) {
        let mut best: Option<(f64, usize)> = None;
        for i in (0..c.len()).filter(|i| !picked.contains(i)) {
            let score = if picked.is_empty() {
                c[i].similarity
            } else {
                let red = picked
                    .iter()
                    .map(|&s| oracle_cosine(&c[i].vector, &c[s].vector))
                    .fold(f64::NEG_INFINITY, f64::max);
                lambda * c[i].similarity - (1.0 - lambda) * red
            };
            let wins = match best {
                None => true,
                Some((b, j)) => score > b || (score == b && c[i].chunk.chunk_id < c[j].chunk.chunk_id),
            };
            if wins {
                best = Some((score, i));
            }
        }
        picked.push(best.unwrap().1);
    }
    picked.into_iter().map(|i| c[i].chunk.chunk_id.clone()).collect()
}

fn random_vector(rng: &mut StdRng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-3) {
            return v;
        }
    }
}

#[test]
fn c02_mmr_oracle_equivalence() {
    criterion_sync(2, "MMR oracle equivalence", || {
        let started = Instant::now();
        let mut rng = StdRng::seed_from_u64(0x3312);
        for case in 0..500 {
            let dim = rng.gen_range(2..=16);
            let n = rng.gen_range(1..=50);
            let query = random_vector(&mut rng, dim);
            let mut cands: Vec<ScoredChunk> = (0..n)
                .map(|i| {
                    let v = random_vector(&mut rng, dim);
                    ScoredChunk {
                        chunk: ChunkRecord {
                            chunk_id: format!("c{i:03}"),
                            doc_id: format!("d{i}"),
                            seq: 0,
                            text: String::new(),
                            char_count: 0,
                            section_path: vec![],
                            source_title: String::new(),
                        },
                        similarity: oracle_cosine(&query, &v),
                        vector: v.into(),
                        generation_id: 1,
                    }
                })
                .collect();
            cands.shuffle(&mut rng);
            let k = rng.gen_range(1..=n + 2);
            let lambda = *[0.0, 0.3, 0.7, 1.0].choose(&mut rng).unwrap();
            let got: Vec<String> = mmr_select(&cands, k, lambda).into_iter().map(|c| c.chunk.chunk_id).collect();
            let want = oracle_mmr(&cands, k, lambda);
            check!(got == want, "case {case} (n={n}, k={k}, λ={lambda}): {got:?} != {want:?}");

            let mut ranked = cands.clone();
            ranked.sort_by(|a, b| {
                b.similarity
                    .total_cmp(&a.similarity)
                    .then_with(|| a.chunk.chunk_id.cmp(&b.chunk.chunk_id))
            });
            let top: Vec<String> = ranked.iter().take(k).map(|c| c.chunk.chunk_id.clone()).collect();
            let at_one: Vec<String> = mmr_select(&cands, k, 1.0).into_iter().map(|c| c.chunk.chunk_id).collect();
            check!(at_one == top, "case {case}: λ=1 is not the top-k ranking");
        }
        let elapsed = started.elapsed();
        check!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
        Ok(())
    });
}

// ---------------------------------------------------------------- C03

struct SpyReader {
    inner: Arc<dyn GenerationReader>,
    fetches: Arc<Mutex<Vec<usize>>>,
}

impl GenerationReader for SpyReader {
    fn meta(&self) -> &GenerationMeta {
        self.inner.meta()
    }

    fn scan(&self, query: &[f32], fetch_k: usize) -> Result<Vec<ScoredChunk>, StoreError> {
        self.fetches.lock().push(fetch_k);
        self.inner.scan(query, fetch_k)
    }
}

struct SpyBackend {
    inner: MemoryBackend,
    fetches: Arc<Mutex<Vec<usize>>>,
}

impl IndexBackend for SpyBackend {
    fn live(&self) -> Result<Option<GenerationId>, StoreError> {
        self.inner.live()
    }
    fn list(&self) -> Result<Vec<GenerationMeta>, StoreError> {
        self.inner.list()
    }
    fn write_staging(&self, records: &[EmbeddedChunk]) -> Result<GenerationMeta, StoreError> {
        self.inner.write_staging(records)
    }
    fn open(&self, id: GenerationId) -> Result<Arc<dyn GenerationReader>, StoreError> {
        Ok(Arc::new(SpyReader {
            inner: self.inner.open(id)?,
            fetches: self.fetches.clone(),
        }))
    }
    fn promote(&self, id: GenerationId) -> Result<Option<GenerationId>, StoreError> {
        self.inner.promote(id)
    }
    fn delete(&self, id: GenerationId) -> Result<(), StoreError> {
        self.inner.delete(id)
    }
}

#[tokio::test]
async fn c03_retrieval_defaults() {
    criterion(3, "retrieval defaults k=8 fetch_k=30 lambda=0.7", async {
        let fetches = Arc::new(Mutex::new(Vec::new()));
        let store = Arc::new(VectorStore::new(Arc::new(SpyBackend {
            inner: MemoryBackend::new(),
            fetches: fetches.clone(),
        })));
        let embedder = Arc::new(HashingEmbedder::new(DIM).unwrap());
        let chunks: Vec<ChunkRecord> = (0..40)
            .flat_map(|i| {
                let text = format!("# Topic {i}\n\nDeposition note number {i} about maps and models.\n");
                chunk_document(&source_doc(&format!("n{i:02}.md"), &text), &ChunkConfig::default())
            })
            .collect();
        let records = embed_chunks(embedder.as_ref(), &chunks, &EmbedOptions::default()).await.unwrap();
        store.rebuild(&records).unwrap();
        let retriever = Arc::new(CountingRetriever::new(store.clone()));
        let roles = LlmRoles::new(
            Arc::new(ScriptedChatProvider::fixed(["ok"])),
            Arc::new(condense_provider("unused")),
        );
        let pipeline = RagPipeline::new(roles, PolicyPrompt::builtin(), embedder, retriever.clone());
        let env = pipeline
            .answer_query(&[], "How do I deposit a map?", &mut |_| true)
            .await
            .map_err(|e| e.to_string())?;

        let configs = retriever.configs.lock().clone();
        let expected = RetrievalConfig {
            k: 8,
            fetch_k: 30,
            lambda: 0.7,
        };
        check!(configs == vec![expected], "retrieve saw {configs:?}");
        check!(*fetches.lock() == vec![30], "candidate scan fetch_k {:?}", fetches.lock());
        check!(env.retrieved.len() == 8, "returned {} documents", env.retrieved.len());
        check!(Config::default().retrieval == expected, "service config default differs");
        Ok(())
    })
    .await;
}

// ---------------------------------------------------------------- C04

fn run_cli(args: &[&str]) -> (i32, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_helpdesk"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run helpdesk binary");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr),
    )
}

fn full_chunk_count(corpus: &Path, cfg: &ChunkConfig) -> usize {
    let manifest = scan_corpus(corpus, DEFAULT_EXTENSIONS).unwrap();
    load_documents(corpus, &manifest)
        .unwrap()
        .iter()
        .map(|d| chunk_document(d, cfg).len())
        .sum()
}

#[tokio::test]
async fn c04_manifest_skip_and_rebuild() {
    criterion(4, "manifest skip/rebuild", async {
        let root = tempfile::tempdir().unwrap();
        let corpus = root.path().join("corpus");
        std::fs::create_dir(&corpus).unwrap();
        write_corpus(&corpus);
        let cfg_path = root.path().join("helpdesk.toml");
        std::fs::write(
            &cfg_path,
            "corpus_dir = \"corpus\"\n\n[index]\nbackend = \"file\"\ndir = \"index\"\n\n\
             [chat_store]\npath = \":memory:\"\n\n[embedding]\nprovider = \"hashing\"\ndimension = 64\n",
        )
        .unwrap();
        let cfg_arg = cfg_path.to_str().unwrap();

        let (code, out) = run_cli(&["ingest", "--config", cfg_arg]);
        check!(code == 0, "first ingest exited {code}: {out}");
        check!(out.contains("rebuilt generation"), "first ingest did not build: {out}");

        let (code, out) = run_cli(&["ingest", "--config", cfg_arg]);
        check!(code == 0, "unchanged ingest exited {code}: {out}");
        check!(out.contains(SKIP_MESSAGE), "unchanged ingest did not skip: {out}");

        // same thing in process, where embedding calls can be counted
        let store = VectorStore::new(Arc::new(FileBackend::open_dir(root.path().join("index")).unwrap()));
        let embedder = HashingEmbedder::new(64).unwrap();
        let cfg = Config::default();
        let opts = helpdesk_server::cli::ingest_options(&cfg, false, false);
        let mut buf = Vec::new();
        let code = helpdesk_server::cli::ingest_with(&corpus, &store, &embedder, &opts, &mut buf).await;
        check!(code == 0, "in-process ingest exited {code}");
        check!(embedder.calls() == 0, "unchanged corpus made {} embedding calls", embedder.calls());
        let before = store.live_meta().map(|m| m.generation_id);

        let path = corpus.join("release.md");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 2;
        bytes[last] = if bytes[last] == b'X' { b'Y' } else { b'X' };
        std::fs::write(&path, bytes).unwrap();

        let (code, out) = run_cli(&["ingest", "--config", cfg_arg]);
        check!(code == 0, "ingest after edit exited {code}: {out}");
        check!(out.contains("rebuilt generation"), "edit did not trigger a rebuild: {out}");
        store.refresh();
        let live = store.live_meta().ok_or("no live generation after rebuild")?;
        check!(Some(live.generation_id) != before, "live generation did not change");
        let expected = full_chunk_count(&corpus, &cfg.chunking);
        check!(live.count == expected, "live has {} records, corpus has {expected} chunks", live.count);
        Ok(())
    })
    .await;
}

// ---------------------------------------------------------------- C05

fn tagged_records(embedder: &HashingEmbedder, cycle: usize) -> Vec<EmbeddedChunk> {
    let chunks: Vec<ChunkRecord> = (0..6)
        .map(|i| {
            let text = format!("gen-{cycle} deposition map model note {i}");
            ChunkRecord {
                chunk_id: format!("d{i}.md#0"),
                doc_id: format!("d{i}.md"),
                seq: 0,
                char_count: text.chars().count(),
                text,
                section_path: vec![],
                source_title: format!("Doc {i}"),
            }
        })
        .collect();
    chunks
        .into_iter()
        .map(|chunk| EmbeddedChunk {
            vector: embedder.embed_one(&chunk.text),
            model_id: "hashing".into(),
            chunk,
        })
        .collect()
}

fn swap_under_load(backend: Arc<dyn IndexBackend>) -> Outcome {
    let embedder = HashingEmbedder::new(DIM).unwrap();
    let store = Arc::new(VectorStore::new(backend));
    store.rebuild(&tagged_records(&embedder, 0)).map_err(|e| e.to_string())?;
    let query = embedder.embed_one("deposition map");
    let stop = Arc::new(AtomicBool::new(false));
    let progress = Arc::new(AtomicUsize::new(0));
    let cfg = RetrievalConfig {
        k: 4,
        fetch_k: 6,
        lambda: 0.7,
    };
    let readers: Vec<_> = (0..2)
        .map(|_| {
            let (store, stop, query, progress) = (store.clone(), stop.clone(), query.clone(), progress.clone());
            std::thread::spawn(move || -> Result<(usize, HashMap<GenerationId, String>), String> {
                let mut seen: HashMap<GenerationId, String> = HashMap::new();
                let mut calls = 0;
                while !stop.load(Ordering::Relaxed) {
                    let r = store.retrieve_with(&query, &cfg).map_err(|e| format!("retrieve failed: {e}"))?;
                    calls += 1;
                    progress.fetch_add(1, Ordering::Relaxed);
                    if r.results.len() != 4 {
                        return Err(format!("got {} results", r.results.len()));
                    }
                    let tags: BTreeSet<&str> = r.results.iter().map(|c| c.chunk.text.split(' ').next().unwrap()).collect();
                    if tags.len() != 1 || r.results.iter().any(|c| c.generation_id != r.generation_id) {
                        return Err(format!("mixed result {tags:?}"));
                    }
                    let tag = tags.into_iter().next().unwrap().to_string();
                    if let Some(prev) = seen.insert(r.generation_id, tag.clone()) {
                        if prev != tag {
                            return Err(format!("generation {} served {prev} and {tag}", r.generation_id));
                        }
                    }
                }
                Ok((calls, seen))
            })
        })
        .collect();
    // every swap happens while both readers are mid-loop
    let wait_for_reads = |n: usize| {
        let target = progress.load(Ordering::Relaxed) + n;
        let deadline = Instant::now() + Duration::from_secs(5);
        while progress.load(Ordering::Relaxed) < target && Instant::now() < deadline {
            std::thread::yield_now();
        }
    };
    wait_for_reads(2);
    for cycle in 1..=100 {
        store.rebuild(&tagged_records(&embedder, cycle)).map_err(|e| e.to_string())?;
        wait_for_reads(2);
    }
    stop.store(true, Ordering::Relaxed);
    let mut generations = BTreeSet::new();
    for r in readers {
        let (calls, seen) = r.join().map_err(panic_text)??;
        check!(calls > 0, "reader never ran");
        generations.extend(seen.into_keys());
    }
    check!(generations.len() > 50, "readers saw only {} of 101 generations", generations.len());
    Ok(())
}

#[test]
fn c05_zero_downtime_swap() {
    criterion_sync(5, "zero-downtime swap under load", || {
        swap_under_load(Arc::new(MemoryBackend::new()))?;
        let dir = tempfile::tempdir().unwrap();
        swap_under_load(Arc::new(FileBackend::open_dir(dir.path()).unwrap()))
    });
}

// ---------------------------------------------------------------- C06

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c06_degraded_mode_recovery() {
    criterion(6, "degraded-mode recovery", async {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(VectorStore::new(Arc::new(FileBackend::open_dir(dir.path()).unwrap())));
        let embedder = Arc::new(HashingEmbedder::new(DIM).unwrap());
        let roles = LlmRoles::new(
            Arc::new(ScriptedChatProvider::fixed(["ok"])),
            Arc::new(condense_provider("q")),
        );
        let pipeline = Arc::new(RagPipeline::new(roles, PolicyPrompt::builtin(), embedder.clone(), store.clone()));
        let chat = Arc::new(ChatStore::open_in_memory().unwrap());
        let desk = Arc::new(HelpDesk::new(chat, pipeline).with_store(store.clone()));
        let probe = Duration::from_secs(2);
        let server = serve_state(AppState::new(desk, LimitsConfig::default()), store, probe).await;
        let client = client(&server);

        let h = client.health().await.map_err(|e| e.to_string())?;
        check!(h.status == "degraded", "empty store reported {h:?}");

        // another process builds the index
        let outside = VectorStore::new(Arc::new(FileBackend::open_dir(dir.path()).unwrap()));
        let records = tagged_records(&embedder, 1)
            .into_iter()
            .map(|r| EmbeddedChunk {
                model_id: embedder.model_id().to_string(),
                ..r
            })
            .collect::<Vec<_>>();
        outside.rebuild(&records).map_err(|e| e.to_string())?;
        let started = Instant::now();
        loop {
            let h = client.health().await.map_err(|e| e.to_string())?;
            if h.status == "ok" {
                break;
            }
            check!(started.elapsed() < Duration::from_secs(10), "still degraded after 10s: {}", h.detail);
            tokio::time::sleep(Duration::from_millis(100)).await;
        }
        server.stop(Duration::from_secs(1)).await;
        Ok(())
    })
    .await;
}

// ---------------------------------------------------------------- C07

fn check_pairing(chat: &ChatStore, thread: &str) -> Outcome {
    let t = chat.thread(thread).map_err(|e| e.to_string())?;
    for (i, m) in t.messages.iter().enumerate() {
        if m.role == Role::Assistant {
            check!(
                i > 0 && t.messages[i - 1].role == Role::User,
                "assistant message {} has no user message before it",
                m.message_id
            );
        }
    }
    Ok(())
}

async fn drain(mut events: tokio::sync::mpsc::UnboundedReceiver<ExchangeEvent>) -> Vec<ExchangeEvent> {
    let mut out = Vec::new();
    while let Some(e) = events.recv().await {
        out.push(e);
    }
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c07_two_transaction_commit() {
    criterion(7, "two-transaction commit under fault injection", async {
        // provider breaks after two deltas
        let f = fixture(ScriptedChatProvider::fixed(["Upload ", "the map ", "and model."]).with_failure_after(2)).await;
        let chat = f.desk.chat().clone();
        let session = chat.create_session().unwrap().session_id;
        let thread = chat.create_thread(&session).unwrap();
        let h = f.desk.start_exchange(&thread, "How do I deposit a map?").map_err(|e| e.to_string())?;
        let events = drain(h.events).await;
        match events.last() {
            Some(ExchangeEvent::Failed(fail)) => {
                check!(fail.kind == FailureKind::Generation, "failure kind {:?}", fail.kind)
            }
            other => return Err(format!("expected a failure event, got {other:?}")),
        }
        let t = chat.thread(&thread).unwrap();
        check!(t.messages.len() == 2, "{} messages after failure", t.messages.len());
        check!(t.messages[0].content == "How do I deposit a map?", "user message lost");
        check!(
            t.messages[1].status == Some(MessageStatus::Interrupted) && t.messages[1].content == "Upload the map ",
            "assistant not stored as interrupted partial: {:?}",
            t.messages[1]
        );
        check_pairing(&chat, &thread)?;

        // the answering task is killed mid-stream
        let f = fixture(
            ScriptedChatProvider::fixed(["one ", "two ", "three ", "four"]).with_delay(Duration::from_millis(300)),
        )
        .await;
        let chat = f.desk.chat().clone();
        let session = chat.create_session().unwrap().session_id;
        let thread = chat.create_thread(&session).unwrap();
        let mut h = f.desk.start_exchange(&thread, "Where is my entry?").map_err(|e| e.to_string())?;
        match h.events.recv().await {
            Some(ExchangeEvent::Progress(_)) => {}
            other => return Err(format!("expected progress, got {other:?}")),
        }
        h.task.abort();
        let _ = h.task.await;
        let t = chat.thread(&thread).unwrap();
        check!(t.messages.len() == 1 && t.messages[0].role == Role::User, "after kill: {:?}", t.messages);
        check!(chat.pending_message(&thread).unwrap().is_some(), "pending marker missing after kill");
        check!(f.desk.recover_pending().unwrap() == 1, "recovery did not close the exchange");
        let t = chat.thread(&thread).unwrap();
        check!(
            t.messages.len() == 2 && t.messages[1].status == Some(MessageStatus::Interrupted),
            "after recovery: {:?}",
            t.messages
        );
        check_pairing(&chat, &thread)?;

        // the process dies between the two transactions
        let dir = tempfile::tempdir().unwrap();
        let db = dir.path().join("chat.db");
        let (thread, user_id) = {
            let chat = ChatStore::open(&db).unwrap();
            let session = chat.create_session().unwrap().session_id;
            let thread = chat.create_thread(&session).unwrap();
            let id = chat.begin_exchange(&thread, "Is my hold extended?").unwrap();
            (thread, id)
        };
        let chat = Arc::new(ChatStore::open(&db).unwrap());
        let t = chat.thread(&thread).unwrap();
        check!(
            t.messages.len() == 1 && t.messages[0].message_id == user_id,
            "user message not durable across restart"
        );
        let desk = HelpDesk::new(chat.clone(), f.desk.pipeline().clone());
        check!(desk.recover_pending().unwrap() == 1, "restart recovery missed the exchange");
        check_pairing(&chat, &thread)?;
        Ok(())
    })
    .await;
}

// ---------------------------------------------------------------- C08

fn status_of(r: Result<impl Sized, ClientError>) -> u16 {
    match r {
        Ok(_) => 200,
        Err(e) => e.status().map(|s| s.as_u16()).unwrap_or(0),
    }
}

fn chat_body(session: &str, thread: &str, total_bytes: usize) -> String {
    let head = format!("{{\"session_id\":\"{session}\",\"thread_id\":\"{thread}\",\"message\":\"");
    let tail = "\"}";
    let pad = total_bytes - head.len() - tail.len();
    format!("{head}{}{tail}", "a".repeat(pad))
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c08_http_limits() {
    criterion(8, "HTTP limits 429/429/413/422/409", async {
        let limits = LimitsConfig::default();
        check!(
            limits.chat_per_minute == 10 && limits.feedback_per_minute == 20 && limits.max_body_bytes == 65_536,
            "default limits changed"
        );
        check!(MAX_MESSAGE_CHARS == 10_000 && MAX_THREADS_PER_SESSION == 50, "chat caps changed");

        // rate limits
        let f = fixture(ScriptedChatProvider::fixed(["Upload the map."])).await;
        let server = serve(f.desk.clone(), f.store.clone(), limits.clone()).await;
        let c = client(&server);
        let session = c.create_session().await.map_err(|e| e.to_string())?;
        let thread = c.create_thread(&session).await.map_err(|e| e.to_string())?;
        c.chat(&session, &thread, "How do I deposit?")
            .await
            .map_err(|e| e.to_string())?
            .finish()
            .await
            .map_err(|e| e.to_string())?;
        for i in 1..=20 {
            let s = status_of(c.feedback(&thread, 4, None).await);
            check!(s == 200, "feedback {i} returned {s}");
        }
        match c.feedback(&thread, 4, None).await {
            Err(ClientError::Api { status, retry_after, .. }) if status.as_u16() == 429 => {
                check!(retry_after.is_some_and(|s| s >= 1), "429 without Retry-After")
            }
            other => return Err(format!("21st feedback: {other:?}")),
        }
        for i in 4..=10 {
            let s = status_of(c.create_session().await);
            check!(s == 200, "chat-class request {i} returned {s}");
        }
        let s = status_of(c.create_session().await);
        check!(s == 429, "11th chat-class request returned {s}");
        server.stop(Duration::from_secs(1)).await;

        // body and message size
        let server = serve(f.desk.clone(), f.store.clone(), limits.clone()).await;
        let c = client(&server);
        let http = reqwest::Client::new();
        let url = format!("http://{}/api/chat", server.addr);
        let session = c.create_session().await.map_err(|e| e.to_string())?;
        let thread = c.create_thread(&session).await.map_err(|e| e.to_string())?;
        let post = |body: String| {
            http.post(&url)
                .header("content-type", "application/json")
                .body(body)
                .send()
        };
        let at_limit = post(chat_body(&session, &thread, 65_536)).await.unwrap().status().as_u16();
        check!(at_limit == 422, "65,536-byte body returned {at_limit}");
        let over = post(chat_body(&session, &thread, 65_537)).await.unwrap().status().as_u16();
        check!(over == 413, "65,537-byte body returned {over}");
        let too_long = status_of(c.chat(&session, &thread, &"q".repeat(10_001)).await);
        check!(too_long == 422, "10,001-char message returned {too_long}");
        let longest = c.chat(&session, &thread, &"q".repeat(10_000)).await.map_err(|e| e.to_string())?;
        longest.finish().await.map_err(|e| e.to_string())?;
        server.stop(Duration::from_secs(1)).await;

        // thread cap, spread across client addresses so the rate limit stays out of the way
        let proxied = LimitsConfig {
            trusted_proxy_header: Some("x-forwarded-for".into()),
            ..limits
        };
        let server = serve(f.desk.clone(), f.store.clone(), proxied).await;
        let base = format!("http://{}", server.addr);
        let send = |path: String, ip: usize| {
            http.post(format!("{base}{path}"))
                .header("x-forwarded-for", format!("10.0.{}.{}", ip / 256, ip % 256))
                .send()
        };
        let v: serde_json::Value = send("/api/session".into(), 0).await.unwrap().json().await.unwrap();
        let session = v["session_id"].as_str().unwrap().to_string();
        for i in 1..=50 {
            let s = send(format!("/api/session/{session}/thread"), i).await.unwrap().status().as_u16();
            check!(s == 200, "thread {i} returned {s}");
        }
        let s = send(format!("/api/session/{session}/thread"), 51).await.unwrap().status().as_u16();
        check!(s == 409, "51st thread returned {s}");
        server.stop(Duration::from_secs(1)).await;
        Ok(())
    })
    .await;
}

// ---------------------------------------------------------------- C09

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c09_sse_wire_conformance() {
    criterion(9, "SSE wire conformance", async {
        let f = fixture(ScriptedChatProvider::fixed([
            "Upload the map ",
            "and the model ",
            "together [Source: Deposition Guide].",
        ]))
        .await;
        let server = serve(f.desk.clone(), f.store.clone(), LimitsConfig::default()).await;
        let c = client(&server);
        let session = c.create_session().await.map_err(|e| e.to_string())?;
        let thread = c.create_thread(&session).await.map_err(|e| e.to_string())?;
        let mut stream = c
            .chat(&session, &thread, "How do I deposit a map?")
            .await
            .map_err(|e| e.to_string())?
            .record_raw();
        while stream.next_frame().await.map_err(|e| e.to_string())?.is_some() {}
        let raw = String::from_utf8(stream.raw().to_vec()).map_err(|e| e.to_string())?;

        check!(
            raw.starts_with("event: message\ndata: Upload the map \n\nevent: message\ndata: Upload the map and the model \n\n"),
            "unexpected prefix: {raw:?}"
        );
        check!(raw.ends_with("\n\n: flush\n\n: flush\n\n: flush\n\n"), "unexpected tail: {raw:?}");
        let frames = parse_frames(&raw);
        let kinds: Vec<&str> = frames
            .iter()
            .map(|f| f.event.as_deref().or(f.comment.as_deref()).unwrap_or("?"))
            .collect();
        check!(
            kinds == ["message", "message", "message", "done", "flush", "flush", "flush"],
            "frame sequence {kinds:?}"
        );
        let data: Vec<&str> = frames[..3].iter().map(|f| f.data.as_str()).collect();
        for w in data.windows(2) {
            check!(w[1].starts_with(w[0]) && w[1].len() > w[0].len(), "not monotone: {w:?}");
        }
        let done: serde_json::Value = serde_json::from_str(&frames[3].data).map_err(|e| e.to_string())?;
        check!(done["answer"] == data[2], "done answer differs from the last message");
        check!(done["status"] == "complete", "done status {}", done["status"]);
        check!(done["citations"][0]["source_title"] == "Deposition Guide", "citation missing: {done}");
        server.stop(Duration::from_secs(1)).await;
        Ok(())
    })
    .await;
}

// ---------------------------------------------------------------- C10

const GOLDEN_ANSWER: &[&str] = &[
    "Upload the primary map, half maps and mask together with the model ",
    "[Source: Deposition Guide]. ",
    "A report follows [Source: Validation Reports] ",
    "and see [Source: Imaginary Handbook].",
];

async fn golden_run() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let embedder = Arc::new(HashingEmbedder::new(DIM).unwrap());
    let store = Arc::new(VectorStore::new(Arc::new(MemoryBackend::new())));
    run_ingest(dir.path(), &store, embedder.as_ref(), &ingest_options())
        .await
        .map_err(|e| e.to_string())?;
    let roles = LlmRoles::new(
        Arc::new(ScriptedChatProvider::fixed(GOLDEN_ANSWER.iter().copied())),
        Arc::new(condense_provider("How do I deposit a cryo-EM map and model?")),
    );
    let pipeline = RagPipeline::new(roles, PolicyPrompt::builtin(), embedder, store);
    let history = [Turn {
        user: "I have a cryo-EM structure.".into(),
        assistant: "I can help with depositing it.".into(),
    }];
    let env = pipeline
        .answer_query(&history, "How do I send the map?", &mut |_| true)
        .await
        .map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&env).unwrap())
}

#[tokio::test]
async fn c10_golden_transcript() {
    criterion(10, "golden end-to-end transcript", async {
        let first = golden_run().await?;
        for run in 2..=10 {
            let next = golden_run().await?;
            check!(next == first, "run {run} differs from run 1");
        }
        let env: serde_json::Value = serde_json::from_str(&first).unwrap();
        check!(env["final_text"] == GOLDEN_ANSWER.concat(), "final text {}", env["final_text"]);
        check!(
            env["condensed_question"] == "How do I deposit a cryo-EM map and model?",
            "condensed question {}",
            env["condensed_question"]
        );
        let cited: Vec<&str> = env["citations"]
            .as_array()
            .unwrap()
            .iter()
            .map(|c| c["doc_id"].as_str().unwrap())
            .collect();
        check!(cited == ["deposition.md", "validation.md"], "citations {cited:?}");

        // adversarial outputs never cite outside the retrieved set
        let script = Arc::new(Mutex::new(String::new()));
        let qa = {
            let script = script.clone();
            ScriptedChatProvider::new(move |_| Ok(vec![script.lock().clone()]))
        };
        let f = fixture(qa).await;
        let pipeline = RagPipeline::new(
            f.desk.pipeline().roles().clone(),
            PolicyPrompt::builtin(),
            f.embedder.clone(),
            f.store.clone(),
        )
        .with_retrieval(RetrievalConfig {
            k: 3,
            fetch_k: 10,
            lambda: 0.7,
        });
        let titles = [
            "Deposition Guide",
            "Validation Reports",
            "Release Policy",
            "File Formats",
            "Accounts and Access",
            "Imaginary Handbook",
            "deposition.md",
            "",
        ];
        let mut rng = StdRng::seed_from_u64(0xC17E);
        let mut outside = 0;
        for case in 0..200 {
            let mut text = String::from("Answer ");
            for _ in 0..rng.gen_range(0..6) {
                let t = titles.choose(&mut rng).unwrap();
                let form = match rng.gen_range(0..4) {
                    0 => format!("[Source: {t}]"),
                    1 => format!("[Source:{t} ]"),
                    2 => format!("[source: {t}]"),
                    _ => format!("[Source: [Source: {t}]]"),
                };
                text.push_str(&form);
                text.push(' ');
            }
            *script.lock() = text.clone();
            let env = pipeline
                .answer_query(&[], "How do I deposit a map?", &mut |_| true)
                .await
                .map_err(|e| e.to_string())?;
            let retrieved: BTreeMap<&str, &str> = env
                .retrieved
                .iter()
                .map(|r| (r.chunk.doc_id.as_str(), r.chunk.source_title.as_str()))
                .collect();
            for c in &env.citations {
                check!(
                    retrieved.get(c.doc_id.as_str()) == Some(&c.source_title.as_str()),
                    "case {case}: cited {c:?} outside retrieved {retrieved:?} for {text:?}"
                );
            }
            outside += titles[..5].iter().filter(|t| !retrieved.values().any(|r| r == *t)).count();
        }
        check!(outside > 0, "retrieval covered every title, the adversarial check is vacuous");
        Ok(())
    })
    .await;
}

// ---------------------------------------------------------------- C11

#[tokio::test]
async fn c11_guardrail_short_circuit() {
    criterion(11, "guardrail short-circuit", async {
        let classifier = ScriptedChatProvider::new(|req| {
            if !req.system.contains("OFF_TOPIC") {
                return Ok(vec![req.user.clone()]);
            }
            let verdict = if req.user.contains("discount") {
                "OFF_TOPIC: sales-pitch"
            } else {
                "ON_TOPIC"
            };
            Ok(vec![verdict.to_string()])
        });
        let f = fixture_with(ScriptedChatProvider::fixed(["Use the deposition system."]), classifier).await;
        let pipeline = f.desk.pipeline();
        let decline = pipeline.policy().off_topic_text.clone();
        let cases = [
            ("How do I deposit a cryo-EM map and model?", true),
            ("Special discount on lab reagents, register as vendor today", false),
            ("Hello!", true),
        ];
        for (message, answered) in cases {
            let (retrievals, embeds) = (f.retriever.count(), f.embedder.calls());
            let env = pipeline
                .answer_query(&[], message, &mut |_| true)
                .await
                .map_err(|e| e.to_string())?;
            let retrieved = f.retriever.count() - retrievals;
            let embedded = f.embedder.calls() - embeds;
            if answered {
                check!(!env.guardrail.is_off_topic(), "{message:?} was declined");
                check!(env.final_text == "Use the deposition system.", "{message:?} got {:?}", env.final_text);
                check!(retrieved == 1, "{message:?} made {retrieved} retrieval calls");
            } else {
                check!(env.guardrail.is_off_topic(), "{message:?} was not declined");
                check!(env.guardrail.category == "sales-pitch", "category {}", env.guardrail.category);
                check!(env.final_text == decline, "decline text {:?}", env.final_text);
                check!(retrieved == 0 && embedded == 0, "declined message made {retrieved} retrieval and {embedded} embed calls");
            }
        }
        check!(f.qa.call_count() == 2, "answering model called {} times", f.qa.call_count());
        Ok(())
    })
    .await;
}

// ---------------------------------------------------------------- C12

#[tokio::test]
async fn c12_ingestion_performance() {
    criterion(12, "desk-scale ingestion under 10s", async {
        let corpus = tempfile::tempdir().unwrap();
        let index = tempfile::tempdir().unwrap();
        let mut rng = StdRng::seed_from_u64(0x5012);
        for d in 0..50 {
            let mut text = format!("# Help page {d}\n\n");
            for s in 0..4 {
                text.push_str(&format!("## Part {s}\n\n"));
                while text.len() % 10_000 < 1_200 * (s + 1) {
                    let n = rng.gen_range(5..15);
                    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
                    text.push_str(&words.join(" "));
                    text.push_str(". ");
                }
                text.push_str("\n\n");
            }
            std::fs::write(corpus.path().join(format!("page{d:02}.md")), text).unwrap();
        }
        let store = VectorStore::new(Arc::new(FileBackend::open_dir(index.path()).unwrap()));
        let embedder = HashingEmbedder::new(256).unwrap();
        let started = Instant::now();
        let report = run_ingest(corpus.path(), &store, &embedder, &ingest_options())
            .await
            .map_err(|e| e.to_string())?;
        let elapsed = started.elapsed();
        let chunks = match report.outcome {
            IngestOutcome::Rebuilt { documents, chunks, .. } => {
                check!(documents == 50, "{documents} documents");
                chunks
            }
            other => return Err(format!("no rebuild: {other:?}")),
        };
        check!((180..=220).contains(&chunks), "{chunks} chunks, expected about 200");
        check!(store.live_meta().map(|m| m.count) == Some(chunks), "live count differs");
        check!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
        Ok(())
    })
    .await;
}

// ---------------------------------------------------------------- C13

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn c13_feedback_schema() {
    criterion(13, "feedback schema and CSV round trip", async {
        let mut answer = String::from(
            "Start here [Source: Deposition Guide], check [Source: Validation Reports] and [Source: Release Policy]. ",
        );
        while answer.chars().count() < 1000 {
            answer.push_str("Maps and models are validated together. ");
        }
        let answer: String = answer.chars().take(1000).collect();
        let f = fixture(ScriptedChatProvider::fixed([answer.clone()])).await;
        let mut state = AppState::new(f.desk.clone(), LimitsConfig::default());
        state.admin_token = Some("secret".into());
        let server = serve_state(state, f.store.clone(), Duration::from_secs(1)).await;
        let c = client(&server).with_admin_token("secret");

        let session = c.create_session().await.map_err(|e| e.to_string())?;
        let thread = c.create_thread(&session).await.map_err(|e| e.to_string())?;
        let done = c
            .chat(&session, &thread, "How do I deposit?")
            .await
            .map_err(|e| e.to_string())?
            .finish()
            .await
            .map_err(|e| e.to_string())?;
        match done {
            ChatEvent::Done(d) => {
                check!(d.answer.chars().count() == 1000, "answer is {} chars", d.answer.chars().count());
                check!(d.citations.len() == 3, "{} citations", d.citations.len());
            }
            other => return Err(format!("exchange failed: {other:?}")),
        }
        let comment = "Helpful, but \"slow\"\nsecond line";
        let r = c.feedback(&thread, 4, Some(comment)).await.map_err(|e| e.to_string())?;
        check!(r.answer_preview.chars().count() == 200, "preview is {} chars", r.answer_preview.chars().count());
        check!(r.answer_preview == answer.chars().take(200).collect::<String>(), "preview is not the answer prefix");
        check!(r.answer_length == 1000, "answer_length {}", r.answer_length);
        check!(r.num_references == 3, "num_references {}", r.num_references);

        let csv = c.export_feedback(None, None).await.map_err(|e| e.to_string())?;
        let parsed = parse_feedback_csv(csv.as_bytes()).map_err(|e| e.to_string())?;
        let stored = f.desk.chat().export_feedback(None, None).map_err(|e| e.to_string())?;
        check!(parsed == stored, "parsed CSV differs from stored rows");
        check!(parsed.len() == 1 && parsed[0].comment.as_deref() == Some(comment), "comment mangled");
        check!(feedback_csv_string(&parsed) == csv, "CSV does not round-trip byte for byte");
        server.stop(Duration::from_secs(1)).await;
        Ok(())
    })
    .await;
}

