#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use helpdesk_client::HelpdeskClient;
use helpdesk_core::chat::ChatStore;
use helpdesk_core::desk::HelpDesk;
use helpdesk_core::embed::{EmbedOptions, HashingEmbedder, RetryPolicy};
use helpdesk_core::ingest::{run_ingest, IngestOptions};
use helpdesk_core::rag::{ChatProvider, LlmRoles, PolicyPrompt, RagPipeline, ScriptedChatProvider};
use helpdesk_core::vecstore::{
    IndexBackend, MemoryBackend, Retrieval, RetrievalConfig, Retriever, StoreError, VectorStore,
};
use helpdesk_server::app::AppState;
use helpdesk_server::config::LimitsConfig;
use helpdesk_server::Server;
use parking_lot::Mutex;

pub const DIM: usize = 64;

/// Five short help pages with distinct titles.
pub const CORPUS: &[(&str, &str)] = &[
    (
        "deposition.md",
        "# Deposition Guide\n\nStart a new deposition session in the deposition system. \
         Upload the model coordinates in PDBx/mmCIF format together with the experimental data.\n\n\
         ## Cryo-EM maps\n\nFor cryo-EM entries upload the primary map, half maps and the mask. \
         The map and model are deposited together and validated as one entry.\n",
    ),
    (
        "validation.md",
        "# Validation Reports\n\nA validation report is produced for every deposition. \
         It summarizes geometry, fit to the experimental data and clashes.\n\n\
         ## Reading the slider\n\nPercentile sliders compare the entry with the whole archive.\n",
    ),
    (
        "release.md",
        "# Release Policy\n\nEntries are released on the requested date or upon publication. \
         Holds may last at most one year from deposition.\n",
    ),
    (
        "formats.md",
        "# File Formats\n\nPDBx/mmCIF is the master format of the archive. \
         Legacy PDB format files are accepted for small entries only.\n",
    ),
    (
        "accounts.md",
        "# Accounts and Access\n\nDepositors sign in with their ORCID iD. \
         Additional contributors can be invited by email from the deposition page.\n",
    ),
];

pub fn write_corpus(dir: &Path) {
    for (name, text) in CORPUS {
        std::fs::write(dir.join(name), text).unwrap();
    }
}

pub fn ingest_options() -> IngestOptions {
    IngestOptions {
        embedding: EmbedOptions {
            batch_size: 64,
            retry: RetryPolicy::none(),
        },
        ..IngestOptions::default()
    }
}

/// A memory-backed store holding one generation of [`CORPUS`].
pub async fn indexed_store(embedder: &HashingEmbedder) -> (Arc<VectorStore>, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let store = Arc::new(VectorStore::new(Arc::new(MemoryBackend::new())));
    run_ingest(dir.path(), &store, embedder, &ingest_options()).await.unwrap();
    (store, dir)
}

/// Forwards to a real retriever and records every call.
pub struct CountingRetriever {
    pub inner: Arc<dyn Retriever>,
    pub calls: AtomicUsize,
    pub configs: Mutex<Vec<RetrievalConfig>>,
}

impl CountingRetriever {
    pub fn new(inner: Arc<dyn Retriever>) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            configs: Mutex::new(Vec::new()),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Retriever for CountingRetriever {
    fn retrieve(&self, model_id: &str, query: &[f32], cfg: &RetrievalConfig) -> Result<Retrieval, StoreError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.configs.lock().push(*cfg);
        self.inner.retrieve(model_id, query, cfg)
    }
}

/// Classifier/condense double: `ON_TOPIC` for classifier prompts, `condensed`
/// for condense prompts.
pub fn condense_provider(condensed: &str) -> ScriptedChatProvider {
    let condensed = condensed.to_string();
    ScriptedChatProvider::new(move |req| {
        if req.system.contains("OFF_TOPIC") {
            Ok(vec!["ON_TOPIC".into()])
        } else {
            Ok(vec![condensed.clone()])
        }
    })
}

pub struct Fixture {
    pub desk: Arc<HelpDesk>,
    pub store: Arc<VectorStore>,
    pub embedder: Arc<HashingEmbedder>,
    pub retriever: Arc<CountingRetriever>,
    pub qa: Arc<ScriptedChatProvider>,
    pub corpus: tempfile::TempDir,
}

pub async fn fixture(qa: ScriptedChatProvider) -> Fixture {
    fixture_with(qa, condense_provider("How do I deposit a map?")).await
}

pub async fn fixture_with(qa: ScriptedChatProvider, condense: ScriptedChatProvider) -> Fixture {
    let embedder = Arc::new(HashingEmbedder::new(DIM).unwrap());
    let (store, corpus) = indexed_store(&embedder).await;
    let retriever = Arc::new(CountingRetriever::new(store.clone()));
    let qa = Arc::new(qa);
    let roles = LlmRoles::new(qa.clone() as Arc<dyn ChatProvider>, Arc::new(condense));
    let pipeline = Arc::new(RagPipeline::new(
        roles,
        PolicyPrompt::builtin(),
        embedder.clone(),
        retriever.clone(),
    ));
    let chat = Arc::new(ChatStore::open_in_memory().unwrap());
    let desk = Arc::new(HelpDesk::new(chat, pipeline).with_store(store.clone()));
    Fixture {
        desk,
        store,
        embedder,
        retriever,
        qa,
        corpus,
    }
}

pub async fn serve(desk: Arc<HelpDesk>, store: Arc<VectorStore>, limits: LimitsConfig) -> Server {
    serve_state(AppState::new(desk, limits), store, Duration::from_millis(500)).await
}

pub async fn serve_state(state: AppState, store: Arc<VectorStore>, probe: Duration) -> Server {
    let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
    helpdesk_server::start(addr, Arc::new(state), store, probe).await.unwrap()
}

pub fn client(server: &Server) -> HelpdeskClient {
    HelpdeskClient::new(format!("http://{}", server.addr))
}

pub fn empty_backend() -> Arc<dyn IndexBackend> {
    Arc::new(MemoryBackend::new())
}
