//! Operator commands: serve, ingest, export-feedback, sync, check-config.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use helpdesk_core::corpus::{sync_remote, LocalDirSource, DEFAULT_EXTENSIONS};
use helpdesk_core::embed::EmbeddingProvider;
use helpdesk_core::ingest::{run_ingest, IngestOptions, IngestOutcome};
use helpdesk_core::vecstore::VectorStore;

use crate::app::parse_time_bound;
use crate::config::{self, Config, ConfigError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "helpdesk", version, about = "Retrieval-augmented help desk service")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArg {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long, short = 'c', global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service until interrupted.
    Serve {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Rebuild the index if the corpus changed since the last build.
    Ingest {
        #[command(flatten)]
        config: ConfigArg,
        /// Corpus directory; overrides `corpus_dir`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Rebuild even when nothing changed.
        #[arg(long)]
        force: bool,
        /// Print the change set and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Write collected feedback as CSV.
    ExportFeedback {
        #[command(flatten)]
        config: ConfigArg,
        /// Inclusive lower bound, RFC 3339 or YYYY-MM-DD.
        #[arg(long)]
        since: Option<String>,
        /// Exclusive upper bound, RFC 3339 or YYYY-MM-DD.
        #[arg(long)]
        until: Option<String>,
        /// Output file; stdout when omitted or "-".
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mirror a source directory into the corpus (run `ingest` afterwards).
    Sync {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Validate the config and the providers it names.
    CheckConfig {
        #[command(flatten)]
        config: ConfigArg,
    },
}

pub fn load_config(arg: &ConfigArg) -> Result<Config, ConfigError> {
    match &arg.config {
        Some(path) => Config::load(path),
        None => Ok(Config::default()),
    }
}

/// Ingest with an explicit store and embedder; prints one summary line.
pub async fn ingest_with(
    corpus: &Path,
    store: &VectorStore,
    embedder: &dyn EmbeddingProvider,
    opts: &IngestOptions,
    out: &mut dyn Write,
) -> i32 {
    match run_ingest(corpus, store, embedder, opts).await {
        Ok(report) => {
            let _ = writeln!(out, "{report}");
            if report.outcome == IngestOutcome::DryRun && report.changes.is_empty() {
                let _ = writeln!(out, "no changes");
            }
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(out, "ingest failed: {e}; live index and manifest left unchanged");
            EXIT_FAILURE
        }
    }
}

pub fn ingest_options(cfg: &Config, force: bool, dry_run: bool) -> IngestOptions {
    IngestOptions {
        force,
        dry_run,
        include: DEFAULT_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
        chunking: cfg.chunking.clone(),
        embedding: cfg.embed_options(),
    }
}

fn config_failure(err: &dyn std::fmt::Display, out: &mut dyn Write) -> i32 {
    let _ = writeln!(out, "configuration error: {err}");
    EXIT_CONFIG
}

/// Runs every command except `serve`, which `main` handles.
pub async fn run(command: Command, out: &mut dyn Write) -> i32 {
    let env = config::process_env;
    match command {
        Command::Serve { .. } => unreachable!("serve is dispatched by main"),
        Command::Ingest {
            config,
            corpus,
            force,
            dry_run,
        } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return config_failure(&e, out),
            };
            let corpus = corpus.unwrap_or_else(|| cfg.corpus_dir.clone());
            if !corpus.is_dir() {
                let _ = writeln!(out, "corpus directory {} does not exist", corpus.display());
                return EXIT_FAILURE;
            }
            let (store, embedder) = match (config::build_store(&cfg.index), config::build_embedder(&cfg.embedding, &env)) {
                (Ok(s), Ok(e)) => (s, e),
                (Err(e), _) | (_, Err(e)) => return config_failure(&e, out),
            };
            let opts = ingest_options(&cfg, force, dry_run);
            ingest_with(&corpus, &store, embedder.as_ref(), &opts, out).await
        }
        Command::ExportFeedback {
            config,
            since,
            until,
            out: path,
        } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return config_failure(&e, out),
            };
            let mut bounds = [None, None];
            for (slot, (name, value)) in bounds.iter_mut().zip([("since", &since), ("until", &until)]) {
                if let Some(v) = value {
                    match parse_time_bound(v) {
                        Some(t) => *slot = Some(t),
                        None => {
                            let _ = writeln!(out, "--{name} must be RFC 3339 or YYYY-MM-DD, got {v:?}");
                            return EXIT_CONFIG;
                        }
                    }
                }
            }
            let chat = match config::build_chat_store(&cfg.chat_store) {
                Ok(c) => c,
                Err(e) => return config_failure(&e, out),
            };
            let rows = match chat.export_feedback(bounds[0], bounds[1]) {
                Ok(r) => r,
                Err(e) => {
                    let _ = writeln!(out, "export failed: {e}");
                    return EXIT_FAILURE;
                }
            };
            let csv = helpdesk_core::chat::feedback_csv_string(&rows);
            match path.filter(|p| p.as_os_str() != "-") {
                Some(p) => match std::fs::write(&p, csv) {
                    Ok(()) => {
                        let _ = writeln!(out, "wrote {} feedback rows to {}", rows.len(), p.display());
                        EXIT_OK
                    }
                    Err(e) => {
                        let _ = writeln!(out, "cannot write {}: {e}", p.display());
                        EXIT_FAILURE
                    }
                },
                None => {
                    let _ = out.write_all(csv.as_bytes());
                    EXIT_OK
                }
            }
        }
        Command::Sync { config, source, corpus } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return config_failure(&e, out),
            };
            let corpus = corpus.unwrap_or_else(|| cfg.corpus_dir.clone());
            let remote = LocalDirSource::new(&source);
            match sync_remote(&remote, &corpus, DEFAULT_EXTENSIONS) {
                Ok(changes) => {
                    let _ = writeln!(out, "synced: {changes}");
                    EXIT_OK
                }
                Err(e) => {
                    let _ = writeln!(out, "sync failed: {e}; local corpus left unchanged");
                    EXIT_FAILURE
                }
            }
        }
        Command::CheckConfig { config } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return config_failure(&e, out),
            };
            match config::build_runtime(&cfg, &env) {
                Ok(rt) => {
                    let _ = writeln!(out, "config ok; index: {:?}", rt.store.readiness());
                    EXIT_OK
                }
                Err(e) => config_failure(&e, out),
            }
        }
    }
}
