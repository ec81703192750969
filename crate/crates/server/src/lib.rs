//! HTTP/SSE front end for the help desk.
//!
//! `POST /api/session`, `POST /api/session/{id}/thread`, `POST /api/chat`
//! (SSE), `POST /api/feedback` and `GET /api/health` make up the public
//! surface; admin routes need the configured bearer token.

pub mod app;
pub mod cli;
pub mod config;
pub mod ratelimit;
pub mod sse;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use tokio::net::TcpListener;
use tokio::sync::watch;

use crate::app::{AppState, IngestContext};
use crate::config::{Config, ConfigError, Runtime};

/// State for `runtime`, with the admin ingest endpoint wired to `cfg`.
pub fn app_state(cfg: &Config, runtime: &Runtime) -> AppState {
    let mut state = AppState::new(runtime.desk.clone(), cfg.limits.clone());
    state.security = cfg.security.clone();
    state.admin_token = cfg.admin_token.clone().filter(|t| !t.is_empty());
    state.static_dir = cfg.static_dir.clone();
    state.ingest = Some(IngestContext {
        corpus: cfg.corpus_dir.clone(),
        store: runtime.store.clone(),
        embedder: runtime.embedder.clone(),
        options: cli::ingest_options(cfg, false, false),
        running: tokio::sync::Mutex::new(()),
    });
    state
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// A running server; dropping the handle does not stop it.
pub struct Server {
    pub addr: SocketAddr,
    pub state: Arc<AppState>,
    shutdown: watch::Sender<bool>,
    task: tokio::task::JoinHandle<Result<(), std::io::Error>>,
    probe: tokio::task::JoinHandle<()>,
}

impl Server {
    pub fn shutdown(&self) {
        let _ = self.shutdown.send(true);
    }

    /// Stops accepting, waits up to `grace` for open streams, then returns.
    pub async fn stop(self, grace: Duration) {
        self.shutdown();
        let _ = tokio::time::timeout(grace, self.task).await;
        self.probe.abort();
    }

    pub async fn wait(self) -> Result<(), ServeError> {
        let result = self.task.await.map_err(std::io::Error::other)?;
        self.probe.abort();
        Ok(result?)
    }
}

/// Binds and starts serving `state` on `addr`, with the readiness probe.
pub async fn start(
    addr: SocketAddr,
    state: Arc<AppState>,
    store: Arc<helpdesk_core::vecstore::VectorStore>,
    probe_interval: Duration,
) -> Result<Server, ServeError> {
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    let addr = listener.local_addr()?;
    let probe = store.spawn_probe(probe_interval);
    let (tx, mut rx) = watch::channel(false);
    let app = app::router(state.clone()).into_make_service_with_connect_info::<SocketAddr>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async move {
                let _ = rx.wait_for(|stop| *stop).await;
            })
            .await
    });
    Ok(Server {
        addr,
        state,
        shutdown: tx,
        task,
        probe,
    })
}

/// `helpdesk serve`: runs until SIGINT/SIGTERM; SIGHUP reloads the policy.
pub async fn serve(cfg: Config) -> Result<(), ServeError> {
    let runtime = config::build_runtime(&cfg, &config::process_env)?;
    match runtime.desk.recover_pending() {
        Ok(0) => {}
        Ok(n) => tracing::warn!(count = n, "closed exchanges left open by a previous run"),
        Err(e) => tracing::error!(error = %e, "could not close pending exchanges"),
    }
    let health = runtime.desk.health();
    tracing::info!(status = ?health.status, detail = %health.detail, "starting");
    let state = Arc::new(app_state(&cfg, &runtime));
    let server = start(cfg.listen, state, runtime.store.clone(), cfg.probe_interval()).await?;
    tracing::info!(addr = %server.addr, "listening");

    #[cfg(unix)]
    {
        let desk = runtime.desk.clone();
        tokio::spawn(async move {
            use tokio::signal::unix::{signal, SignalKind};
            let Ok(mut hup) = signal(SignalKind::hangup()) else { return };
            while hup.recv().await.is_some() {
                match desk.reload_policy() {
                    Ok(Some(v)) => tracing::info!(version = %v, "policy reloaded on SIGHUP"),
                    Ok(None) => tracing::info!("SIGHUP ignored: built-in policy in use"),
                    Err(e) => tracing::error!(error = %e, "policy reload failed, keeping the current policy"),
                }
            }
        });
    }

    shutdown_signal().await;
    tracing::info!("shutting down, draining open streams");
    server.stop(Duration::from_secs(cfg.limits.shutdown_grace_secs)).await;
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
