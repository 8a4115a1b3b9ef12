//! Cloud side of the electronic tongue: measurement ingestion and storage,
//! training jobs and a model registry, inference, and a relay that runs live
//! acquisitions and streams their frames. See `docs/api.md` for the HTTP API.

pub mod api;
pub mod live;
pub mod registry;
pub mod store;

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use etongue_core::scenario::{ScenarioPack, BUILTIN_PACK_NAMES};

pub use api::{
    router, ClassificationResult, ErrorBody, IngestResponse, MeasurementPage, RecordSummary, Similarity,
};
pub use live::{AcquisitionState, AcquisitionStatus, LiveStreamMessage, StreamEnd};
pub use registry::{ModelDescriptor, ModelStatus, Registry, TrainRequest};
pub use store::{LogStore, MemoryStore, RecordStore};

/// Overrides the data directory given on the command line.
pub const DATA_DIR_ENV: &str = "ETONGUE_DATA_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Registry(#[from] registry::RegistryError),
    #[error("binding {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    /// Record log and models live here; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    /// Packs offered to relayed acquisitions; the built-in packs when empty.
    pub packs: Vec<ScenarioPack>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: None,
            packs: Vec::new(),
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<dyn RecordStore>,
    pub registry: Arc<Registry>,
    pub live: Arc<live::LiveHub>,
}

impl AppState {
    pub fn open(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let (store, registry): (Arc<dyn RecordStore>, Registry) = match &config.data_dir {
            Some(dir) => (
                Arc::new(LogStore::open(dir)?),
                Registry::open(&dir.join("models"))?,
            ),
            None => (Arc::new(MemoryStore::new()), Registry::in_memory()),
        };
        let packs = if config.packs.is_empty() {
            BUILTIN_PACK_NAMES
                .iter()
                .map(|n| ScenarioPack::builtin(n).expect("built-in pack"))
                .collect()
        } else {
            config.packs.clone()
        };
        Ok(Self {
            store,
            registry: Arc::new(registry),
            live: Arc::new(live::LiveHub::new(packs)),
        })
    }
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await?;
    Ok(())
}

/// A server running on its own thread and runtime.
pub struct ServerHandle {
    addr: SocketAddr,
    state: AppState,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<Result<(), ServiceError>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &AppState {
        &self.state
    }

    /// Stops accepting connections and waits for the server thread.
    pub fn shutdown(mut self) -> Result<(), ServiceError> {
        self.stop()
    }

    fn stop(&mut self) -> Result<(), ServiceError> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.thread.take() {
            Some(t) => t.join().expect("server thread panicked"),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop();
    }
}

/// Binds `config.addr` (port 0 picks a free port) and serves in the background.
pub fn spawn(config: &ServiceConfig) -> Result<ServerHandle, ServiceError> {
    let state = AppState::open(config)?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(config.addr))
        .map_err(|source| ServiceError::Bind {
            addr: config.addr,
            source,
        })?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let serve_state = state.clone();
    let thread = std::thread::Builder::new()
        .name("etongue-service".into())
        .spawn(move || {
            runtime.block_on(serve(listener, serve_state, async {
                let _ = rx.await;
            }))
        })?;
    Ok(ServerHandle {
        addr,
        state,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
