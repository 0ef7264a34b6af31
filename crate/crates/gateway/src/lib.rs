//! HTTP gateway for the attested training platform, plus the in-process
//! worker pool and scan scheduler it runs alongside.

pub mod api;
pub mod openapi;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use aibomgen_core::attestation::{KeyPair, PublicKey};
use aibomgen_core::orchestrator::{Orchestrator, OrchestratorConfig};
use aibomgen_core::scanner::{worker_manifest, AdvisoryDb, LatestScan, ScanScheduler};
use aibomgen_core::storage::{Storage, StorageConfig};
use aibomgen_core::worker::{host_info, KeyFile, KeySource, Worker, WorkerPool};
use anyhow::Context;
use serde::Deserialize;

pub use api::{router, AppState};

/// Bearer token → subject.
#[derive(Debug, Clone, Default)]
pub struct TokenTable(HashMap<String, String>);

#[derive(Deserialize)]
struct TokensFile {
    tokens: HashMap<String, String>,
}

impl TokenTable {
    pub fn new(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        Self(entries.into_iter().collect())
    }

    /// TOML with a `[tokens]` table mapping token strings to subjects.
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let file: TokensFile = toml::from_str(text).context("parsing tokens file")?;
        anyhow::ensure!(
            file.tokens.keys().all(|t| !t.is_empty()) && file.tokens.values().all(|s| !s.is_empty()),
            "tokens and subjects must be non-empty"
        );
        Ok(Self(file.tokens))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text)
    }

    pub fn subject(&self, token: &str) -> Option<&str> {
        self.0.get(token).map(String::as_str)
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub listen_addr: SocketAddr,
    pub data_dir: PathBuf,
    pub tokens: TokenTable,
    /// Defaults to `<data_dir>/keys/platform.pem`, created on first start.
    pub signing_key: Option<PathBuf>,
    pub advisory_db: Option<PathBuf>,
    /// Background worker threads; 0 leaves jobs queued for an external driver.
    pub workers: usize,
    pub scan_interval: Duration,
    pub grant_ttl_seconds: u64,
    pub max_upload_bytes: usize,
    pub capture_training_log: bool,
    pub sync_writes: bool,
}

impl GatewayConfig {
    pub fn new(data_dir: impl Into<PathBuf>, tokens: TokenTable) -> Self {
        Self {
            listen_addr: ([127, 0, 0, 1], 8080).into(),
            data_dir: data_dir.into(),
            tokens,
            signing_key: None,
            advisory_db: None,
            workers: 2,
            scan_interval: Duration::from_secs(3600),
            grant_ttl_seconds: 900,
            max_upload_bytes: 1 << 30,
            capture_training_log: false,
            sync_writes: true,
        }
    }

    pub fn key_path(&self) -> PathBuf {
        self.signing_key
            .clone()
            .unwrap_or_else(|| self.data_dir.join("keys").join("platform.pem"))
    }
}

/// Loads the platform key, generating and saving one if the file is absent.
pub fn load_or_create_key(path: &Path) -> anyhow::Result<KeyPair> {
    if path.exists() {
        return KeyPair::load(path).with_context(|| format!("loading signing key {}", path.display()));
    }
    let key = KeyPair::generate(&mut rand::rngs::OsRng);
    key.save(path, &path.with_extension("pub.pem"))
        .with_context(|| format!("writing signing key {}", path.display()))?;
    tracing::info!(key_id = key.key_id(), path = %path.display(), "generated platform signing key");
    Ok(key)
}

fn load_or_create_secret(path: &Path) -> anyhow::Result<Vec<u8>> {
    if let Ok(bytes) = std::fs::read(path) {
        anyhow::ensure!(bytes.len() >= 32, "grant secret {} is too short", path.display());
        return Ok(bytes);
    }
    let secret: [u8; 32] = rand::random();
    std::fs::create_dir_all(path.parent().expect("secret path has a parent"))?;
    std::fs::write(path, secret)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o600))?;
    }
    Ok(secret.to_vec())
}

/// Everything the server process runs: shared state, workers, and the scan
/// loop. Dropping it stops the background threads.
pub struct Platform {
    pub state: AppState,
    pub signing_key: KeyPair,
    key_source: Arc<dyn KeySource>,
    latest_scan: Arc<LatestScan>,
    capture_training_log: bool,
    pool: Option<WorkerPool>,
    scheduler: Option<ScanScheduler>,
}

impl Platform {
    pub fn start(config: &GatewayConfig) -> anyhow::Result<Self> {
        let key_path = config.key_path();
        let signing_key = load_or_create_key(&key_path)?;
        let secret = load_or_create_secret(&config.data_dir.join("keys").join("grant.secret"))?;

        let mut storage_config = StorageConfig::new(config.data_dir.join("storage"), secret);
        storage_config.sync_writes = config.sync_writes;
        let storage = Arc::new(Storage::open(storage_config).context("opening storage")?);
        let orchestrator = Arc::new(
            Orchestrator::open(
                OrchestratorConfig {
                    state_dir: Some(config.data_dir.join("state")),
                    ..Default::default()
                },
                storage.clone(),
            )
            .context("opening orchestrator state")?,
        );

        let latest = Arc::new(LatestScan::default());
        let db = match &config.advisory_db {
            Some(p) => AdvisoryDb::load(p).with_context(|| format!("loading advisory db {}", p.display()))?,
            None => AdvisoryDb::default(),
        };
        let manifest = worker_manifest(host_info().worker_image_digest.clone());
        let scheduler = ScanScheduler::spawn(storage.clone(), manifest, db, latest.clone(), config.scan_interval);

        let keys: Arc<dyn KeySource> = Arc::new(KeyFile(key_path.clone()));
        let workers = (0..config.workers)
            .map(|i| {
                Worker::new(format!("w{i}"), orchestrator.clone(), keys.clone())
                    .with_scan(latest.clone())
                    .with_log_capture(config.capture_training_log)
            })
            .collect();
        let pool = WorkerPool::spawn(workers, Duration::from_millis(20));

        let state = AppState {
            orchestrator,
            storage,
            public_key: signing_key.public_key().clone(),
            tokens: Arc::new(config.tokens.clone()),
            grant_ttl_seconds: config.grant_ttl_seconds,
            max_upload_bytes: config.max_upload_bytes,
        };
        let key_source = keys;
        Ok(Self {
            state,
            signing_key,
            key_source,
            latest_scan: latest,
            capture_training_log: config.capture_training_log,
            pool: Some(pool),
            scheduler: Some(scheduler),
        })
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.state.public_key
    }

    /// A worker wired like the pool's, for callers that drive jobs themselves.
    pub fn worker(&self, id: &str) -> Worker {
        Worker::new(id, self.state.orchestrator.clone(), self.key_source.clone())
            .with_scan(self.latest_scan.clone())
            .with_log_capture(self.capture_training_log)
    }

    pub fn router(&self) -> axum::Router {
        router(self.state.clone())
    }

    /// Serves on `listener` until `shutdown` resolves.
    pub async fn serve(
        &self,
        listener: tokio::net::TcpListener,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> std::io::Result<()> {
        axum::serve(listener, self.router()).with_graceful_shutdown(shutdown).await
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(p) = self.pool.take() {
            p.stop();
        }
        if let Some(s) = self.scheduler.take() {
            s.stop();
        }
    }
}

impl Drop for Platform {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// A platform serving HTTP on an ephemeral local port from a background
/// thread. Used by tests and the tamper harness.
pub struct BackgroundServer {
    pub addr: SocketAddr,
    platform: Option<Platform>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl BackgroundServer {
    pub fn start(config: &GatewayConfig) -> anyhow::Result<Self> {
        let platform = Platform::start(config)?;
        let app = platform.router();
        let std_listener = std::net::TcpListener::bind(("127.0.0.1", 0))?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("gateway".into()).spawn(move || {
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .expect("tokio runtime");
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        })?;
        Ok(Self {
            addr,
            platform: Some(platform),
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn platform(&self) -> &Platform {
        self.platform.as_ref().expect("running")
    }
}

impl Drop for BackgroundServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.platform.take();
    }
}
