//! JSON over HTTP.
//!
//! | route | body / response |
//! |---|---|
//! | `PUT /images/{name}` | `{image: base64, pipeline, policy?}` → put receipt |
//! | `GET /images/{name}/acquire` | `{variant_id, master_seed, digest, image, unique, deploy_count}` |
//! | `POST /images/{name}/expire-sweep` | optional `{now_ms}` → `{expired}` |
//! | `GET /metrics`, `GET /images/{name}/metrics` | metrics snapshot |
//! | `GET /healthz` | `{status: "ok"}` |
//!
//! Errors are `{error, code}` with the codes of [`RegistryError::code`]
//! plus `bad_request`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::oneshot;

use helix_core::isa::ProgramImage;
use helix_core::transforms::PipelineSpec;

use crate::generator::{DelayedGenerator, PipelineGenerator};
use crate::policy::PoolPolicy;
use crate::registry::{Registry, RegistryError, RegistryOptions, Replenish, SystemClock};

/// Server configuration file (JSON).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Persist to this directory; in memory when absent.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Policy for puts that do not carry one.
    #[serde(default)]
    pub default_policy: PoolPolicy,
    /// Extra sleep before every generation, to model slow transforms.
    #[serde(default)]
    pub generation_delay_ms: u64,
    #[serde(default)]
    pub rng_seed: Option<u64>,
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: default_listen(),
            data_dir: None,
            default_policy: PoolPolicy::default(),
            generation_delay_ms: 0,
            rng_seed: None,
        }
    }
}

impl ServerConfig {
    pub fn build_registry(&self) -> Result<Arc<Registry>, RegistryError> {
        let generator = Arc::new(DelayedGenerator {
            delay: Duration::from_millis(self.generation_delay_ms),
            inner: PipelineGenerator,
        });
        let options =
            RegistryOptions { replenish: Replenish::Background, rng_seed: self.rng_seed, record_transitions: false };
        let clock = Arc::new(SystemClock);
        match &self.data_dir {
            Some(dir) => Registry::open(dir, generator, clock, options),
            None => Ok(Registry::new(generator, clock, options)),
        }
    }
}

#[derive(Clone)]
struct AppState {
    registry: Arc<Registry>,
    default_policy: PoolPolicy,
}

#[derive(Deserialize)]
struct PutBody {
    image: String,
    pipeline: PipelineSpec,
    #[serde(default)]
    policy: Option<PoolPolicy>,
}

#[derive(Deserialize, Default)]
struct SweepBody {
    now_ms: Option<u64>,
}

/// Acquire response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquireResponse {
    pub variant_id: u64,
    pub master_seed: u64,
    pub digest: String,
    pub image: String,
    pub unique: bool,
    pub deploy_count: u32,
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl ToString) -> ApiError {
        ApiError { status: StatusCode::BAD_REQUEST, code: "bad_request", message: message.to_string() }
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> ApiError {
        let status = match e {
            RegistryError::UnknownImage(_) => StatusCode::NOT_FOUND,
            RegistryError::PoolExhausted(_) => StatusCode::SERVICE_UNAVAILABLE,
            RegistryError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError { status, code: e.code(), message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message, "code": self.code}))).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

fn parse<T: for<'a> Deserialize<'a>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(ApiError::bad_request)
}

fn to_json<T: Serialize>(v: T) -> ApiResult {
    serde_json::to_value(v).map(Json).map_err(|e| ApiError::bad_request(e.to_string()))
}

/// Registry work may touch the disk, so it runs on the blocking pool.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> T {
    tokio::task::spawn_blocking(f).await.expect("registry task panicked")
}

async fn put_image(State(s): State<AppState>, Path(name): Path<String>, body: Bytes) -> ApiResult {
    let body: PutBody = parse(&body)?;
    let bytes = B64.decode(body.image.as_bytes()).map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
    let image = ProgramImage::from_bytes(&bytes).map_err(|e| RegistryError::InvalidImage(e.to_string()))?;
    let policy = body.policy.unwrap_or(s.default_policy);
    let receipt = blocking(move || s.registry.put_image(&name, image, body.pipeline, policy)).await?;
    to_json(receipt)
}

async fn acquire(State(s): State<AppState>, Path(name): Path<String>) -> ApiResult {
    let got = blocking(move || s.registry.acquire(&name)).await?;
    to_json(AcquireResponse {
        variant_id: got.variant.variant_id,
        master_seed: got.variant.master_seed,
        digest: got.variant.digest.clone().unwrap_or_default(),
        image: B64.encode(&got.image),
        unique: got.unique,
        deploy_count: got.variant.deploy_count,
    })
}

async fn expire_sweep(State(s): State<AppState>, Path(name): Path<String>, body: Bytes) -> ApiResult {
    let body: SweepBody = if body.is_empty() { SweepBody::default() } else { parse(&body)? };
    let registry = s.registry.clone();
    let expired = blocking(move || {
        // an unknown name is still an error even though sweeps are global
        registry.policy(&name)?;
        let now = body.now_ms.unwrap_or_else(|| crate::registry::Clock::now(&SystemClock));
        registry.expire_sweep(now)
    })
    .await?;
    to_json(json!({ "expired": expired }))
}

async fn metrics_all(State(s): State<AppState>) -> ApiResult {
    to_json(blocking(move || s.registry.metrics_all()).await)
}

async fn metrics_one(State(s): State<AppState>, Path(name): Path<String>) -> ApiResult {
    to_json(blocking(move || s.registry.metrics(&name)).await?)
}

async fn healthz() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn not_found() -> ApiError {
    ApiError { status: StatusCode::NOT_FOUND, code: "not_found", message: "no such route".to_string() }
}

pub fn router(registry: Arc<Registry>, default_policy: PoolPolicy) -> Router {
    Router::new()
        .route("/images/{name}", put(put_image))
        .route("/images/{name}/acquire", get(acquire))
        .route("/images/{name}/expire-sweep", post(expire_sweep))
        .route("/images/{name}/metrics", get(metrics_one))
        .route("/metrics", get(metrics_all))
        .route("/healthz", get(healthz))
        .fallback(not_found)
        .with_state(AppState { registry, default_policy })
}

/// Serves until ctrl-c. `on_ready` runs once the listener is bound.
pub async fn serve(config: &ServerConfig, on_ready: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let registry = config.build_registry().map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    on_ready(listener.local_addr()?);
    let app = router(registry, config.default_policy.clone());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// [`serve`] on a fresh multi-threaded runtime, blocking the caller.
pub fn serve_blocking(config: &ServerConfig, on_ready: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()?.block_on(serve(config, on_ready))
}

/// A server on its own thread and runtime, stopped on drop.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Starts serving `registry` on `addr` (port 0 picks a free port).
pub fn spawn_server(registry: Arc<Registry>, default_policy: PoolPolicy, addr: &str) -> std::io::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build()?;
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            let app = router(registry, default_policy);
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stopped.await;
                })
                .await;
        });
    });
    Ok(ServerHandle { addr: local, stop: Some(stop), thread: Some(thread) })
}
