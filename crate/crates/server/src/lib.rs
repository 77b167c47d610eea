//! HTTP/JSON front end for the bubblerag operations.
//!
//! Routes:
//!
//! | method | path          | body            | response       |
//! |--------|---------------|-----------------|----------------|
//! | GET    | `/health`     |                 | `Health`       |
//! | POST   | `/v1/index`   | `IndexRequest`  | `Manifest`     |
//! | POST   | `/v1/query`   | `QueryRequest`  | `QueryResponse`|
//! | POST   | `/v1/synth`   | `SynthRequest`  | `SynthResponse`|
//! | POST   | `/v1/eval`    | `EvalRequest`   | `EvalReport`   |
//! | POST   | `/v1/oracle`  | `OracleRequest` | `OracleReport` |
//!
//! Failures carry an `ApiError` body. All paths are resolved on the server.

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bubblerag_core::api::{self, ApiError, ErrorKind, Health, QueryRequest};
use bubblerag_core::bundle::{read_manifest, Bundle};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::net::TcpListener;

const BUNDLE_CACHE_CAP: usize = 8;

struct Cached {
    checksum: String,
    bundle: Arc<Bundle>,
    used: u64,
}

/// Opened bundles keyed by directory, reused while the manifest checksum
/// stays the same.
#[derive(Default)]
pub struct BundleCache {
    entries: Mutex<(u64, HashMap<PathBuf, Cached>)>,
}

impl BundleCache {
    pub fn get(&self, dir: &Path) -> Result<Arc<Bundle>, ApiError> {
        let key = std::fs::canonicalize(dir)
            .map_err(|e| ApiError::invalid(format!("{}: {e}", dir.display())))?;
        let manifest = read_manifest(&key)?;
        {
            let mut guard = self.entries.lock().expect("cache lock");
            let (clock, map) = &mut *guard;
            *clock += 1;
            if let Some(hit) = map.get_mut(&key) {
                if hit.checksum == manifest.checksum {
                    hit.used = *clock;
                    return Ok(hit.bundle.clone());
                }
            }
        }
        let bundle = Arc::new(Bundle::open(&key, None)?);
        let mut guard = self.entries.lock().expect("cache lock");
        let (clock, map) = &mut *guard;
        if map.len() >= BUNDLE_CACHE_CAP && !map.contains_key(&key) {
            let oldest = map
                .iter()
                .min_by_key(|(_, c)| c.used)
                .map(|(k, _)| k.clone())
                .expect("non-empty");
            map.remove(&oldest);
        }
        map.insert(
            key,
            Cached {
                checksum: bundle.manifest.checksum.clone(),
                bundle: bundle.clone(),
                used: *clock,
            },
        );
        Ok(bundle)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    pub bundles: Arc<BundleCache>,
}

pub struct Failure(ApiError);

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Self(e)
    }
}

pub fn status_for(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::Invalid => StatusCode::BAD_REQUEST,
        ErrorKind::NoAnchors => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Backend => StatusCode::BAD_GATEWAY,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (status_for(self.0.kind), Json(self.0)).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(format!("request body: {e}")))
}

/// Parses `body` and runs `op` on the blocking pool.
async fn blocking<Req, Resp, F>(body: Bytes, op: F) -> Result<Json<Resp>, Failure>
where
    Req: DeserializeOwned + Send + 'static,
    Resp: Serialize + Send + 'static,
    F: FnOnce(Req) -> Result<Resp, ApiError> + Send + 'static,
{
    let req: Req = parse(&body)?;
    let resp = tokio::task::spawn_blocking(move || op(req))
        .await
        .map_err(|e| ApiError::new(ErrorKind::Internal, format!("worker failed: {e}")))??;
    Ok(Json(resp))
}

async fn health() -> Json<Health> {
    Json(Health::ok())
}

async fn index(body: Bytes) -> Result<impl IntoResponse, Failure> {
    blocking(body, |req| api::index(&req)).await
}

async fn query(State(state): State<AppState>, body: Bytes) -> Result<impl IntoResponse, Failure> {
    blocking(body, move |req: QueryRequest| {
        let bundle = state.bundles.get(&req.bundle)?;
        tracing::debug!(bundle = %req.bundle.display(), "query");
        api::query(&bundle, &req)
    })
    .await
}

async fn synth(body: Bytes) -> Result<impl IntoResponse, Failure> {
    blocking(body, |req| api::synth(&req)).await
}

async fn eval(body: Bytes) -> Result<impl IntoResponse, Failure> {
    blocking(body, |req| api::eval(&req)).await
}

async fn oracle(body: Bytes) -> Result<impl IntoResponse, Failure> {
    blocking(body, |req| api::oracle(&req)).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/index", post(index))
        .route("/v1/query", post(query))
        .route("/v1/synth", post(synth))
        .route("/v1/eval", post(eval))
        .route("/v1/oracle", post(oracle))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let addr = listener.local_addr()?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(AppState::default()))
        .with_graceful_shutdown(shutdown)
        .await
}
