//! JSON-over-HTTP inference for a trained checkpoint: reconstruction,
//! single-dimension code sweeps and code swaps between two uploads.
//!
//! Points travel as flat `[x0, y0, z0, x1, ...]` arrays. Errors are
//! `{"code": ..., "message": ...}` with a matching HTTP status.

use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::{Arc, Mutex};

use attriflow::config::{Task, STAGES};
use attriflow::deformation::Model;
use attriflow::geometry::PointCloud;
use attriflow::image::Image;
use attriflow::manipulation::{capture_codes, replay, swap_code_sets, sweep_from_codes, CodeSet, SwapSelection};
use attriflow::training::Checkpoint;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_CACHE_SIZE: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    fn status(&self) -> (StatusCode, &'static str) {
        match self {
            ServiceError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        }
    }
}

impl From<attriflow::Error> for ServiceError {
    fn from(e: attriflow::Error) -> Self {
        match e {
            attriflow::Error::InvalidArgument(m) => ServiceError::BadRequest(m),
            other => ServiceError::Internal(other.to_string()),
        }
    }
}

/// Wire form of an error.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let (status, code) = self.status();
        let body = ErrorBody {
            code: code.to_string(),
            message: self.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type Reply<T> = std::result::Result<Json<T>, ServiceError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Info {
    pub stages: usize,
    pub code_dim: usize,
    pub points: usize,
    pub channels: Vec<usize>,
    pub variant: String,
    pub checkpoint: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructRequest {
    /// Base64-encoded square grayscale PNG.
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReconstructResponse {
    pub upload_id: String,
    pub points: Vec<f32>,
    pub codes: CodeSet,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRequest {
    pub upload_id: String,
    pub stage: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepResponse {
    pub clouds: Vec<Vec<f32>>,
}

/// `which` as a textual selection (`"z:1+mu:1"`, `"all"`, `"none"`) or as
/// an object of per-component stage lists.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Which {
    Text(String),
    Parts(SwapSelection),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapRequest {
    pub upload_a: String,
    pub upload_b: String,
    pub which: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PointsResponse {
    pub points: Vec<f32>,
}

struct Upload {
    points: Vec<f32>,
    codes: CodeSet,
}

/// Shared service state: one immutable model and the upload cache.
pub struct AppState {
    model: Model,
    info: Info,
    cache: Mutex<LruCache<String, Arc<Upload>>>,
}

impl AppState {
    pub fn new(model: Model, checkpoint: impl Into<String>, cache_size: usize) -> Result<Self, ServiceError> {
        if model.config().task != Task::Reconstruction {
            return Err(ServiceError::BadRequest("the service needs an image reconstruction checkpoint".into()));
        }
        let cache_size = NonZeroUsize::new(cache_size).ok_or_else(|| ServiceError::BadRequest("cache size must be positive".into()))?;
        let cfg = model.config();
        let info = Info {
            stages: STAGES,
            code_dim: cfg.code_dim,
            points: cfg.num_points,
            channels: cfg.channels.clone(),
            variant: cfg.variant.name().to_string(),
            checkpoint: checkpoint.into(),
        };
        Ok(Self {
            model,
            info,
            cache: Mutex::new(LruCache::new(cache_size)),
        })
    }

    pub fn from_checkpoint(path: &Path, cache_size: usize) -> Result<Self, ServiceError> {
        let ck = Checkpoint::load(path).map_err(|e| ServiceError::Internal(format!("cannot load checkpoint: {e}")))?;
        let model = ck.to_model().map_err(|e| ServiceError::Internal(format!("cannot rebuild model: {e}")))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(model, name, cache_size)
    }

    pub fn info(&self) -> &Info {
        &self.info
    }

    fn upload(&self, id: &str) -> Result<Arc<Upload>, ServiceError> {
        self.cache
            .lock()
            .expect("cache lock poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown upload {id:?}")))
    }

    fn reconstruct(&self, image: &Image) -> Result<ReconstructResponse, ServiceError> {
        let id = upload_id(image);
        if let Some(found) = self.cache.lock().expect("cache lock poisoned").get(&id).cloned() {
            return Ok(ReconstructResponse {
                upload_id: id,
                points: found.points.clone(),
                codes: found.codes.clone(),
            });
        }
        let (cloud, codes) = capture_codes(&self.model, image)?;
        let upload = Arc::new(Upload {
            points: cloud.to_flat_f32(),
            codes,
        });
        self.cache.lock().expect("cache lock poisoned").put(id.clone(), upload.clone());
        Ok(ReconstructResponse {
            upload_id: id,
            points: upload.points.clone(),
            codes: upload.codes.clone(),
        })
    }

    fn sweep(&self, req: &SweepRequest) -> Result<SweepResponse, ServiceError> {
        let up = self.upload(&req.upload_id)?;
        let clouds = sweep_from_codes(&self.model, &up.codes, req.stage, req.dim, &req.values)?;
        Ok(SweepResponse {
            clouds: clouds.iter().map(PointCloud::to_flat_f32).collect(),
        })
    }

    fn swap(&self, a: &str, b: &str, which: &SwapSelection) -> Result<PointsResponse, ServiceError> {
        let (ua, ub) = (self.upload(a)?, self.upload(b)?);
        let codes = swap_code_sets(&ua.codes, &ub.codes, which)?;
        let cloud = replay(&self.model, &codes)?;
        Ok(PointsResponse {
            points: cloud.to_flat_f32(),
        })
    }
}

/// Content-derived id, so re-uploading an image finds its cache entry.
fn upload_id(image: &Image) -> String {
    let mut h = Sha256::new();
    h.update((image.resolution() as u64).to_le_bytes());
    for p in image.pixels() {
        h.update(p.to_le_bytes());
    }
    hex::encode(&h.finalize()[..12])
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("malformed request body: {e}")))
}

fn parse_which(value: serde_json::Value) -> Result<SwapSelection, ServiceError> {
    let which: Which = serde_json::from_value(value).map_err(|e| ServiceError::BadRequest(format!("malformed which: {e}")))?;
    match which {
        Which::Text(s) => s.parse().map_err(|e: attriflow::Error| ServiceError::BadRequest(format!("malformed which: {e}"))),
        Which::Parts(p) => Ok(p),
    }
}

async fn blocking<T: Send + 'static>(
    state: Arc<AppState>,
    f: impl FnOnce(&AppState) -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn info(State(state): State<Arc<AppState>>) -> Json<Info> {
    Json(state.info.clone())
}

async fn reconstruct(State(state): State<Arc<AppState>>, body: Bytes) -> Reply<ReconstructResponse> {
    let req: ReconstructRequest = parse(&body)?;
    let png = base64::engine::general_purpose::STANDARD
        .decode(req.image.trim())
        .map_err(|e| ServiceError::BadRequest(format!("image is not valid base64: {e}")))?;
    let image = Image::from_png_bytes(&png).map_err(|e| ServiceError::BadRequest(format!("image is not a usable PNG: {e}")))?;
    Ok(Json(blocking(state, move |s| s.reconstruct(&image)).await?))
}

async fn sweep(State(state): State<Arc<AppState>>, body: Bytes) -> Reply<SweepResponse> {
    let req: SweepRequest = parse(&body)?;
    Ok(Json(blocking(state, move |s| s.sweep(&req)).await?))
}

async fn swap(State(state): State<Arc<AppState>>, body: Bytes) -> Reply<PointsResponse> {
    let req: SwapRequest = parse(&body)?;
    let which = parse_which(req.which)?;
    Ok(Json(blocking(state, move |s| s.swap(&req.upload_a, &req.upload_b, &which)).await?))
}

async fn fallback() -> ServiceError {
    ServiceError::NotFound("no such endpoint".into())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/info", get(info))
        .route("/reconstruct", post(reconstruct))
        .route("/sweep", post(sweep))
        .route("/swap", post(swap))
        .fallback(fallback)
        .with_state(state)
}

/// Loads `checkpoint` and serves until ctrl-c.
pub async fn serve(checkpoint: &Path, addr: SocketAddr, cache_size: usize) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::from_checkpoint(checkpoint, cache_size)?);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServiceError::Internal(format!("cannot bind {addr}: {e}")))?;
    log::info!("serving {} on {addr}", state.info.checkpoint);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))
}
