//! JSON-over-HTTP retrieval on top of a trained checkpoint and a gallery index.
//!
//! Three routes: `GET /api/attributes`, `POST /api/query` and
//! `GET /api/images/{image_id}`. All state is immutable once installed, so
//! handlers run concurrently without locks.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use oapr_core::catalog::{AttributeCatalog, AttributeSplit, SplitManifest};
use oapr_core::harness::Checkpoint;
use oapr_core::model::OaprModel;
use oapr_core::retrieval::{resolve_uri, score_query, GalleryIndex, RetrievalQuery, ScoreMode};
use oapr_core::OaprError;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const DEFAULT_PORT: u16 = 8731;
pub const MAX_K: usize = 100;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] OaprError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Where the service finds its artifacts and how it listens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub index: PathBuf,
    pub checkpoint: PathBuf,
    /// Overrides the manifest stored in the checkpoint.
    pub manifest: Option<PathBuf>,
    /// Base directory for relative image URIs; defaults to the index's directory.
    pub image_root: Option<PathBuf>,
    pub port: u16,
    pub cors_origin: Option<String>,
}

impl ServiceConfig {
    /// Reads `OAPR_INDEX`, `OAPR_CHECKPOINT`, `OAPR_MANIFEST`, `OAPR_IMAGE_ROOT`,
    /// `OAPR_PORT` and `OAPR_CORS_ORIGIN`.
    pub fn from_env() -> Result<Self, ServiceError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ServiceError> {
        let required = |k: &str| get(k).map(PathBuf::from).ok_or_else(|| ServiceError::Config(format!("{k} is not set")));
        let port = match get("OAPR_PORT") {
            Some(p) => p
                .parse()
                .map_err(|_| ServiceError::Config(format!("OAPR_PORT `{p}` is not a port number")))?,
            None => DEFAULT_PORT,
        };
        Ok(Self {
            index: required("OAPR_INDEX")?,
            checkpoint: required("OAPR_CHECKPOINT")?,
            manifest: get("OAPR_MANIFEST").map(PathBuf::from),
            image_root: get("OAPR_IMAGE_ROOT").map(PathBuf::from),
            port,
            cors_origin: get("OAPR_CORS_ORIGIN"),
        })
    }
}

/// Everything a request needs, loaded once.
#[derive(Debug)]
pub struct Gallery {
    pub model: OaprModel,
    pub index: GalleryIndex,
    pub catalog: AttributeCatalog,
    pub manifest: SplitManifest,
    pub image_root: PathBuf,
    pub model_fingerprint: String,
}

impl Gallery {
    pub fn new(
        model: OaprModel,
        index: GalleryIndex,
        catalog: AttributeCatalog,
        manifest: SplitManifest,
        model_fingerprint: String,
        image_root: PathBuf,
    ) -> Result<Self, ServiceError> {
        if index.encoder_fingerprint != model.encoder.fingerprint() {
            return Err(OaprError::FingerprintMismatch {
                expected: model.encoder.fingerprint(),
                found: index.encoder_fingerprint.clone(),
            }
            .into());
        }
        if let Some(fp) = index.checkpoint_fingerprint.as_ref().filter(|fp| **fp != model_fingerprint) {
            return Err(OaprError::FingerprintMismatch {
                expected: model_fingerprint,
                found: fp.clone(),
            }
            .into());
        }
        if let Some(r) = catalog.records.iter().find(|r| manifest.split_of(&r.raw_name).is_none()) {
            return Err(ServiceError::Config(format!("`{}` is in the catalog but not in the manifest", r.raw_name)));
        }
        Ok(Self {
            model,
            index,
            catalog,
            manifest,
            image_root,
            model_fingerprint,
        })
    }

    pub fn from_checkpoint(
        checkpoint: &Checkpoint,
        index: GalleryIndex,
        manifest: Option<SplitManifest>,
        image_root: PathBuf,
    ) -> Result<Self, ServiceError> {
        Self::new(
            checkpoint.model()?,
            index,
            checkpoint.catalog.clone(),
            manifest.unwrap_or_else(|| checkpoint.manifest.clone()),
            checkpoint.fingerprint()?,
            image_root,
        )
    }

    pub fn load(cfg: &ServiceConfig) -> Result<Self, ServiceError> {
        let checkpoint = Checkpoint::load(&cfg.checkpoint)?;
        let index = GalleryIndex::load(&cfg.index)?;
        let manifest = match &cfg.manifest {
            Some(p) => Some(serde_json::from_str(&std::fs::read_to_string(p)?)?),
            None => None,
        };
        let root = cfg
            .image_root
            .clone()
            .or_else(|| cfg.index.parent().map(FsPath::to_path_buf))
            .unwrap_or_default();
        Self::from_checkpoint(&checkpoint, index, manifest, root)
    }
}

/// Shared handler state. Requests answer 503 until a [`Gallery`] is installed.
#[derive(Debug, Clone, Default)]
pub struct AppState {
    gallery: Arc<OnceLock<Arc<Gallery>>>,
}

impl AppState {
    pub fn ready(gallery: Gallery) -> Self {
        let s = Self::default();
        s.install(gallery);
        s
    }

    /// Installs the gallery; later calls are ignored.
    pub fn install(&self, gallery: Gallery) {
        let _ = self.gallery.set(Arc::new(gallery));
    }

    fn get(&self) -> Result<Arc<Gallery>, ApiError> {
        self.gallery.get().cloned().ok_or(ApiError {
            status: StatusCode::SERVICE_UNAVAILABLE,
            code: "not_ready",
            message: None,
        })
    }
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: Option<String>,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: Some(message.into()),
        }
    }

    fn not_found() -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: None,
        }
    }
}

impl From<OaprError> for ApiError {
    fn from(e: OaprError) -> Self {
        let (status, code) = match e {
            OaprError::ContextOverflow { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "context_overflow"),
            OaprError::InvalidArgument(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            code,
            message: Some(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = serde_json::json!({ "error": self.code });
        if let Some(m) = self.message {
            body["message"] = m.into();
        }
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeListing {
    pub phrase: String,
    pub raw_name: String,
    pub split: AttributeSplit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub attributes: Vec<String>,
    pub k: i64,
    #[serde(default)]
    pub mode: ScoreMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub image_id: String,
    pub combined_score: f64,
    pub per_attribute: BTreeMap<String, f64>,
    pub image_url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    /// The cleaned query as scored.
    pub attributes: Vec<String>,
    pub k: usize,
    pub mode: ScoreMode,
    pub results: Vec<QueryResult>,
    pub latency_ms: f64,
    pub model_fingerprint: String,
    pub encoder_fingerprint: String,
}

async fn list_attributes(State(state): State<AppState>) -> Result<Json<Vec<AttributeListing>>, ApiError> {
    let g = state.get()?;
    Ok(Json(
        g.catalog
            .records
            .iter()
            .filter_map(|r| {
                g.manifest.split_of(&r.raw_name).map(|split| AttributeListing {
                    phrase: r.phrase.clone(),
                    raw_name: r.raw_name.clone(),
                    split,
                })
            })
            .collect(),
    ))
}

fn image_url(id: &str) -> String {
    let mut url = String::from("/api/images/");
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || b"-._~".contains(&b) {
            url.push(b as char);
        } else {
            url.push_str(&format!("%{b:02X}"));
        }
    }
    url
}

async fn query(State(state): State<AppState>, body: Bytes) -> Result<Json<QueryResponse>, ApiError> {
    let g = state.get()?;
    let req: QueryRequest = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(e.to_string()))?;
    if req.k < 1 || req.k > MAX_K as i64 {
        return Err(ApiError::bad_request(format!("k must be in 1..={MAX_K}")));
    }
    let k = req.k as usize;
    if k > g.index.len() {
        return Err(ApiError::bad_request(format!("k = {k} exceeds the gallery size {}", g.index.len())));
    }
    let q = RetrievalQuery::new(&req.attributes, k)?;
    let mode = req.mode;
    let start = Instant::now();
    let (q, ranked) = tokio::task::spawn_blocking({
        let g = g.clone();
        move || {
            let r = score_query(&g.index, &q, &g.model, mode);
            (q, r)
        }
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        code: "internal",
        message: Some(e.to_string()),
    })?;
    let ranked = ranked?;
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    let results = ranked
        .into_iter()
        .map(|r| QueryResult {
            image_url: image_url(&r.image_id),
            per_attribute: q.attributes.iter().cloned().zip(r.per_attribute).collect(),
            image_id: r.image_id,
            combined_score: r.combined_score,
        })
        .collect();
    Ok(Json(QueryResponse {
        attributes: q.attributes,
        k,
        mode,
        results,
        latency_ms,
        model_fingerprint: g.model_fingerprint.clone(),
        encoder_fingerprint: g.index.encoder_fingerprint.clone(),
    }))
}

fn content_type(path: &FsPath) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        Some("webp") => "image/webp",
        _ => "application/octet-stream",
    }
}

/// Ids are opaque keys into the index; the path on disk comes only from the
/// indexed entry, never from the request.
async fn image(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let g = state.get()?;
    let pos = g.index.position(&id).ok_or_else(ApiError::not_found)?;
    let path = resolve_uri(&g.image_root, &g.index.entries[pos].image_uri);
    let bytes = tokio::fs::read(&path).await.map_err(|_| ApiError::not_found())?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

pub fn router(state: AppState, cors_origin: Option<&str>) -> Result<Router, ServiceError> {
    let mut r = Router::new()
        .route("/api/attributes", get(list_attributes))
        .route("/api/query", post(query))
        .route("/api/images/{image_id}", get(image))
        .with_state(state);
    if let Some(origin) = cors_origin {
        let origin = if origin == "*" {
            AllowOrigin::any()
        } else {
            AllowOrigin::exact(
                HeaderValue::from_str(origin).map_err(|_| ServiceError::Config(format!("bad CORS origin `{origin}`")))?,
            )
        };
        r = r.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    Ok(r)
}

/// Loads the artifacts, then binds `0.0.0.0:port` and serves until Ctrl-C.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    let gallery = Gallery::load(&cfg)?;
    eprintln!(
        "loaded {} gallery images, {} attributes, model {}",
        gallery.index.len(),
        gallery.catalog.len(),
        gallery.model_fingerprint
    );
    let app = router(AppState::ready(gallery), cfg.cors_origin.as_deref())?;
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
