//! HTTP front end: exemplar sessions, mask extraction, manipulation and
//! static hosting of the browser editor.

pub mod segmenter;
pub mod store;

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::Serialize;
use serde_json::{json, Value};
use tower_http::services::ServeDir;
use transmask_core::imaging::{decode_mask, decode_rgb, encode_mask_png, encode_rgb_png};
use transmask_core::inference::{finalize_mask, load_model, warp_preview, ManipulateOptions, Model, Prompt, Session};
use transmask_core::{Error, Mask, RgbImage};

pub use segmenter::HttpSegmenter;
pub use store::SessionStore;

/// Upload ceiling for exemplar images and masks.
pub const BODY_LIMIT: usize = 32 << 20;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub checkpoint: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub session_ttl: Duration,
    pub segmenter: Option<String>,
    pub segmenter_timeout: Duration,
}

impl ServiceConfig {
    pub fn new(bind: SocketAddr, checkpoint: PathBuf) -> Self {
        Self {
            bind,
            checkpoint,
            static_dir: None,
            session_ttl: Duration::from_secs(3600),
            segmenter: None,
            segmenter_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot load checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: Error },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] Error),
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
pub struct AppState {
    pub model: Arc<Model>,
    pub store: Arc<SessionStore>,
    pub segmenter: Option<HttpSegmenter>,
}

impl AppState {
    pub fn new(model: Model, ttl: Duration, segmenter: Option<HttpSegmenter>) -> Self {
        Self { model: Arc::new(model), store: Arc::new(SessionStore::new(ttl)), segmenter }
    }
}

/// JSON error body `{"error": {"code", "message"}}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no live session `{id}`"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::Shape(_) | Error::Dimension(_) => (StatusCode::BAD_REQUEST, "bad_dimensions"),
            Error::Codec(_) | Error::Image { .. } => (StatusCode::BAD_REQUEST, "bad_image"),
            Error::Config(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            Error::NotSupported(_) => (StatusCode::NOT_IMPLEMENTED, "not_supported"),
            Error::Segmenter(_) | Error::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "degraded"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn b64_mask(m: &Mask) -> ApiResult<String> {
    Ok(STANDARD.encode(encode_mask_png(m)?))
}

fn b64_rgb(img: &RgbImage) -> ApiResult<String> {
    Ok(STANDARD.encode(encode_rgb_png(img)?))
}

/// All parts of a multipart body, by field name.
async fn read_parts(mut mp: Multipart) -> ApiResult<HashMap<String, Vec<u8>>> {
    let mut parts = HashMap::new();
    while let Some(field) = mp.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        parts.insert(name, bytes.to_vec());
    }
    Ok(parts)
}

fn parse_json_part<T: serde::de::DeserializeOwned + Default>(parts: &HashMap<String, Vec<u8>>, name: &str) -> ApiResult<T> {
    match parts.get(name) {
        Some(b) if !b.is_empty() => serde_json::from_slice(b).map_err(|e| ApiError::bad_request(format!("`{name}`: {e}"))),
        _ => Ok(T::default()),
    }
}

/// Mask from an uploaded PNG or, failing that, from the segmenter.
async fn obtain_mask(state: &AppState, parts: &HashMap<String, Vec<u8>>, image: &RgbImage) -> ApiResult<(Mask, Vec<String>)> {
    if let Some(bytes) = parts.get("mask") {
        let (raw, thresholded) = decode_mask(bytes)?;
        let (mask, mut warnings) = finalize_mask(&raw, image.dims())?;
        if thresholded {
            warnings.insert(0, "mask was not strictly 0/255; thresholded".into());
        }
        return Ok((mask, warnings));
    }
    let prompts: Vec<Prompt> = parse_json_part(parts, "prompts")?;
    match &state.segmenter {
        Some(seg) => Ok(seg.segment(image, &prompts).await?),
        None => Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "degraded",
            "no segmenter is configured; include a `mask` part (single-channel PNG, 0/255)",
        )),
    }
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    Json(json!({ "status": "ok", "model": state.model.info(), "sessions": state.store.len() }))
}

async fn create_session(State(state): State<AppState>, mp: Multipart) -> ApiResult<(StatusCode, Json<Value>)> {
    let parts = read_parts(mp).await?;
    let bytes = parts.get("image").ok_or_else(|| ApiError::bad_request("missing `image` part"))?;
    let image = decode_rgb(bytes)?;
    let (mask, warnings) = obtain_mask(&state, &parts, &image).await?;
    let id = store::new_session_id();
    let session = Session::new(id.clone(), image.clone(), mask.clone())?;
    state.store.insert(session);
    tracing::info!(target: "transmask::service", session = %id, "created");
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "id": id,
            "width": image.width(),
            "height": image.height(),
            "mask": b64_mask(&mask)?,
            "warnings": warnings,
        })),
    ))
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let slot = state.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let guard = slot.state.lock().await;
    let s = &guard.session;
    let history: Vec<Value> = s
        .history()
        .iter()
        .enumerate()
        .map(|(i, e)| json!({ "step": i + 1, "timestamp_ms": e.timestamp_ms, "edited_area": e.x_a.area() }))
        .collect();
    Ok(Json(json!({
        "id": s.id,
        "width": s.initial_exemplar().width(),
        "height": s.initial_exemplar().height(),
        "steps": s.history().len(),
        "image": b64_rgb(s.current_exemplar())?,
        "mask": b64_mask(s.current_mask())?,
        "history": history,
    })))
}

async fn set_mask(State(state): State<AppState>, UrlPath(id): UrlPath<String>, mp: Multipart) -> ApiResult<Json<Value>> {
    let slot = state.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let parts = read_parts(mp).await?;
    let mut guard = slot.state.lock().await;
    let image = guard.session.current_exemplar().clone();
    let (mask, warnings) = obtain_mask(&state, &parts, &image).await?;
    guard.session.set_mask(mask.clone())?;
    guard.last_request = None;
    Ok(Json(json!({ "mask": b64_mask(&mask)?, "warnings": warnings })))
}

#[derive(Serialize)]
struct DiagnosticsBody {
    keypoints: Vec<transmask_core::inference::KeypointPair>,
    attention: Vec<String>,
    omega_s: String,
}

async fn manipulate(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    mp: Multipart,
) -> ApiResult<Json<Value>> {
    let slot = state.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let parts = read_parts(mp).await?;
    let key = headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_string);
    let mut guard = slot.state.lock().await;
    if let (Some(k), Some((last, reply))) = (&key, &guard.last_request) {
        if k == last {
            return Ok(Json(reply.clone()));
        }
    }
    let bytes = parts.get("mask").ok_or_else(|| ApiError::bad_request("missing `mask` part"))?;
    let (x_a, thresholded) = decode_mask(bytes)?;
    let opts: ManipulateOptions = parse_json_part(&parts, "options")?;
    let model = state.model.clone();
    let mut session = guard.session.clone();
    let (session, result) = tokio::task::spawn_blocking(move || {
        let r = session.manipulate(&model, &x_a, opts);
        (session, r)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let result = result?;
    guard.session = session;
    let mut warnings = result.warnings.clone();
    if thresholded {
        warnings.insert(0, "mask was not strictly 0/255; thresholded".into());
    }
    let diagnostics = match &result.diagnostics {
        Some(d) => Some(DiagnosticsBody {
            keypoints: d.keypoints.clone(),
            attention: d.attention.iter().map(|m| STANDARD.encode(encode_gray_png(m))).collect(),
            omega_s: b64_rgb(&warp_preview(&d.omega_s)?)?,
        }),
        None => None,
    };
    let reply = json!({
        "step": guard.session.history().len(),
        "image": b64_rgb(&result.output)?,
        "mask": b64_mask(&result.mask)?,
        "warnings": warnings,
        "diagnostics": diagnostics,
    });
    guard.last_request = key.map(|k| (k, reply.clone()));
    Ok(Json(reply))
}

/// Soft map as an 8-bit greyscale PNG (not thresholded).
fn encode_gray_png(m: &Mask) -> Vec<u8> {
    let img = RgbImage::from_mask(m);
    encode_rgb_png(&img).unwrap_or_default()
}

async fn undo(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let slot = state.store.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let mut guard = slot.state.lock().await;
    if !guard.session.undo() {
        return Err(ApiError::new(StatusCode::CONFLICT, "nothing_to_undo", "the session has no steps"));
    }
    guard.last_request = None;
    let s = &guard.session;
    Ok(Json(json!({
        "steps": s.history().len(),
        "image": b64_rgb(s.current_exemplar())?,
        "mask": b64_mask(s.current_mask())?,
    })))
}

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/mask", post(set_mask))
        .route("/sessions/{id}/manipulate", post(manipulate))
        .route("/sessions/{id}/undo", post(undo))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve on an already-bound listener until `shutdown` resolves, then stop
/// accepting connections and let in-flight requests finish.
pub async fn run(
    listener: tokio::net::TcpListener,
    state: AppState,
    static_dir: Option<&Path>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let store = state.store.clone();
    let reaper = tokio::spawn(async move {
        let period = (store.ttl() / 4).max(Duration::from_millis(250));
        loop {
            tokio::time::sleep(period).await;
            let n = store.evict_expired();
            if n > 0 {
                tracing::info!(target: "transmask::service", evicted = n, "expired sessions");
            }
        }
    });
    let app = router(state, static_dir);
    let served = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    reaper.abort();
    served?;
    Ok(())
}

/// Load the checkpoint, bind and serve.
pub async fn serve(cfg: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    let model = load_model(&cfg.checkpoint).map_err(|source| ServiceError::Checkpoint { path: cfg.checkpoint.clone(), source })?;
    let segmenter = match &cfg.segmenter {
        Some(url) => Some(HttpSegmenter::new(url.clone(), cfg.segmenter_timeout)?),
        None => None,
    };
    let listener = tokio::net::TcpListener::bind(cfg.bind)
        .await
        .map_err(|source| ServiceError::Bind { addr: cfg.bind, source })?;
    tracing::info!(target: "transmask::service", addr = %cfg.bind, "listening");
    run(listener, AppState::new(model, cfg.session_ttl, segmenter), cfg.static_dir.as_deref(), shutdown).await
}
