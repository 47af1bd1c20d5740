//! HTTP service: box-prompted segmentation plus annotation storage.
//!
//! | method | path | body / response |
//! |---|---|---|
//! | POST | `/v1/segment` | [`SegmentRequest`] → [`SegmentResponse`] |
//! | GET | `/v1/health` | `{status, checkpoint_id}`; status is `loading` until a model is installed |
//! | GET | `/v1/images` | `[{image_id, width, height}]` |
//! | GET | `/v1/images/{id}` | PNG bytes |
//! | POST/GET | `/v1/annotations/{id}` | `{boxes}` → stored `WeakAnnotation` |
//! | POST | `/v1/pseudolabels/{id}/accept` | [`AcceptRequest`] → stored sidecar |
//! | GET | `/v1/pseudolabels/{id}` | sidecar plus `mask_png_base64` |
//!
//! Errors are `{"error": {"kind", "message", "box_index"?, "retry"?}}`.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use image::RgbImage;
use nucleisam::dataio::{decode_binary_mask_png, encode_binary_mask_png, Workspace};
use nucleisam::model::{checkpoint_load, BBox, PromptableSegmenter, Sam};
use nucleisam::pseudolabel::{
    generate_pseudo_mask, PseudoLabel, PseudoLabelParams, PseudoLabelStore, Provenance, Sidecar, WeakAnnotation,
};
use nucleisam::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{RwLock, Semaphore};

use crate::config::PipelineConfig;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentOptions {
    #[serde(default = "default_true")]
    pub return_confidences: bool,
    /// Overrides the configured binarisation threshold.
    pub threshold: Option<f32>,
}

fn default_true() -> bool {
    true
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions { return_confidences: true, threshold: None }
    }
}

/// Either `image_id` (an ingested image) or `image_png_base64` must be set.
/// Boxes are inclusive pixel bounds `[x0, y0, x1, y1]`.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub image_id: Option<String>,
    pub image_png_base64: Option<String>,
    #[serde(default)]
    pub boxes: Vec<BBox>,
    #[serde(default)]
    pub options: SegmentOptions,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct SegmentResponse {
    pub width: u32,
    pub height: u32,
    /// 0/255 grayscale PNG.
    pub mask_png_base64: String,
    pub per_box_confidence: Option<Vec<f32>>,
    pub checkpoint_id: String,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRequest {
    pub boxes: Vec<BBox>,
}

/// A reviewed mask confirmed by a user.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptRequest {
    pub boxes: Vec<BBox>,
    pub mask_png_base64: String,
    #[serde(default)]
    pub per_box_confidence: Vec<f32>,
    /// Model that produced the reviewed mask, if known.
    pub checkpoint_id: Option<String>,
}

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    box_index: Option<usize>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, kind, message: message.into(), box_index: None }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Image(image::ImageError::IoError(io)) if io.kind() == std::io::ErrorKind::NotFound => {
                StatusCode::NOT_FOUND
            }
            Error::InvalidArgument(_) | Error::Prompt { .. } | Error::Shape(_) | Error::Image(_) | Error::Json(_) => {
                StatusCode::BAD_REQUEST
            }
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            Error::Io { .. } => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let box_index = match &e {
            Error::Prompt { index, .. } => Some(*index),
            _ => None,
        };
        ApiError { status, kind: e.kind(), message: e.to_string(), box_index }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"kind": self.kind, "message": self.message});
        if let Some(i) = self.box_index {
            body["box_index"] = json!(i);
        }
        let retry = self.status == StatusCode::SERVICE_UNAVAILABLE;
        if retry {
            body["retry"] = json!(true);
        }
        let mut resp = (self.status, Json(json!({ "error": body }))).into_response();
        if retry {
            resp.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from_static("1"));
        }
        resp
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Shared service state. The model slot is empty until a checkpoint is
/// installed; installing waits for in-flight requests to finish.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    workspace: Workspace,
    params: PseudoLabelParams,
    max_boxes: usize,
    model: Arc<RwLock<Option<Arc<Sam>>>>,
    workers: Semaphore,
    store: PseudoLabelStore,
    weak_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl AppState {
    pub fn new(workspace: Workspace, cfg: &PipelineConfig) -> Self {
        AppState {
            inner: Arc::new(Inner {
                store: PseudoLabelStore::new(workspace.pseudolabel_dir()),
                workspace,
                params: cfg.pseudolabel.clone(),
                max_boxes: cfg.service.max_boxes,
                model: Arc::new(RwLock::new(None)),
                workers: Semaphore::new(cfg.service.workers.max(1)),
                weak_locks: Mutex::new(HashMap::new()),
            }),
        }
    }

    /// Replaces the served model once no request holds the current one.
    pub async fn install_model(&self, model: Sam) {
        *self.inner.model.write().await = Some(Arc::new(model));
    }

    pub async fn checkpoint_id(&self) -> Option<String> {
        self.inner.model.read().await.as_ref().map(|m| m.identifier())
    }

    fn weak_lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.inner.weak_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/segment", post(segment))
        .route("/v1/health", get(health))
        .route("/v1/images", get(list_images))
        .route("/v1/images/{id}", get(get_image))
        .route("/v1/annotations/{id}", post(save_annotation).get(get_annotation))
        .route("/v1/pseudolabels/{id}", get(get_pseudolabel))
        .route("/v1/pseudolabels/{id}/accept", post(accept_pseudolabel))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> nucleisam::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn decode_image(b64: &str) -> nucleisam::Result<RgbImage> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| Error::InvalidArgument(format!("image is not valid base64: {e}")))?;
    Ok(image::load_from_memory(&bytes)?.to_rgb8())
}

async fn segment(State(state): State<AppState>, Json(req): Json<SegmentRequest>) -> ApiResult<Json<SegmentResponse>> {
    let start = Instant::now();
    if req.boxes.len() > state.inner.max_boxes {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_argument",
            format!("{} boxes exceed the limit of {}", req.boxes.len(), state.inner.max_boxes),
        ));
    }
    let mut params = state.inner.params.clone();
    if let Some(t) = req.options.threshold {
        if !(t > 0.0 && t < 1.0) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_argument", "threshold must be in (0, 1)"));
        }
        params.threshold = t;
    }
    let guard = state.inner.model.clone().read_owned().await;
    if guard.is_none() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "loading", "model is not loaded yet"));
    }
    let _permit = state
        .inner
        .workers
        .acquire()
        .await
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutdown", e.to_string()))?;
    let ws = state.inner.workspace.clone();
    let (label, with_conf) = blocking(move || {
        let model = guard.as_ref().expect("checked above");
        let image = match (&req.image_id, &req.image_png_base64) {
            (Some(id), None) => {
                ws.image_dimensions(id)?;
                ws.load_image(id)?
            }
            (None, Some(b64)) => decode_image(b64)?,
            _ => return Err(Error::InvalidArgument("give exactly one of image_id and image_png_base64".into())),
        };
        let ann = WeakAnnotation { image_id: req.image_id.clone().unwrap_or_else(|| "inline".into()), boxes: req.boxes };
        let label = generate_pseudo_mask(model.as_ref(), &image, &ann, &params)?;
        Ok((label, req.options.return_confidences))
    })
    .await?;
    let png = encode_binary_mask_png(&label.mask)?;
    let (h, w) = label.mask.dim();
    Ok(Json(SegmentResponse {
        width: w as u32,
        height: h as u32,
        mask_png_base64: B64.encode(png),
        per_box_confidence: with_conf.then_some(label.per_box_confidence),
        checkpoint_id: label.provenance.checkpoint_id,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }))
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    match state.checkpoint_id().await {
        Some(id) => Json(json!({"status": "ready", "checkpoint_id": id})),
        None => Json(json!({"status": "loading", "checkpoint_id": null})),
    }
}

async fn list_images(State(state): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let ws = state.inner.workspace.clone();
    let list = blocking(move || {
        ws.image_ids()?
            .into_iter()
            .map(|id| {
                let (w, h) = ws.image_dimensions(&id)?;
                Ok(json!({"image_id": id, "width": w, "height": h}))
            })
            .collect::<nucleisam::Result<Vec<_>>>()
    })
    .await?;
    Ok(Json(json!(list)))
}

async fn get_image(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let path = state.inner.workspace.image_path(&id)?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| Error::io(&path, e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn save_annotation(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AnnotationRequest>,
) -> ApiResult<Json<WeakAnnotation>> {
    let ws = state.inner.workspace.clone();
    let lock = state.weak_lock(&id);
    let ann = blocking(move || {
        let (w, h) = ws.image_dimensions(&id)?;
        let ann = WeakAnnotation { image_id: id, boxes: req.boxes };
        ann.validate(w, h)?;
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        ws.save_weak(&ann)?;
        Ok(ann)
    })
    .await?;
    Ok(Json(ann))
}

async fn get_annotation(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<WeakAnnotation>> {
    let ws = state.inner.workspace.clone();
    let lock = state.weak_lock(&id);
    let ann = blocking(move || {
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        ws.load_weak(&id)
    })
    .await?;
    Ok(Json(ann))
}

async fn accept_pseudolabel(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AcceptRequest>,
) -> ApiResult<Json<Sidecar>> {
    let inner = state.inner.clone();
    let sidecar = blocking(move || {
        let (w, h) = inner.workspace.image_dimensions(&id)?;
        let bytes = B64
            .decode(&req.mask_png_base64)
            .map_err(|e| Error::InvalidArgument(format!("mask is not valid base64: {e}")))?;
        let mask = decode_binary_mask_png(&bytes)?;
        if mask.dim() != (h as usize, w as usize) {
            return Err(Error::Shape(format!("mask is {:?}, image {id} is {w}x{h}", mask.dim())));
        }
        let ann = WeakAnnotation { image_id: id.clone(), boxes: req.boxes };
        ann.validate(w, h)?;
        let label = PseudoLabel {
            image_id: id,
            boxes: ann.boxes,
            mask,
            per_box_confidence: req.per_box_confidence,
            provenance: Provenance {
                checkpoint_id: req.checkpoint_id.unwrap_or_else(|| "unknown".into()),
                params: inner.params.clone(),
                source: "accepted".into(),
            },
        };
        let sidecar = Sidecar::of(&label);
        sidecar.validate()?;
        inner.store.save(&label)?;
        Ok(sidecar)
    })
    .await?;
    Ok(Json(sidecar))
}

async fn get_pseudolabel(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let inner = state.inner.clone();
    let value = blocking(move || {
        let label = inner.store.load(&id)?;
        let png = encode_binary_mask_png(&label.mask)?;
        let mut v = serde_json::to_value(Sidecar::of(&label))?;
        v["mask_png_base64"] = json!(B64.encode(png));
        Ok(v)
    })
    .await?;
    Ok(Json(value))
}

/// Binds `addr`, starts loading `checkpoint` in the background and serves
/// until interrupted.
pub fn serve_blocking(
    workspace: Workspace,
    cfg: PipelineConfig,
    checkpoint: Option<PathBuf>,
    addr: &str,
) -> nucleisam::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(async move {
        let state = AppState::new(workspace, &cfg);
        if let Some(path) = checkpoint {
            let st = state.clone();
            tokio::spawn(async move {
                match tokio::task::spawn_blocking(move || checkpoint_load(&path)).await {
                    Ok(Ok(model)) => {
                        log::info!("serving checkpoint {}", model.identifier());
                        st.install_model(model).await;
                    }
                    Ok(Err(e)) => log::error!("checkpoint load failed: {e}"),
                    Err(e) => log::error!("checkpoint load panicked: {e}"),
                }
            });
        }
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr, e))?;
        log::info!("listening on {addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io(addr, e))
    })
}
