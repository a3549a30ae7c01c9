//! HTTP inference API for the screening client.
//!
//! `POST /api/v1/predict`, `GET /api/v1/models`, `GET /api/v1/health` and
//! `POST /api/v1/admin/reload`. Request and response bodies are JSON; images
//! travel base64-encoded. Loaded models are immutable and shared; a reload
//! swaps the whole catalog at once.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::data::{decode_rgb, preprocess_rgb, CropRect, PreprocessConfig};
use crate::deploy::{ArtifactMeta, ModelArtifact, Precision, META_FILE};
use crate::error::{Error, Result};
use crate::labels::TaskKind;
use crate::model::TrainedModel;
use crate::tensor::ValueRange;
use crate::xai::{grad_cam, overlay, Colormap};

pub const DISCLAIMER: &str = "Preliminary screening aid only. This result is not a medical diagnosis; \
consult a qualified clinician about any skin lesion.";

/// Largest accepted decoded image, in bytes.
pub const MAX_IMAGE_BYTES: usize = 10 * 1024 * 1024;

/// Request bodies carry base64 (4/3 expansion) plus a little JSON.
pub const MAX_BODY_BYTES: usize = MAX_IMAGE_BYTES / 3 * 4 + 64 * 1024;

pub const DEFAULT_OVERLAY_ALPHA: f32 = 0.4;

/// One loaded artifact.
#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub id: String,
    pub meta: ArtifactMeta,
    pub model: Arc<TrainedModel>,
}

impl CatalogEntry {
    pub fn from_artifact(id: impl Into<String>, artifact: &ModelArtifact) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            meta: artifact.meta.clone(),
            model: Arc::new(artifact.load_model()?),
        })
    }

    /// Short content hash of the blob; identifies the exact weights served.
    pub fn version(&self) -> String {
        self.meta.blob_sha256.chars().take(12).collect()
    }

    pub fn info(&self) -> ModelInfo {
        let (h, w) = self.model.model.backbone.input_hw();
        ModelInfo {
            id: self.id.clone(),
            backbone: self.meta.provenance.backbone.clone(),
            task: self.model.model.task,
            precision: self.meta.precision,
            version: self.version(),
            class_names: self.model.model.task.class_names().into_iter().map(String::from).collect(),
            input_size: [h, w],
        }
    }
}

/// Models available to the service, ordered by id.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn new(mut entries: Vec<CatalogEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::DuplicateId(w[0].id.clone()));
        }
        Ok(Self { entries })
    }

    /// Every subdirectory of `dir` holding an artifact, keyed by its name.
    /// `dir` may itself be a single artifact directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if dir.join(META_FILE).is_file() {
            let id = dir.file_name().map_or("model".into(), |n| n.to_string_lossy().into_owned());
            return Self::new(vec![CatalogEntry::from_artifact(id, &ModelArtifact::read(dir)?)?]);
        }
        let mut entries = Vec::new();
        for item in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = item.map_err(|e| Error::io(dir, e))?.path();
            if path.join(META_FILE).is_file() {
                let id = path.file_name().expect("directory entry").to_string_lossy().into_owned();
                entries.push(CatalogEntry::from_artifact(id, &ModelArtifact::read(&path)?)?);
            }
        }
        Self::new(entries)
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The named model, or the first one when no id is given.
    pub fn get(&self, id: Option<&str>) -> Option<&CatalogEntry> {
        match id {
            Some(id) => self.entries.iter().find(|e| e.id == id),
            None => self.entries.first(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AppState {
    catalog: Arc<RwLock<Arc<Catalog>>>,
    model_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(catalog: Catalog) -> Self {
        Self {
            catalog: Arc::new(RwLock::new(Arc::new(catalog))),
            model_dir: None,
        }
    }

    /// Load every artifact under `dir`; the admin reload re-reads it.
    pub fn from_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let catalog = Catalog::load_dir(&dir)?;
        Ok(Self {
            model_dir: Some(dir),
            ..Self::new(catalog)
        })
    }

    pub fn catalog(&self) -> Arc<Catalog> {
        self.catalog.read().expect("catalog lock").clone()
    }

    /// Re-read the model directory and swap the catalog in one step.
    pub fn reload(&self) -> Result<usize> {
        let dir = self
            .model_dir
            .as_ref()
            .ok_or_else(|| Error::invalid("service was not started from a model directory"))?;
        let fresh = Arc::new(Catalog::load_dir(dir)?);
        let n = fresh.len();
        *self.catalog.write().expect("catalog lock") = fresh;
        Ok(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub backbone: String,
    pub task: TaskKind,
    pub precision: Precision,
    pub version: String,
    /// In class-code order.
    pub class_names: Vec<String>,
    pub input_size: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    /// Base64-encoded JPEG or PNG.
    pub image: String,
    #[serde(default)]
    pub crop: Option<CropRect>,
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub explain: bool,
    #[serde(default)]
    pub colormap: Option<Colormap>,
    #[serde(default)]
    pub alpha: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProbability {
    pub label: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    /// In class-code order.
    pub probabilities: Vec<ClassProbability>,
    pub top_label: String,
    pub top_index: usize,
    pub model: ModelInfo,
    /// The crop applied, echoed from the request.
    pub crop: Option<CropRect>,
    /// Base64 PNG of the Grad-CAM overlay at the model's input size.
    pub overlay_png: Option<String>,
    pub latency_ms: f64,
    pub disclaimer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
    pub models: usize,
    pub disclaimer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub models: Vec<ModelInfo>,
    pub disclaimer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorDetail,
    pub disclaimer: String,
}

/// An error with its HTTP status and machine-readable code.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorResponse {
            error: ErrorDetail {
                code: self.code.into(),
                message: self.message,
            },
            disclaimer: DISCLAIMER.into(),
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Decode(_) => Self::bad_request("undecodable_image", e.to_string()),
            Error::CropOutOfBounds { .. } => Self::bad_request("crop_out_of_bounds", e.to_string()),
            Error::InvalidArgument(_) => Self::bad_request("invalid_argument", e.to_string()),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

/// The inference path shared by the HTTP handler and in-process callers.
pub fn predict(catalog: &Catalog, request: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let start = Instant::now();
    if catalog.is_empty() {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_models", "no models are loaded"));
    }
    let entry = catalog.get(request.model_id.as_deref()).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_model",
            format!("no model with id {:?}", request.model_id.as_deref().unwrap_or_default()),
        )
    })?;
    let bytes = B64
        .decode(request.image.trim())
        .map_err(|e| ApiError::bad_request("invalid_base64", format!("image is not valid base64: {e}")))?;
    if bytes.len() > MAX_IMAGE_BYTES {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("image of {} bytes exceeds the {MAX_IMAGE_BYTES}-byte limit", bytes.len()),
        ));
    }
    let alpha = request.alpha.unwrap_or(DEFAULT_OVERLAY_ALPHA);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ApiError::bad_request("invalid_argument", format!("alpha {alpha} outside [0, 1]")));
    }

    let decoded = decode_rgb(&bytes)?;
    let model = &entry.model.model;
    let tensor = preprocess_rgb(&decoded, &input_config(entry, request.crop))?;
    let probs = model.predict(&tensor)?;
    let top_index = crate::model::argmax(&probs);
    let names = model.task.class_names();

    let overlay_png = if request.explain {
        let cam = grad_cam(model, &tensor, top_index)?;
        let img = overlay(&tensor, &cam, alpha, request.colormap.unwrap_or_default())?;
        Some(B64.encode(img.to_png()?))
    } else {
        None
    };

    Ok(PredictResponse {
        probabilities: names
            .iter()
            .zip(&probs)
            .map(|(n, p)| ClassProbability {
                label: n.to_string(),
                probability: *p,
            })
            .collect(),
        top_label: names[top_index].to_string(),
        top_index,
        model: entry.info(),
        crop: request.crop,
        overlay_png,
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
        disclaimer: DISCLAIMER.into(),
    })
}

/// Preprocessing applied to uploads for `entry`: crop, resize to the
/// backbone input, raw 0..255 values.
pub fn input_config(entry: &CatalogEntry, crop: Option<CropRect>) -> PreprocessConfig {
    let (h, w) = entry.model.model.backbone.input_hw();
    PreprocessConfig {
        target_height: h as u32,
        target_width: w as u32,
        value_range: ValueRange::Raw,
        crop,
    }
}

async fn handle_predict(
    State(state): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<PredictResponse>, ApiError> {
    let body = body.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                "payload_too_large",
                format!("request body exceeds {MAX_BODY_BYTES} bytes"),
            )
        } else {
            ApiError::bad_request("unreadable_body", e.body_text())
        }
    })?;
    let request: PredictRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request("invalid_json", format!("request body is not a valid predict request: {e}")))?;
    let catalog = state.catalog();
    tokio::task::spawn_blocking(move || predict(&catalog, &request))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map(Json)
}

async fn handle_models(State(state): State<AppState>) -> Json<ModelsResponse> {
    Json(ModelsResponse {
        models: state.catalog().entries().iter().map(CatalogEntry::info).collect(),
        disclaimer: DISCLAIMER.into(),
    })
}

async fn handle_health(State(state): State<AppState>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        models: state.catalog().len(),
        disclaimer: DISCLAIMER.into(),
    })
}

async fn handle_reload(State(state): State<AppState>) -> Result<Json<ModelsResponse>, ApiError> {
    let s = state.clone();
    tokio::task::spawn_blocking(move || s.reload())
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| match e {
            Error::InvalidArgument(m) => ApiError::new(StatusCode::CONFLICT, "reload_unavailable", m),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "reload_failed", other.to_string()),
        })?;
    Ok(handle_models(State(state)).await)
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/predict", post(handle_predict))
        .route("/api/v1/models", get(handle_models))
        .route("/api/v1/health", get(handle_health))
        .route("/api/v1/admin/reload", post(handle_reload))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serve until interrupted.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_follow_the_error_kind() {
        let e: ApiError = Error::Decode("x".into()).into();
        assert_eq!((e.status, e.code), (StatusCode::BAD_REQUEST, "undecodable_image"));
        let e: ApiError = Error::CropOutOfBounds {
            rect: "r".into(),
            width: 1,
            height: 1,
        }
        .into();
        assert_eq!(e.code, "crop_out_of_bounds");
        let e: ApiError = Error::Graph("g".into()).into();
        assert_eq!(e.status, StatusCode::INTERNAL_SERVER_ERROR);
    }

    #[test]
    fn body_limit_admits_a_full_size_base64_image() {
        assert!(MAX_BODY_BYTES >= MAX_IMAGE_BYTES.div_ceil(3) * 4);
    }

    #[test]
    fn empty_catalog_reports_unavailable() {
        let c = Catalog::default();
        let req = PredictRequest {
            image: String::new(),
            crop: None,
            model_id: None,
            explain: false,
            colormap: None,
            alpha: None,
        };
        assert_eq!(predict(&c, &req).unwrap_err().code, "no_models");
    }
}
