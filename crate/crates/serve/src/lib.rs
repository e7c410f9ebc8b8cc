//! HTTP inference endpoint: `POST /classify` and `GET /healthz`.
//!
//! The model is loaded once and shared read-only. Plain classification runs
//! concurrently; Grad-CAM requests go through a bounded pool of permits.

use std::io::Cursor;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::extract::multipart::MultipartError;
use axum::extract::{DefaultBodyLimit, Multipart, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use tiger_triage::dataset::Class;
use tiger_triage::gradcam;
use tiger_triage::model::{load_checkpoint, ClassSelector, ClassifierNet, GradientTarget, LayerTag};
use tiger_triage::nn;
use tiger_triage::preprocess::{apply_norm, decode_rgb_bytes, Preprocessor};
use tokio::sync::Semaphore;

/// Smartphone photos stay well under this.
pub const MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub max_upload_bytes: usize,
    /// Concurrent Grad-CAM computations.
    pub gradcam_slots: usize,
    pub timeout: Duration,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            max_upload_bytes: MAX_UPLOAD_BYTES,
            gradcam_slots: 2,
            timeout: Duration::from_secs(30),
        }
    }
}

/// A checkpoint ready for inference.
pub struct ServedModel {
    pub net: ClassifierNet<f32>,
    pub pre: Preprocessor,
    pub model_hash: String,
    pub deep_layer: String,
}

impl ServedModel {
    pub fn load(checkpoint: &Path) -> Result<Self, ApiError> {
        let loaded = load_checkpoint::<f32>(checkpoint).map_err(|e| ApiError::internal(e.to_string()))?;
        let deep_layer = loaded
            .net
            .layer_for_tag(LayerTag::Deep)
            .ok_or_else(|| ApiError::internal("checkpoint has no deep layer"))?
            .to_string();
        Ok(Self {
            pre: Preprocessor::new(loaded.meta.image_size, loaded.norm_stats),
            net: loaded.net,
            model_hash: loaded.meta.model_hash,
            deep_layer,
        })
    }

    /// Class, its probability and optionally the deep-layer overlay as PNG bytes.
    pub fn classify(&self, bytes: &[u8], explain: bool) -> Result<(Class, f64, Option<Vec<u8>>), ApiError> {
        let rgb = decode_rgb_bytes(bytes).map_err(|e| ApiError::undecodable(e.to_string()))?;
        let raw = self
            .pre
            .raw_from_rgb::<f32>(&rgb, "upload")
            .map_err(|e| ApiError::undecodable(e.to_string()))?;
        let x = apply_norm(&raw, &self.pre.stats)
            .map_err(|e| ApiError::internal(e.to_string()))?
            .data
            .insert_axis(ndarray::Axis(0));
        let probs = self.net.forward(&x).map_err(|e| ApiError::internal(e.to_string()))?;
        let k = nn::argmax(probs.row(0));
        let overlay = if explain {
            let acts = self
                .net
                .forward_with_capture(&x, &self.deep_layer, ClassSelector::Index(k), GradientTarget::Score)
                .map_err(|e| ApiError::internal(e.to_string()))?;
            let img = gradcam::upsample_overlay(&gradcam::heatmap(&acts), &raw).map_err(|e| ApiError::internal(e.to_string()))?;
            let mut png = Vec::new();
            img.write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
                .map_err(|e| ApiError::internal(e.to_string()))?;
            Some(png)
        } else {
            None
        };
        Ok((Class::from_index(k), probs[[0, k]] as f64, overlay))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResponse {
    pub class: Class,
    /// Softmax probability of `class`; at least 0.5.
    pub probability: f64,
    pub model_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap_png: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_hash: Option<String>,
    pub uptime_secs: f64,
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            error,
            message: message.into(),
        }
    }

    pub fn undecodable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "UndecodableImage", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", message)
    }

    fn not_loaded() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "ModelNotLoaded", "model is still loading")
    }

    fn from_multipart(e: MultipartError) -> Self {
        match e.status() {
            StatusCode::PAYLOAD_TOO_LARGE => Self::new(StatusCode::PAYLOAD_TOO_LARGE, "TooLarge", e.body_text()),
            _ => Self::new(StatusCode::BAD_REQUEST, "BadRequest", e.body_text()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<OnceLock<Arc<ServedModel>>>,
    cam_slots: Arc<Semaphore>,
    started: Instant,
    config: ServeConfig,
}

impl AppState {
    pub fn new(config: ServeConfig) -> Self {
        Self {
            model: Arc::new(OnceLock::new()),
            cam_slots: Arc::new(Semaphore::new(config.gradcam_slots.max(1))),
            started: Instant::now(),
            config,
        }
    }

    /// Installs the model; later calls are ignored.
    pub fn set_model(&self, model: ServedModel) {
        let _ = self.model.set(Arc::new(model));
    }

    pub fn model(&self) -> Option<Arc<ServedModel>> {
        self.model.get().cloned()
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/classify", post(classify))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn healthz(State(state): State<AppState>) -> (StatusCode, Json<Health>) {
    let model = state.model();
    let status = if model.is_some() {
        StatusCode::OK
    } else {
        StatusCode::SERVICE_UNAVAILABLE
    };
    (
        status,
        Json(Health {
            status: if model.is_some() { "ok" } else { "loading" }.into(),
            model_hash: model.map(|m| m.model_hash.clone()),
            uptime_secs: state.started.elapsed().as_secs_f64(),
        }),
    )
}

#[derive(Debug, Default, Deserialize)]
struct ClassifyQuery {
    #[serde(default)]
    explain: bool,
}

async fn classify(
    State(state): State<AppState>,
    Query(query): Query<ClassifyQuery>,
    mut multipart: Multipart,
) -> Result<Json<ClassificationResponse>, ApiError> {
    let model = state.model().ok_or_else(ApiError::not_loaded)?;
    let mut bytes = None;
    while let Some(field) = multipart.next_field().await.map_err(ApiError::from_multipart)? {
        if field.name() == Some("image") || field.file_name().is_some() {
            bytes = Some(field.bytes().await.map_err(ApiError::from_multipart)?);
            break;
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "BadRequest", "no image field"))?;

    let _permit = if query.explain {
        Some(state.cam_slots.clone().acquire_owned().await.map_err(|e| ApiError::internal(e.to_string()))?)
    } else {
        None
    };
    let explain = query.explain;
    let m = model.clone();
    let job = tokio::task::spawn_blocking(move || m.classify(&bytes, explain));
    let (class, probability, png) = tokio::time::timeout(state.config.timeout, job)
        .await
        .map_err(|_| ApiError::new(StatusCode::GATEWAY_TIMEOUT, "Timeout", "inference timed out"))?
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(ClassificationResponse {
        class,
        probability,
        model_hash: model.model_hash.clone(),
        heatmap_png: png.map(|p| base64::engine::general_purpose::STANDARD.encode(p)),
    }))
}

/// Binds `addr` straight away and loads the checkpoint in the background;
/// requests get 503 until it is ready.
pub async fn serve(addr: SocketAddr, checkpoint: PathBuf, config: ServeConfig) -> std::io::Result<()> {
    let state = AppState::new(config);
    let loader = state.clone();
    tokio::task::spawn_blocking(move || match ServedModel::load(&checkpoint) {
        Ok(model) => {
            tracing::info!(hash = %model.model_hash, "model loaded");
            loader.set_model(model);
        }
        Err(e) => tracing::error!(error = %e.message, "failed to load checkpoint"),
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(state)).await
}
