//! HTTP caption service: `POST /api/caption`, `GET /api/health`.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use jewelcap::augment::Image;
use jewelcap::captioner::CaptionerModel;
use jewelcap::synth::CaptionLevel;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::ServeArgs;

pub const MAX_UPLOAD_BYTES: usize = 5 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub caption: String,
    pub level: CaptionLevel,
    /// Checksum of the checkpoint that produced the caption.
    pub model_id: String,
    pub latency_ms: f64,
}

#[derive(Debug, Deserialize)]
struct JsonCaptionRequest {
    /// Base64-encoded PNG.
    image: String,
    level: Option<String>,
}

/// Loaded models, one slot per description level. Immutable once serving.
#[derive(Clone, Default)]
pub struct AppState {
    slots: [Option<Arc<LoadedModel>>; 3],
}

struct LoadedModel {
    model: CaptionerModel,
    checksum: String,
}

fn slot(level: CaptionLevel) -> usize {
    match level {
        CaptionLevel::Basic => 0,
        CaptionLevel::Normal => 1,
        CaptionLevel::Complete => 2,
    }
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs `model` for `level`; the model must have been trained for
    /// that level (a classification model answers `basic`).
    pub fn insert(&mut self, level: CaptionLevel, model: CaptionerModel) -> anyhow::Result<()> {
        if model.answers_level() != level {
            bail!("checkpoint answers level {}, cannot serve {level}", model.answers_level());
        }
        if !model.uses_images() {
            bail!("checkpoint reads stored features and cannot caption uploaded images");
        }
        let checksum = model.checksum();
        self.slots[slot(level)] = Some(Arc::new(LoadedModel { model, checksum }));
        Ok(())
    }

    pub fn load(basic: Option<&PathBuf>, normal: Option<&PathBuf>, complete: Option<&PathBuf>) -> anyhow::Result<Self> {
        let mut state = Self::new();
        for (level, path) in [
            (CaptionLevel::Basic, basic),
            (CaptionLevel::Normal, normal),
            (CaptionLevel::Complete, complete),
        ] {
            if let Some(p) = path {
                let model = CaptionerModel::load(p).with_context(|| format!("loading {}", p.display()))?;
                state.insert(level, model).with_context(|| format!("{} for --{level}", p.display()))?;
            }
        }
        Ok(state)
    }

    pub fn checksum(&self, level: CaptionLevel) -> Option<&str> {
        self.slots[slot(level)].as_ref().map(|m| m.checksum.as_str())
    }
}

struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
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
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

pub fn router(state: AppState, cors_origin: Option<&str>) -> anyhow::Result<Router> {
    let mut app = Router::new()
        .route("/api/caption", post(caption))
        .route("/api/health", get(health))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state);
    if let Some(origin) = cors_origin {
        let origin = HeaderValue::from_str(origin).context("invalid --cors-origin")?;
        app = app.layer(
            CorsLayer::new()
                .allow_origin(origin)
                .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        );
    }
    Ok(app)
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "models": {
            "basic": state.checksum(CaptionLevel::Basic),
            "normal": state.checksum(CaptionLevel::Normal),
            "complete": state.checksum(CaptionLevel::Complete),
        }
    }))
}

async fn read_request(req: Request) -> Result<(Bytes, Option<String>), ApiError> {
    let content_type = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("")
        .to_ascii_lowercase();
    if content_type.starts_with("multipart/form-data") {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::new(e.status(), "invalid_request", e.body_text()))?;
        let mut image = None;
        let mut level = None;
        while let Some(field) = form
            .next_field()
            .await
            .map_err(|e| ApiError::new(e.status(), "invalid_request", e.body_text()))?
        {
            match field.name() {
                Some("image") => {
                    image = Some(field.bytes().await.map_err(|e| ApiError::new(e.status(), "invalid_image", e.body_text()))?)
                }
                Some("level") => {
                    level = Some(field.text().await.map_err(|e| ApiError::bad_request("unknown_level", e.body_text()))?)
                }
                _ => {}
            }
        }
        let image = image.ok_or_else(|| ApiError::bad_request("invalid_image", "missing `image` field"))?;
        Ok((image, level))
    } else {
        let body = Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::new(e.status(), "invalid_request", e.body_text()))?;
        let parsed: JsonCaptionRequest = serde_json::from_slice(&body)
            .map_err(|e| ApiError::bad_request("invalid_request", format!("expected JSON {{image, level}}: {e}")))?;
        let image = base64::engine::general_purpose::STANDARD
            .decode(parsed.image.trim())
            .map_err(|e| ApiError::bad_request("invalid_image", format!("image is not valid base64: {e}")))?;
        Ok((Bytes::from(image), parsed.level))
    }
}

async fn caption(State(state): State<AppState>, req: Request) -> Result<Json<CaptionResponse>, ApiError> {
    let started = Instant::now();
    let (bytes, level) = read_request(req).await?;
    let level = match level.as_deref().map(str::trim) {
        None | Some("") => CaptionLevel::Complete,
        Some(s) => s
            .parse::<CaptionLevel>()
            .map_err(|_| ApiError::bad_request("unknown_level", format!("unknown level `{s}`")))?,
    };
    let loaded = state.slots[slot(level)].clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model_not_loaded",
            format!("no model loaded for level {level}"),
        )
    })?;
    let image = Image::decode(&bytes).map_err(|e| ApiError::bad_request("invalid_image", e.to_string()))?;
    let caption = tokio::task::spawn_blocking(move || loaded.model.describe(&image).map(|c| (c, loaded)))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let (caption, loaded) = caption;
    Ok(Json(CaptionResponse {
        caption,
        level,
        model_id: loaded.checksum.clone(),
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}

pub(crate) fn serve_blocking(args: ServeArgs) -> anyhow::Result<()> {
    let state = AppState::load(args.basic.as_ref(), args.normal.as_ref(), args.complete.as_ref())?;
    let app = router(state.clone(), args.cors_origin.as_deref())?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.addr)
            .await
            .with_context(|| format!("binding {}", args.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        for level in CaptionLevel::ALL {
            match state.checksum(level) {
                Some(c) => eprintln!("  {level}: {c}"),
                None => eprintln!("  {level}: not loaded"),
            }
        }
        axum::serve(listener, app).await?;
        Ok(())
    })
}
