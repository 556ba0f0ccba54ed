//! HTTP render service.
//!
//! `POST /styles` registers a style image and answers `{"id": ...}`;
//! `GET /render` renders an orbit view as PNG; `GET /scene/meta` and
//! `GET /healthz` describe the loaded scene.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxstyle::io::{alpha_over, decode_image, encode_depth_png, encode_png};
use voxstyle::style::StyleCode;

use crate::model::Model;

pub const DEFAULT_MAX_RESOLUTION: usize = 512;
/// Hex characters of the content hash kept as a style id.
const STYLE_ID_LEN: usize = 16;

pub struct ServiceState {
    model: Model,
    styles: RwLock<BTreeMap<String, Arc<StyleCode>>>,
    max_resolution: usize,
    renders: AtomicU64,
    registrations: AtomicU64,
}

impl ServiceState {
    pub fn new(model: Model, max_resolution: usize) -> Self {
        Self {
            model,
            styles: RwLock::new(BTreeMap::new()),
            max_resolution,
            renders: AtomicU64::new(0),
            registrations: AtomicU64::new(0),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn style(&self, id: &str) -> Option<Arc<StyleCode>> {
        self.styles.read().expect("style registry poisoned").get(id).cloned()
    }
}

/// Content address of an uploaded style image.
pub fn style_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(digest)[..STYLE_ID_LEN].to_string()
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/scene/meta", get(scene_meta))
        .route("/styles", post(register_style))
        .route("/render", get(render))
        .with_state(state)
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

async fn healthz() -> &'static str {
    "ok"
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct SceneMeta {
    pub bbox_min: [f32; 3],
    pub bbox_max: [f32; 3],
    pub radius: f32,
    pub near: f32,
    pub far: f32,
    pub background: [f32; 3],
    pub stylizable: bool,
    pub max_resolution: usize,
    pub styles: usize,
    pub renders: u64,
    pub registrations: u64,
}

async fn scene_meta(State(s): State<Arc<ServiceState>>) -> Json<SceneMeta> {
    let m = s.model.meta();
    Json(SceneMeta {
        bbox_min: m.bbox_min,
        bbox_max: m.bbox_max,
        radius: m.radius,
        near: m.near,
        far: m.far,
        background: m.background,
        stylizable: s.model.can_stylize(),
        max_resolution: s.max_resolution,
        styles: s.styles.read().expect("style registry poisoned").len(),
        renders: s.renders.load(Ordering::Relaxed),
        registrations: s.registrations.load(Ordering::Relaxed),
    })
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct StyleRegistered {
    pub id: String,
}

async fn register_style(State(s): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    if !s.model.can_stylize() {
        return Err(ApiError(StatusCode::CONFLICT, "loaded checkpoint has no style stage".into()));
    }
    let id = style_id(&body);
    if s.style(&id).is_some() {
        return Ok((StatusCode::OK, Json(StyleRegistered { id })).into_response());
    }
    let state = s.clone();
    let code = tokio::task::spawn_blocking(move || -> Result<StyleCode, ApiError> {
        let mut img = decode_image(&body).map_err(|e| bad_request(format!("undecodable image: {e}")))?;
        if img.channels() == 4 {
            img = alpha_over(&img, [1.0; 3]).map_err(|e| bad_request(e.to_string()))?;
        }
        state.model.style_code(&img).map_err(|e| bad_request(format!("{e:#}")))
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    // a concurrent upload of the same bytes computed the same code, so either insert is fine
    s.styles
        .write()
        .expect("style registry poisoned")
        .entry(id.clone())
        .or_insert_with(|| Arc::new(code));
    s.registrations.fetch_add(1, Ordering::Relaxed);
    Ok((StatusCode::CREATED, Json(StyleRegistered { id })).into_response())
}

#[derive(Deserialize, Debug)]
pub struct RenderQuery {
    #[serde(default)]
    pub yaw: f32,
    #[serde(default = "default_pitch")]
    pub pitch: f32,
    pub radius: Option<f32>,
    #[serde(default = "default_fov")]
    pub fov: f32,
    #[serde(default = "default_extent")]
    pub w: usize,
    #[serde(default = "default_extent")]
    pub h: usize,
    pub style: Option<String>,
    #[serde(default)]
    pub depth: u8,
}

fn default_pitch() -> f32 {
    25.0
}

fn default_fov() -> f32 {
    40.0
}

fn default_extent() -> usize {
    100
}

async fn render(State(s): State<Arc<ServiceState>>, Query(q): Query<RenderQuery>) -> Result<Response, ApiError> {
    if q.w > s.max_resolution || q.h > s.max_resolution {
        return Err(bad_request(format!(
            "resolution {}x{} exceeds the maximum {}",
            q.w, q.h, s.max_resolution
        )));
    }
    if q.depth > 1 {
        return Err(bad_request("depth must be 0 or 1"));
    }
    let code = match &q.style {
        Some(id) => Some(s.style(id).ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown style id {id}")))?),
        None => None,
    };
    let radius = q.radius.unwrap_or(s.model.meta().radius);
    let camera = s
        .model
        .orbit_camera(q.yaw, q.pitch, radius, q.fov, q.w, q.h)
        .map_err(|e| bad_request(format!("{e:#}")))?;
    let state = s.clone();
    let png = tokio::task::spawn_blocking(move || -> anyhow::Result<Vec<u8>> {
        let r = state.model.render(&camera, code.as_deref())?;
        Ok(if q.depth == 1 {
            encode_depth_png(&r.depth, state.model.meta().far)?
        } else {
            encode_png(&r.rgb)?
        })
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}")))?;
    s.renders.fetch_add(1, Ordering::Relaxed);
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<ServiceState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
