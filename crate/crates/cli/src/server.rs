//! HTTP inference service: register support examples once, then predict on
//! query images against the stored session.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use image::{ImageFormat, RgbImage};
use pomnet::data::{Keypoint, Visibility};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::inference::{InferenceModel, PredictedKeypoint, SupportExample};

pub const MAX_IMAGE_BYTES: usize = 8 * 1024 * 1024;
pub const SESSION_TTL: Duration = Duration::from_secs(3600);
const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            error,
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.error, "detail": self.detail}))).into_response()
    }
}

struct Session {
    category: Option<String>,
    keypoint_names: Vec<String>,
    supports: Arc<Vec<SupportExample>>,
    created: Instant,
}

#[derive(Clone)]
pub struct AppState {
    model: Arc<InferenceModel>,
    sessions: Arc<Mutex<HashMap<String, Session>>>,
    ttl: Duration,
}

impl AppState {
    pub fn new(model: InferenceModel) -> Self {
        Self::with_ttl(model, SESSION_TTL)
    }

    pub fn with_ttl(model: InferenceModel, ttl: Duration) -> Self {
        Self {
            model: Arc::new(model),
            sessions: Arc::new(Mutex::new(HashMap::new())),
            ttl,
        }
    }

    fn purge_expired(&self, sessions: &mut HashMap<String, Session>) {
        sessions.retain(|_, s| s.created.elapsed() < self.ttl);
    }
}

pub fn router(state: AppState, cors: bool) -> Router {
    let app = Router::new()
        .route("/api/health", get(health))
        .route("/api/support", post(register_support))
        .route("/api/predict", post(predict))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state);
    if cors {
        app.layer(tower_http::cors::CorsLayer::permissive())
    } else {
        app
    }
}

pub async fn serve(model: InferenceModel, host: &str, port: u16, cors: bool) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("serving {} on http://{}", model.model_id(), listener.local_addr()?);
    axum::serve(listener, router(AppState::new(model), cors)).await?;
    Ok(())
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "model_id": state.model.model_id()}))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportRequest {
    #[serde(default)]
    category: Option<String>,
    #[serde(default)]
    keypoint_names: Option<Vec<String>>,
    supports: Vec<SupportImage>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SupportImage {
    image: String,
    /// `[x, y]` or `[x, y, v]` in image pixels.
    keypoints: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct SupportResponse {
    session_id: String,
    num_keypoints: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    session_id: String,
    image: String,
}

#[derive(Serialize)]
struct PredictResponse {
    keypoints: Vec<PredictedKeypoint>,
    keypoint_names: Vec<String>,
    category: Option<String>,
    model_id: String,
    timing_ms: f64,
}

fn parse_body<T: serde::de::DeserializeOwned>(body: Result<Bytes, BytesRejection>) -> Result<T, ApiError> {
    let body = body.map_err(|r| {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", r.body_text())
        } else {
            ApiError::bad_request(r.body_text())
        }
    })?;
    serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

/// Decodes a base64 PNG or JPEG, optionally wrapped in a data URL.
pub fn decode_image(data: &str) -> Result<RgbImage, ApiError> {
    let payload = match data.split_once(',') {
        Some((head, rest)) if head.starts_with("data:") => rest,
        _ => data,
    };
    if payload.len() / 4 * 3 > MAX_IMAGE_BYTES + 3 {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("images are limited to {MAX_IMAGE_BYTES} bytes"),
        ));
    }
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(payload.trim())
        .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?;
    if bytes.len() > MAX_IMAGE_BYTES {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("image is {} bytes, limit {MAX_IMAGE_BYTES}", bytes.len()),
        ));
    }
    let undecodable = |detail: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "undecodable_image", detail);
    match image::guess_format(&bytes) {
        Ok(ImageFormat::Png | ImageFormat::Jpeg) => {}
        _ => return Err(undecodable("expected a PNG or JPEG image".into())),
    }
    let img = image::load_from_memory(&bytes).map_err(|e| undecodable(e.to_string()))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(undecodable("image has no pixels".into()));
    }
    Ok(img.to_rgb8())
}

fn parse_keypoints(raw: &[Vec<f64>], image: &RgbImage, index: usize) -> Result<Vec<Keypoint>, ApiError> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    raw.iter()
        .enumerate()
        .map(|(j, k)| {
            let (x, y, v) = match k.as_slice() {
                [x, y] => (*x, *y, Visibility::Visible),
                [x, y, v] => (
                    *x,
                    *y,
                    Visibility::from_flag(*v)
                        .ok_or_else(|| ApiError::bad_request(format!("support {index} keypoint {j}: bad visibility {v}")))?,
                ),
                _ => {
                    return Err(ApiError::bad_request(format!(
                        "support {index} keypoint {j}: expected [x, y] or [x, y, v]"
                    )))
                }
            };
            if v.is_labeled() && !(x >= 0.0 && x <= w && y >= 0.0 && y <= h) {
                return Err(ApiError::bad_request(format!(
                    "support {index} keypoint {j} at ({x}, {y}) lies outside the {w}x{h} image"
                )));
            }
            Ok(Keypoint::new(x, y, v))
        })
        .collect()
}

async fn register_support(
    State(state): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<SupportResponse>, ApiError> {
    let req: SupportRequest = parse_body(body)?;
    let first = req
        .supports
        .first()
        .ok_or_else(|| ApiError::bad_request("at least one support image is required"))?;
    let j = first.keypoints.len();
    if j == 0 {
        return Err(ApiError::bad_request("supports need at least one keypoint"));
    }
    if let Some((i, s)) = req.supports.iter().enumerate().find(|(_, s)| s.keypoints.len() != j) {
        return Err(ApiError::bad_request(format!(
            "support {i} has {} keypoints, support 0 has {j}",
            s.keypoints.len()
        )));
    }
    if let Some(max) = state.model.max_keypoints().filter(|&m| j > m) {
        return Err(ApiError::bad_request(format!("{j} keypoints exceed the model limit of {max}")));
    }
    let names = match req.keypoint_names {
        Some(names) if names.len() != j => {
            return Err(ApiError::bad_request(format!("{} keypoint names for {j} keypoints", names.len())));
        }
        Some(names) => names,
        None => (1..=j).map(|i| format!("kp{i}")).collect(),
    };
    let mut supports = Vec::with_capacity(req.supports.len());
    for (i, s) in req.supports.iter().enumerate() {
        let image = decode_image(&s.image)?;
        let keypoints = parse_keypoints(&s.keypoints, &image, i)?;
        supports.push(SupportExample {
            image: Arc::new(image),
            keypoints,
            bbox: None,
        });
    }
    if !(0..j).any(|k| supports.iter().any(|s| s.keypoints[k].v.is_labeled())) {
        return Err(ApiError::bad_request("no keypoint is labeled in any support"));
    }
    let session_id = format!("{:032x}", rand::random::<u128>());
    let mut sessions = state.sessions.lock().expect("session table poisoned");
    state.purge_expired(&mut sessions);
    sessions.insert(
        session_id.clone(),
        Session {
            category: req.category,
            keypoint_names: names,
            supports: Arc::new(supports),
            created: Instant::now(),
        },
    );
    Ok(Json(SupportResponse {
        session_id,
        num_keypoints: j,
    }))
}

async fn predict(
    State(state): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<PredictResponse>, ApiError> {
    let req: PredictRequest = parse_body(body)?;
    let (supports, names, category) = {
        let mut sessions = state.sessions.lock().expect("session table poisoned");
        state.purge_expired(&mut sessions);
        let s = sessions.get(&req.session_id).ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("session {} not found or expired", req.session_id))
        })?;
        (s.supports.clone(), s.keypoint_names.clone(), s.category.clone())
    };
    let query = decode_image(&req.image)?;
    let model = state.model.clone();
    let start = Instant::now();
    let prediction = tokio::task::spawn_blocking(move || model.predict(&supports, Arc::new(query), None))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "inference_failed", e.to_string()))?;
    Ok(Json(PredictResponse {
        keypoints: prediction.keypoints,
        keypoint_names: names,
        category,
        model_id: state.model.model_id().to_string(),
        timing_ms: start.elapsed().as_secs_f64() * 1000.0,
    }))
}
