//! HTTP facade: sessions, anonymize, sweeps, model listing.
//!
//! Every response body is a function of the request sequence and the model,
//! so a recorded request log replays byte for byte against a fresh server.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, Request, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use tower::ServiceExt;

use crate::adapters::{FaceDetector, SpriteDetector};
use crate::anonymizer::{anonymize_encoded, sweep, AnonymizerModel, Encoded};
use crate::config::ServiceConfig;
use crate::data::{decode_image, encode_png};
use crate::error::Error;
use crate::frames::{self, Frame};
use crate::geometry::AngleSpec;

pub const API_VERSION: &str = env!("CARGO_PKG_VERSION");

struct Session {
    model_id: String,
    enc: Encoded,
    last_used: Instant,
    /// Sweep id to PNG cells, row-major.
    sweeps: HashMap<String, Vec<Vec<Bytes>>>,
}

struct Loaded {
    model: Mutex<AnonymizerModel>,
    id: String,
    info: ModelInfo,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelInfo {
    pub id: String,
    pub step: usize,
    pub image_size: usize,
    pub d_id: i64,
    pub theta: f64,
    pub threshold: f64,
    pub far: f64,
    /// First 16 hex digits of the sha256 of the model config JSON.
    pub config_digest: String,
}

/// Shared server state.
pub struct AppState {
    cfg: ServiceConfig,
    model: RwLock<Option<Arc<Loaded>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    counter: Mutex<u64>,
    permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        let permits = Arc::new(Semaphore::new(cfg.workers));
        Arc::new(Self {
            cfg,
            model: RwLock::new(None),
            sessions: Mutex::new(HashMap::new()),
            counter: Mutex::new(0),
            permits,
        })
    }

    /// Installs `model`; later sessions use it.
    pub fn set_model(&self, model: AnonymizerModel) {
        let cfg_json = serde_json::to_vec(&model.config).unwrap_or_default();
        let info = ModelInfo {
            id: model.digest.clone(),
            step: model.step,
            image_size: model.image_size(),
            d_id: model.config.d_id,
            theta: model.theta(),
            threshold: model.threshold(),
            far: model.recognizer.far,
            config_digest: hex::encode(&Sha256::digest(cfg_json)[..8]),
        };
        let loaded = Loaded { id: model.digest.clone(), model: Mutex::new(model), info };
        *self.model.write().expect("model lock") = Some(Arc::new(loaded));
    }

    pub fn load_model(&self, path: &Path) -> crate::Result<()> {
        self.set_model(AnonymizerModel::load(path)?);
        Ok(())
    }

    fn loaded(&self) -> Option<Arc<Loaded>> {
        self.model.read().expect("model lock").clone()
    }

    fn expire(&self) {
        let idle = Duration::from_secs(self.cfg.session_idle_secs);
        self.sessions.lock().expect("sessions lock").retain(|_, s| match s.try_lock() {
            Ok(s) => s.last_used.elapsed() < idle,
            Err(_) => true,
        });
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.expire();
        self.sessions
            .lock()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "session_not_found", format!("no live session {id}")))
    }
}

/// JSON error body `{"error": {"code", "message"}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::AnonymityViolation { .. } => StatusCode::CONFLICT,
            Error::ModelNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            Error::NoFace(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Image(_) | Error::Invalid(_) | Error::Shape(_) | Error::EmptySweep(_) | Error::Config(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn png_b64(chw: &[f32], size: usize) -> ApiResult<String> {
    Ok(B64.encode(encode_png(chw, size)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub model_id: String,
    pub theta: f64,
    pub threshold: f64,
    /// Reconstruction x^rec as base64 PNG.
    pub preview_png: String,
    pub reconstruction_cosine: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnonymizeBody {
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnonymizeResponse {
    pub alpha: f64,
    pub seed: u64,
    pub theta: f64,
    pub threshold: f64,
    pub cosine: f64,
    pub image_png: String,
    pub image_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepBody {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepCell {
    pub row: usize,
    pub col: usize,
    pub alpha: f64,
    pub seed: u64,
    pub cosine: f64,
    pub url: String,
    pub digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepManifest {
    pub sweep_id: String,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub theta: f64,
    pub threshold: f64,
    pub cells: Vec<SweepCell>,
}

fn sha256_hex(b: &[u8]) -> String {
    hex::encode(Sha256::digest(b))
}

/// RFC 9530 `Content-Digest` value.
pub fn content_digest(b: &[u8]) -> String {
    format!("sha-256=:{}:", B64.encode(Sha256::digest(b)))
}

/// Runs `f` on a blocking thread with an inference permit; 429 when none is free.
async fn with_permit<T, F>(state: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    let permit = state.permits.clone().try_acquire_owned().map_err(|_| {
        ApiError::new(StatusCode::TOO_MANY_REQUESTS, "busy", "all inference workers are busy; retry later")
    })?;
    let out = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        f()
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker_failed", e.to_string()))?;
    out
}

async fn create_session(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> ApiResult<Response> {
    let loaded = state.loaded().ok_or(Error::ModelNotLoaded)?;
    let mut bytes = None;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_multipart", e.body_text()))?
    {
        if field.name() == Some("image") {
            let b = field
                .bytes()
                .await
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "bad_multipart", e.body_text()))?;
            bytes = Some(b);
        }
    }
    let bytes = bytes.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_image", "no `image` field"))?;

    let st = state.clone();
    let (id, created) = with_permit(&state, move || {
        let model = loaded.model.lock().expect("model lock");
        let size = model.image_size();
        let chw = if st.cfg.align {
            let img = image::load_from_memory(&bytes).map_err(Error::from)?.to_rgb8();
            let frame = Frame::new(img.width() as usize, img.height() as usize, crate::data::rgb_to_chw(&img))?;
            let b = SpriteDetector::default().detect(&frame).first().copied().ok_or(Error::NoFace(0))?;
            frames::crop(&frame, b, size)?
        } else {
            decode_image(&bytes, size)?
        };
        let enc = model.encode_chw(&chw)?;
        let rec = model.reconstruct(&enc)?;
        let reconstruction_cosine = model.cosine_to_source(&enc, &rec)?;
        let preview_png = png_b64(&rec, size)?;

        let n = {
            let mut c = st.counter.lock().expect("counter lock");
            *c += 1;
            *c
        };
        let mut h = Sha256::new();
        h.update(loaded.id.as_bytes());
        h.update(n.to_le_bytes());
        h.update(&bytes);
        let id = hex::encode(&h.finalize()[..12]);

        st.expire();
        let mut sessions = st.sessions.lock().expect("sessions lock");
        if sessions.len() >= st.cfg.max_sessions {
            return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "session_limit", "too many live sessions"));
        }
        let created = SessionCreated {
            session_id: id.clone(),
            model_id: loaded.id.clone(),
            theta: model.theta(),
            threshold: model.threshold(),
            preview_png,
            reconstruction_cosine,
        };
        sessions.insert(
            id.clone(),
            Arc::new(Mutex::new(Session {
                model_id: loaded.id.clone(),
                enc,
                last_used: Instant::now(),
                sweeps: HashMap::new(),
            })),
        );
        Ok((id, created))
    })
    .await?;
    let mut resp = (StatusCode::CREATED, Json(created)).into_response();
    if let Ok(v) = HeaderValue::from_str(&format!("/v1/sessions/{id}")) {
        resp.headers_mut().insert(header::LOCATION, v);
    }
    Ok(resp)
}

/// The session together with the model it was encoded by.
fn session_model(state: &AppState, id: &str) -> ApiResult<(Arc<Mutex<Session>>, Arc<Loaded>)> {
    let loaded = state.loaded().ok_or(Error::ModelNotLoaded)?;
    let s = state.session(id)?;
    let sid = s.lock().expect("session lock").model_id.clone();
    if sid != loaded.id {
        return Err(ApiError::new(StatusCode::CONFLICT, "model_changed", "session was created by another model"));
    }
    Ok((s, loaded))
}

async fn anonymize(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<AnonymizeBody>,
) -> ApiResult<Json<AnonymizeResponse>> {
    let (session, loaded) = session_model(&state, &id)?;
    let resp = with_permit(&state, move || {
        let mut s = session.lock().expect("session lock");
        s.last_used = Instant::now();
        let model = loaded.model.lock().expect("model lock");
        let req = model.request(body.alpha, body.seed);
        // theta is enforced here, not trusted from the client
        AngleSpec::new(req.theta, req.alpha, req.direction_seed)?;
        let out = anonymize_encoded(&model, &s.enc, &req)?;
        let png = encode_png(&out.image, model.image_size())?;
        Ok(AnonymizeResponse {
            alpha: body.alpha,
            seed: body.seed,
            theta: req.theta,
            threshold: model.threshold(),
            cosine: out.cosine,
            image_digest: sha256_hex(&png),
            image_png: B64.encode(png),
        })
    })
    .await?;
    Ok(Json(resp))
}

fn sweep_id(alphas: &[f64], seeds: &[u64]) -> String {
    let mut h = Sha256::new();
    for a in alphas {
        h.update(a.to_le_bytes());
    }
    h.update([0xFF]);
    for s in seeds {
        h.update(s.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

async fn run_sweep(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(body): Json<SweepBody>,
) -> ApiResult<Json<SweepManifest>> {
    let cells = body.alphas.len() * body.seeds.len();
    if cells > state.cfg.max_cells {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "grid_too_large",
            format!("{cells} cells exceed the limit of {}", state.cfg.max_cells),
        ));
    }
    let (session, loaded) = session_model(&state, &id)?;
    let manifest = with_permit(&state, move || {
        let mut s = session.lock().expect("session lock");
        s.last_used = Instant::now();
        let model = loaded.model.lock().expect("model lock");
        let theta = model.theta();
        for &a in &body.alphas {
            AngleSpec::new(theta, a, 0)?;
        }
        let r = sweep(&model, &s.enc, &body.alphas, &body.seeds)?;
        let sid = sweep_id(&body.alphas, &body.seeds);
        let mut pngs = Vec::with_capacity(r.images.len());
        let mut out = Vec::with_capacity(cells);
        for (row, imgs) in r.images.iter().enumerate() {
            let mut prow = Vec::with_capacity(imgs.len());
            for (col, img) in imgs.iter().enumerate() {
                let png = encode_png(img, model.image_size())?;
                out.push(SweepCell {
                    row,
                    col,
                    alpha: r.alphas[col],
                    seed: r.seeds[row],
                    cosine: r.cosines[row][col],
                    url: format!("/v1/sessions/{id}/sweeps/{sid}/cells/{row}/{col}"),
                    digest: sha256_hex(&png),
                });
                prow.push(Bytes::from(png));
            }
            pngs.push(prow);
        }
        s.sweeps.insert(sid.clone(), pngs);
        Ok(SweepManifest { sweep_id: sid, alphas: r.alphas, seeds: r.seeds, theta: r.theta, threshold: r.threshold, cells: out })
    })
    .await?;
    Ok(Json(manifest))
}

async fn sweep_cell(
    State(state): State<Arc<AppState>>,
    UrlPath((id, sid, row, col)): UrlPath<(String, String, usize, usize)>,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let mut s = session.lock().expect("session lock");
    s.last_used = Instant::now();
    let png = s
        .sweeps
        .get(&sid)
        .and_then(|g| g.get(row))
        .and_then(|r| r.get(col))
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "cell_not_found", format!("no cell {row},{col} in sweep {sid}")))?;
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert(header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=31536000, immutable"));
    let digest = content_digest(&png);
    if let Ok(v) = HeaderValue::from_str(&digest) {
        headers.insert("content-digest", v);
    }
    if let Ok(v) = HeaderValue::from_str(&format!("\"{}\"", sha256_hex(&png))) {
        headers.insert(header::ETAG, v);
    }
    Ok((headers, png).into_response())
}

async fn models(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let list: Vec<ModelInfo> = state.loaded().map(|l| l.info.clone()).into_iter().collect();
    Json(json!({ "models": list }))
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let loaded = state.loaded().is_some();
    Json(json!({
        "status": if loaded { "ok" } else { "degraded" },
        "model_loaded": loaded,
        "version": API_VERSION,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/models", get(models))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/anonymize", post(anonymize))
        .route("/v1/sessions/{id}/sweep", post(run_sweep))
        .route("/v1/sessions/{id}/sweeps/{sid}/cells/{row}/{col}", get(sweep_cell))
        .layer(DefaultBodyLimit::max(16 << 20))
        .with_state(state)
}

/// Binds and serves until ctrl-c.
pub async fn serve(cfg: ServiceConfig) -> crate::Result<()> {
    let state = AppState::new(cfg.clone());
    if let Some(p) = &cfg.model {
        state.load_model(p)?;
    } else {
        log::warn!("no model configured; serving in degraded mode");
    }
    let listener = tokio::net::TcpListener::bind((cfg.host.as_str(), cfg.port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// One request of a replay log. Bodies are base64 so multipart uploads fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedRequest {
    pub method: String,
    pub path: String,
    pub content_type: Option<String>,
    pub body_b64: String,
}

impl RecordedRequest {
    pub fn get(path: &str) -> Self {
        Self { method: "GET".into(), path: path.into(), content_type: None, body_b64: String::new() }
    }

    pub fn json(path: &str, body: &serde_json::Value) -> Self {
        Self {
            method: "POST".into(),
            path: path.into(),
            content_type: Some("application/json".into()),
            body_b64: B64.encode(body.to_string()),
        }
    }

    /// Multipart upload with a single `image` field.
    pub fn upload(path: &str, image: &[u8]) -> Self {
        let boundary = "cfanet-boundary-7d1f";
        let mut body = format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"face.png\"\r\nContent-Type: application/octet-stream\r\n\r\n"
        )
        .into_bytes();
        body.extend_from_slice(image);
        body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
        Self {
            method: "POST".into(),
            path: path.into(),
            content_type: Some(format!("multipart/form-data; boundary={boundary}")),
            body_b64: B64.encode(body),
        }
    }

    fn to_request(&self) -> crate::Result<Request<Body>> {
        let method = Method::from_bytes(self.method.as_bytes()).map_err(|e| Error::Invalid(e.to_string()))?;
        let body = B64.decode(&self.body_b64).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut b = Request::builder().method(method).uri(&self.path);
        if let Some(ct) = &self.content_type {
            b = b.header(header::CONTENT_TYPE, ct);
        }
        b.body(Body::from(body)).map_err(|e| Error::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedResponse {
    pub status: u16,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl RecordedResponse {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or(serde_json::Value::Null)
    }
}

/// Sends `log` in order through `app` and collects the responses.
pub async fn replay(app: Router, log: &[RecordedRequest]) -> crate::Result<Vec<RecordedResponse>> {
    let mut out = Vec::with_capacity(log.len());
    for r in log {
        let resp = app.clone().oneshot(r.to_request()?).await.map_err(|e| Error::Invalid(e.to_string()))?;
        let status = resp.status().as_u16();
        let content_type = resp.headers().get(header::CONTENT_TYPE).and_then(|v| v.to_str().ok()).map(String::from);
        let body = axum::body::to_bytes(resp.into_body(), usize::MAX)
            .await
            .map_err(|e| Error::Invalid(e.to_string()))?
            .to_vec();
        out.push(RecordedResponse { status, content_type, body });
    }
    Ok(out)
}
