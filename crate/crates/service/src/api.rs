//! HTTP routes over a [`SessionManager`].

use std::path::PathBuf;
use std::sync::Arc;

use arspl_core::dataset::{Manifest, PrepareConfig};
use arspl_core::image::{GrayImage, LabelGrid};
use arspl_core::pgm::encode_pgm;
use arspl_core::segmodel::predict_binary;
use arspl_core::spl::{Mode, RunReport, SplConfig};
use arspl_core::suggest::AnnotationSet;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::config::{Preset, RunConfig};
use crate::session::{Phase, Session, SessionManager, SubmitAck, SubmitError};

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl From<SubmitError> for ApiError {
    fn from(e: SubmitError) -> Self {
        let status = match e {
            SubmitError::WrongPhase(_) | SubmitError::Duplicate(_) => StatusCode::CONFLICT,
            SubmitError::Mismatch(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(status))
        .route("/sessions/{id}/queries", get(queries))
        .route("/sessions/{id}/annotations", post(submit))
        .route("/sessions/{id}/suspend", post(suspend))
        .route("/sessions/{id}/resume", post(resume))
        .route("/sessions/{id}/report", get(report))
        .route("/sessions/{id}/overlay/{image_id}", get(overlay))
        .with_state(manager)
}

/// Base64 of a binary PGM.
pub fn pgm_base64(image: &GrayImage) -> String {
    base64::engine::general_purpose::STANDARD.encode(encode_pgm(image))
}

fn labels_base64(labels: &LabelGrid) -> String {
    let (w, h) = labels.dims();
    let data = labels.labels().iter().map(|&l| f64::from(l)).collect();
    pgm_base64(&GrayImage::new(w, h, data).expect("dimensions match"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Absolute, or relative to the data directory.
    pub manifest: PathBuf,
    pub seed: u64,
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub preset: Preset,
    /// Overrides the preset's loop settings entirely.
    #[serde(default)]
    pub spl: Option<SplConfig>,
    #[serde(default)]
    pub prepare: Option<PrepareConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

async fn create_session(
    State(m): State<Arc<SessionManager>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> ApiResult<Created> {
    let Json(req) = body?;
    let manifest = if req.manifest.is_absolute() {
        req.manifest
    } else {
        m.root().join(req.manifest)
    };
    let bad = |msg: String| ApiError::new(StatusCode::BAD_REQUEST, msg);
    Manifest::load(&manifest).map_err(|e| bad(format!("manifest {}: {e}", manifest.display())))?;
    let mode = req.mode.unwrap_or(Mode::Arspl);
    let mut spl = req.spl.unwrap_or_else(|| req.preset.spl(mode));
    if req.mode.is_some() {
        spl.mode = mode;
    }
    spl.validate().map_err(|e| bad(e.to_string()))?;
    let config = RunConfig {
        manifest,
        seed: req.seed,
        spl,
        prepare: req.prepare.unwrap_or_else(|| req.preset.prepare()),
    };
    let session = m
        .create(config)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(Created { id: session.id.clone() }))
}

async fn list_sessions(State(m): State<Arc<SessionManager>>) -> Json<Vec<String>> {
    Json(m.ids())
}

fn session(m: &SessionManager, id: &str) -> Result<Arc<Session>, ApiError> {
    m.get(id).ok_or_else(|| ApiError::not_found("session"))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Status {
    pub id: String,
    pub phase: Phase,
    pub mode: Mode,
    pub iteration: u32,
    pub dice_history: Vec<f64>,
    pub annotated_superpixels: usize,
    pub remaining_queries: usize,
    pub error: Option<String>,
}

async fn status(State(m): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<Status> {
    let s = session(&m, &id)?;
    let g = s.lock();
    Ok(Json(Status {
        id: s.id.clone(),
        phase: g.phase,
        mode: s.config.spl.mode,
        iteration: g.iteration,
        dice_history: g.dice_history.clone(),
        annotated_superpixels: g.annotated.iter().map(|a| a.len()).sum(),
        remaining_queries: g.pending.as_ref().map_or(0, |p| p.remaining()),
        error: g.error.clone(),
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueriedSuperpixel {
    pub id: u32,
    pub uncertainty: f64,
    /// Row-major pixel indices, ascending; labels are submitted in this order.
    pub pixels: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BatchView {
    pub image_id: usize,
    pub iteration: u32,
    pub answered: bool,
    pub width: usize,
    pub height: usize,
    pub image: String,
    pub prediction: String,
    pub superpixels: Vec<QueriedSuperpixel>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Queries {
    pub iteration: u32,
    pub remaining: usize,
    pub batches: Vec<BatchView>,
}

async fn queries(State(m): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<Queries> {
    let s = session(&m, &id)?;
    let g = s.lock();
    if g.phase != Phase::AwaitingAnnotations {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("session is {:?}, not awaiting annotations", g.phase),
        ));
    }
    let (Some(p), Some(ds)) = (&g.pending, &g.dataset) else {
        return Err(ApiError::new(StatusCode::CONFLICT, "no pending queries"));
    };
    let batches = p
        .batches
        .iter()
        .zip(&p.answers)
        .zip(&p.predictions)
        .map(|((b, a), pred)| {
            let sample = &ds.train[b.image_id];
            let (width, height) = sample.image.dims();
            BatchView {
                image_id: b.image_id,
                iteration: b.iteration,
                answered: a.is_some(),
                width,
                height,
                image: pgm_base64(&sample.image),
                prediction: labels_base64(pred),
                superpixels: b
                    .superpixels
                    .iter()
                    .zip(&b.uncertainties)
                    .map(|(&id, &u)| QueriedSuperpixel {
                        id,
                        uncertainty: u,
                        pixels: sample.partition.members(id as usize).to_vec(),
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(Json(Queries {
        iteration: p.iteration,
        remaining: p.remaining(),
        batches,
    }))
}

async fn submit(
    State(m): State<Arc<SessionManager>>,
    Path(id): Path<String>,
    body: Result<Json<AnnotationSet>, JsonRejection>,
) -> ApiResult<SubmitAck> {
    let s = session(&m, &id)?;
    let Json(set) = body.map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    Ok(Json(s.submit(set)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PhaseReply {
    pub phase: Phase,
}

async fn suspend(State(m): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<PhaseReply> {
    let s = session(&m, &id)?;
    match s.request_suspend() {
        p @ (Phase::Converged | Phase::Failed) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("session is {p:?}"),
        )),
        phase => Ok(Json(PhaseReply { phase })),
    }
}

async fn resume(State(m): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<PhaseReply> {
    let s = session(&m, &id)?;
    let phase = s.lock().phase;
    if !matches!(phase, Phase::Suspended | Phase::Failed) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("session is {phase:?}")));
    }
    s.start();
    let phase = s.lock().phase;
    Ok(Json(PhaseReply { phase }))
}

async fn report(State(m): State<Arc<SessionManager>>, Path(id): Path<String>) -> ApiResult<RunReport> {
    let s = session(&m, &id)?;
    let g = s.lock();
    match (&g.report, g.phase) {
        (Some(r), Phase::Converged) => Ok(Json(r.clone())),
        (_, phase) => Err(ApiError::new(StatusCode::CONFLICT, format!("session is {phase:?}"))),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Overlay {
    pub image_id: usize,
    pub iteration: u32,
    pub width: usize,
    pub height: usize,
    pub image: String,
    /// Current model prediction, foreground white.
    pub prediction: String,
    pub vesselness: String,
    pub annotated_superpixels: Vec<u32>,
}

async fn overlay(
    State(m): State<Arc<SessionManager>>,
    Path((id, image_id)): Path<(String, usize)>,
) -> ApiResult<Overlay> {
    let s = session(&m, &id)?;
    let (ds, model, iteration, annotated) = {
        let g = s.lock();
        let (Some(ds), Some(model)) = (g.dataset.clone(), g.model.clone()) else {
            return Err(ApiError::new(StatusCode::CONFLICT, "session has no model yet"));
        };
        (ds, model, g.iteration, g.annotated.get(image_id).cloned())
    };
    let Some(sample) = ds.train.get(image_id) else {
        return Err(ApiError::not_found("training image"));
    };
    let image = sample.image.clone();
    let pred = tokio::task::spawn_blocking(move || predict_binary(&model, &image))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let (width, height) = sample.image.dims();
    Ok(Json(Overlay {
        image_id,
        iteration,
        width,
        height,
        image: pgm_base64(&sample.image),
        prediction: labels_base64(&pred),
        vesselness: pgm_base64(&sample.vesselness.to_image()),
        annotated_superpixels: annotated.unwrap_or_default().into_iter().collect(),
    }))
}

/// Serves `manager` on `listener` until the process stops.
pub async fn serve(listener: tokio::net::TcpListener, manager: Arc<SessionManager>) -> std::io::Result<()> {
    axum::serve(listener, router(manager)).await
}

/// Serves `manager` on a background thread with its own runtime and returns
/// the bound address. The server lives until the process exits.
pub fn spawn(manager: Arc<SessionManager>, addr: std::net::SocketAddr) -> std::io::Result<std::net::SocketAddr> {
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    std::thread::spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            serve(listener, manager).await
        })
    });
    Ok(local)
}
