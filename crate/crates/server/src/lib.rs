//! HTTP/JSON front end for the odometry pipeline.
//!
//! Each session owns one [`Pipeline`]. IMU batches and scans are applied in
//! the order they arrive, so a client that forwards a recorded event stream
//! in timestamp order reproduces an offline replay exactly.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use klio_core::api::{
    CreateSessionRequest, CreateSessionResponse, ErrorBody, EvalRequest, ImuBatch, ImuBatchResponse,
};
use klio_core::dataset_io::decode_scan;
use klio_core::eval::{evaluate, ApeReport};
use klio_core::pipeline::{OdometryRecord, Pipeline, PipelineOutput, PipelineSnapshot};
use tokio::net::TcpListener;

/// Upper bound on request bodies; a dense 128-ring scan is a few megabytes.
pub const MAX_BODY_BYTES: usize = 256 * 1024 * 1024;

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

    fn not_found(id: u64) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type Shared = Arc<Mutex<Pipeline>>;

#[derive(Default)]
pub struct AppState {
    sessions: Mutex<HashMap<u64, Shared>>,
    next_id: AtomicU64,
}

impl AppState {
    fn session(&self, id: u64) -> Result<Shared, ApiError> {
        self.sessions
            .lock()
            .expect("session table poisoned")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }
}

/// Runs `f` on the session's pipeline on the blocking pool.
async fn with_pipeline<T, F>(state: &AppState, id: u64, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Pipeline) -> T + Send + 'static,
{
    let shared = state.session(id)?;
    tokio::task::spawn_blocking(move || {
        let mut pipeline = shared
            .lock()
            .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "session poisoned"))?;
        Ok(f(&mut pipeline))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn health() -> &'static str {
    "ok"
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Option<Json<CreateSessionRequest>>,
) -> Result<Json<CreateSessionResponse>, ApiError> {
    let config = body.and_then(|Json(r)| r.config).unwrap_or_default();
    config
        .validate()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let id = state.next_id.fetch_add(1, Ordering::Relaxed) + 1;
    let resolved_config = config.to_commented_toml();
    state
        .sessions
        .lock()
        .expect("session table poisoned")
        .insert(id, Arc::new(Mutex::new(Pipeline::new(config))));
    log::info!("session {id} created");
    Ok(Json(CreateSessionResponse {
        session_id: id,
        resolved_config,
    }))
}

async fn push_imu(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
    Json(batch): Json<ImuBatch>,
) -> Result<Json<ImuBatchResponse>, ApiError> {
    with_pipeline(&state, id, move |p| {
        let accepted = batch.samples.iter().filter(|s| p.push_imu(**s)).count();
        ImuBatchResponse {
            accepted,
            rejected: batch.samples.len() - accepted,
        }
    })
    .await
    .map(Json)
}

async fn push_scan(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
    body: Bytes,
) -> Result<Json<OdometryRecord>, ApiError> {
    let cloud = decode_scan(&body, Path::new("request body"))
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    with_pipeline(&state, id, move |p| p.process_scan(&cloud))
        .await?
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

async fn snapshot(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
) -> Result<Json<PipelineSnapshot>, ApiError> {
    with_pipeline(&state, id, |p| p.snapshot()).await.map(Json)
}

async fn finalize(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
) -> Result<Json<PipelineOutput>, ApiError> {
    with_pipeline(&state, id, |p| p.finalize()).await.map(Json)
}

async fn delete_session(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
) -> Result<StatusCode, ApiError> {
    let removed = state
        .sessions
        .lock()
        .expect("session table poisoned")
        .remove(&id);
    match removed {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(id)),
    }
}

async fn eval(Json(req): Json<EvalRequest>) -> Result<Json<ApeReport>, ApiError> {
    tokio::task::spawn_blocking(move || evaluate(&req.estimate, &req.reference, req.max_dt))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))
}

pub fn router() -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", axum::routing::delete(delete_session))
        .route("/v1/sessions/{id}/imu", post(push_imu))
        .route("/v1/sessions/{id}/scan", post(push_scan))
        .route("/v1/sessions/{id}/snapshot", get(snapshot))
        .route("/v1/sessions/{id}/finalize", post(finalize))
        .route("/v1/eval", post(eval))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(Arc::new(AppState::default()))
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        log::info!("listening on http://{addr}");
    }
    axum::serve(listener, router()).await
}
