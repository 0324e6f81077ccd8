//! HTTP session service for live 2AFC annotation. Serves adaptively selected
//! triplets as HITs, records answers, rejects inconsistent workers, exposes
//! convergence state to an admin, and serves display assets and the UI.
//!
//! All JSON endpoints live under `/api`; the `/api/state` endpoints require
//! `Authorization: Bearer <admin token>`.

mod state;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use percept_core::answers::Choice;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub use state::{Ack, AppState, Event, Global, NextTrial, ServiceConfig, SharedState, Status, EVENT_LOG};

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct ServiceError {
    pub status: StatusCode,
    pub message: String,
}

impl ServiceError {
    fn with(status: StatusCode, message: impl ToString) -> Self {
        Self {
            status,
            message: message.to_string(),
        }
    }

    pub fn bad_request(message: impl ToString) -> Self {
        Self::with(StatusCode::BAD_REQUEST, message)
    }

    pub fn unauthorized(message: impl ToString) -> Self {
        Self::with(StatusCode::UNAUTHORIZED, message)
    }

    pub fn not_found(message: impl ToString) -> Self {
        Self::with(StatusCode::NOT_FOUND, message)
    }

    pub fn conflict(message: impl ToString) -> Self {
        Self::with(StatusCode::CONFLICT, message)
    }

    pub fn gone(message: impl ToString) -> Self {
        Self::with(StatusCode::GONE, message)
    }

    pub fn internal(message: impl ToString) -> Self {
        Self::with(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ServiceError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub worker: String,
    #[serde(default)]
    pub hit_size: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct Created {
    pub session_id: String,
}

/// The client-facing trial. It carries view ids only, never the trial kind.
#[derive(Debug, Serialize)]
pub struct TrialPayload {
    pub trial_index: usize,
    pub total: usize,
    pub reference_view: String,
    pub candidate_a_view: String,
    pub candidate_b_view: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitAnswer {
    pub trial_index: usize,
    pub chosen: Side,
}

#[derive(Debug, Serialize)]
pub struct SessionResult {
    pub status: Status,
    /// Known once the HIT is finished.
    pub inconsistencies: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct Convergence {
    pub iteration: usize,
    pub mean_information_gain: Option<f64>,
    pub answers_total: usize,
    pub coverage: f64,
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Serialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub mean_ig: f64,
}

#[derive(Debug, Serialize)]
pub struct Advanced {
    pub new_iteration: usize,
}

pub fn router(state: SharedState) -> Router {
    let ui_dir = state.lock().config.ui_dir.clone();
    let api = Router::new()
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/next", get(next_trial))
        .route("/api/sessions/{id}/answer", post(submit_answer))
        .route("/api/sessions/{id}/result", get(session_result))
        .route("/api/state/convergence", get(convergence))
        .route("/api/state/advance", post(advance))
        .route("/api/assets/{view_id}", get(asset))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(state: SharedState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

async fn create_session(
    State(state): State<SharedState>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<Created>), ServiceError> {
    let Json(req) = body?;
    let session_id = state.create_session(&req.worker, req.hit_size)?;
    Ok((StatusCode::CREATED, Json(Created { session_id })))
}

async fn next_trial(State(state): State<SharedState>, UrlPath(id): UrlPath<String>) -> Result<Response, ServiceError> {
    Ok(match state.next_trial(&id)? {
        NextTrial::Trial(t) => {
            let [reference_view, candidate_a_view, candidate_b_view] = t.views;
            Json(TrialPayload {
                trial_index: t.trial_index,
                total: t.total,
                reference_view,
                candidate_a_view,
                candidate_b_view,
            })
            .into_response()
        }
        NextTrial::Done(status) => (StatusCode::GONE, Json(json!({ "done": true, "status": status }))).into_response(),
    })
}

async fn submit_answer(
    State(state): State<SharedState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<SubmitAnswer>, JsonRejection>,
) -> Result<Json<Ack>, ServiceError> {
    let Json(req) = body?;
    let chosen = match req.chosen {
        Side::A => Choice::A,
        Side::B => Choice::B,
    };
    Ok(Json(state.answer(&id, req.trial_index, chosen)?))
}

async fn session_result(
    State(state): State<SharedState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<SessionResult>, ServiceError> {
    let (status, inconsistencies) = state.result(&id)?;
    Ok(Json(SessionResult {
        status,
        inconsistencies,
    }))
}

fn authorize(state: &AppState, headers: &HeaderMap) -> Result<(), ServiceError> {
    let g = state.lock();
    let Some(token) = g.config.admin_token.as_deref() else {
        return Err(ServiceError::unauthorized("admin token not configured"));
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given != Some(token) {
        return Err(ServiceError::unauthorized("missing or wrong admin token"));
    }
    Ok(())
}

async fn convergence(State(state): State<SharedState>, headers: HeaderMap) -> Result<Json<Convergence>, ServiceError> {
    authorize(&state, &headers)?;
    let g = state.lock();
    let plan = g.plan.as_ref().expect("a plan exists once open");
    Ok(Json(Convergence {
        iteration: plan.iteration,
        mean_information_gain: plan.mean_information_gain,
        answers_total: g.store.len(),
        coverage: g.coverage(),
        log: g
            .sampler
            .convergence_log()
            .iter()
            .map(|&(iteration, mean_ig)| LogEntry { iteration, mean_ig })
            .collect(),
    }))
}

async fn advance(State(state): State<SharedState>, headers: HeaderMap) -> Result<Json<Advanced>, ServiceError> {
    authorize(&state, &headers)?;
    // The refit is CPU-bound; keep it off the async workers.
    let new_iteration = tokio::task::spawn_blocking(move || state.advance(false))
        .await
        .map_err(ServiceError::internal)??;
    Ok(Json(Advanced { new_iteration }))
}

const IMAGE_TYPES: [(&str, &str); 5] = [
    ("png", "image/png"),
    ("jpg", "image/jpeg"),
    ("jpeg", "image/jpeg"),
    ("webp", "image/webp"),
    ("gif", "image/gif"),
];

/// Image file for a known view id inside the bundle's assets directory.
pub fn asset_path(assets_dir: &Path, view_id: &str) -> Option<(PathBuf, &'static str)> {
    IMAGE_TYPES.iter().find_map(|(ext, mime)| {
        let p = assets_dir.join(format!("{view_id}.{ext}"));
        p.is_file().then_some((p, *mime))
    })
}

async fn asset(State(state): State<SharedState>, UrlPath(view_id): UrlPath<String>) -> Result<Response, ServiceError> {
    let found = {
        let g = state.lock();
        // Only ids from the bundle are looked up, so the path cannot escape.
        match (&g.bundle.assets_dir, g.bundle.view_index(&view_id)) {
            (Some(dir), Some(_)) => asset_path(dir, &view_id),
            _ => None,
        }
    };
    let (path, mime) = found.ok_or_else(|| ServiceError::not_found(format!("no image for view {view_id}")))?;
    let bytes = tokio::fs::read(&path).await.map_err(ServiceError::internal)?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}
