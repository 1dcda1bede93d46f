//! HTTP endpoints.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{AppState, QueryError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub question: String,
    #[serde(default)]
    pub ego_id: Option<String>,
    #[serde(default)]
    pub scene_id: Option<u64>,
}

/// Error body shared by every endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub error: String,
    /// Failed pipeline stage, for backend failures.
    pub stage: Option<String>,
}

impl ApiError {
    pub fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self {
            status,
            error: msg.into(),
            stage: None,
        }
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        match e {
            QueryError::EmptyQuestion => Self::new(StatusCode::BAD_REQUEST, e.to_string()),
            QueryError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, e.to_string()),
            QueryError::Stage { ref stage, .. } => Self {
                status: StatusCode::BAD_GATEWAY,
                stage: Some(stage.clone()),
                error: e.to_string(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.error, "status": self.status.as_u16() });
        if let Some(s) = &self.stage {
            body["stage"] = json!(s);
        }
        (self.status, Json(body)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/scene", get(scene))
        .route("/stream", get(stream_scenes))
        .route("/query", post(query))
        .route("/health", get(health))
        .route("/config", get(config))
        .with_state(state)
}

fn json_text(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn scene(State(st): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let latest = st
        .latest()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no scene constructed yet"))?;
    Ok(json_text(latest.json.clone()))
}

/// One `scene` event per published scene; a slow reader only sees the
/// latest scene when it catches up.
async fn stream_scenes(State(st): State<Arc<AppState>>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let mut rx = st.subscribe();
    if rx.borrow().is_some() {
        rx.mark_changed();
    }
    let events = stream::unfold(rx, |mut rx| async move {
        loop {
            rx.changed().await.ok()?;
            let Some(entry) = rx.borrow_and_update().clone() else { continue };
            let ev = Event::default()
                .event("scene")
                .id(entry.scene.scene_id.to_string())
                .data(entry.json.clone());
            return Some((Ok(ev), rx));
        }
    });
    Sse::new(events).keep_alive(KeepAlive::default())
}

async fn query(
    State(st): State<Arc<AppState>>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    if req.question.trim().is_empty() {
        return Err(QueryError::EmptyQuestion.into());
    }
    let entry = match req.scene_id {
        Some(id) => st
            .scene(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("scene {id} is not available")))?,
        None => st
            .latest()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no scene constructed yet"))?,
    };
    let engine = st.engine.clone();
    let result = tokio::task::spawn_blocking(move || engine.answer(&req.question, req.ego_id.as_deref(), &entry.scene))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(result).into_response())
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let latest = st.latest().map(|e| e.scene.scene_id);
    Json(json!({
        "status": if latest.is_some() { "ok" } else { "starting" },
        "model": st.engine.backend.model_id(),
        "scenes_built": st.scenes_built(),
        "latest_scene_id": latest,
        "uptime_s": st.uptime().as_secs_f64(),
        "tick_hz": st.config.tick_hz,
    }))
}

async fn config(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::to_value(&st.config).unwrap_or_default())
}
