//! HTTP API and server-push event stream.

use std::convert::Infallible;
use std::future::Future;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;
use wordsmith_core::prompts::PromptError;

use crate::registry::RegistryError;
use crate::service::{CheckpointChoice, RolloutSource, Service, ServiceError, SessionOverrides};

type Shared = Arc<Service>;

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let message = self.0.to_string();
        let (status, body) = match &self.0 {
            ServiceError::NotFound(_) | ServiceError::Registry(RegistryError::NotFound(_)) => {
                (StatusCode::NOT_FOUND, json!({ "error": "not_found", "message": message }))
            }
            ServiceError::Busy { run, .. } => {
                (StatusCode::CONFLICT, json!({ "error": "busy", "message": message, "active_run": run }))
            }
            ServiceError::Prompt(PromptError::UnknownVerb { vocabulary, .. }) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": "unknown_verb", "message": message, "vocabulary": vocabulary }),
            ),
            ServiceError::Prompt(_) | ServiceError::Unmappable(_) => {
                (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": "invalid_command", "message": message }))
            }
            ServiceError::Invalid(_) => (StatusCode::BAD_REQUEST, json!({ "error": "invalid", "message": message })),
            ServiceError::Closed => {
                (StatusCode::SERVICE_UNAVAILABLE, json!({ "error": "shutting_down", "message": message }))
            }
            ServiceError::Registry(RegistryError::Invalid { .. } | RegistryError::Mismatch { .. }) => {
                (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "checksum", "message": message }))
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": "internal", "message": message })),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking service work off the async runtime.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError(ServiceError::Io(e.to_string())))?.map_err(ApiError)
}

pub fn router(svc: Shared) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/commands", post(submit_command))
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/rewards", get(rewards))
        .route("/api/runs/{id}/rollout", get(rollout))
        .route("/api/checkpoints", get(checkpoints))
        .route("/api/checkpoints/{id}", get(checkpoint_bytes))
        .route("/api/events", get(events))
        .with_state(svc)
}

/// Serves until `shutdown` resolves, then closes the service.
pub async fn serve(
    svc: Shared,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let app = router(svc.clone());
    let result = axum::serve(listener, app).with_graceful_shutdown(shutdown).await;
    tokio::task::spawn_blocking(move || svc.close()).await.ok();
    result
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

async fn create_session(State(svc): State<Shared>, body: Option<Json<CreateSession>>) -> ApiResult<impl IntoResponse> {
    let overrides = body.map(|b| b.0.overrides).unwrap_or_default();
    let view = blocking(move || svc.create_session(overrides)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct CreateSession {
    overrides: SessionOverrides,
}

async fn list_sessions(State(svc): State<Shared>) -> impl IntoResponse {
    Json(svc.sessions())
}

async fn get_session(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.session(&id)?))
}

#[derive(Deserialize)]
struct Command {
    text: String,
}

async fn submit_command(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(cmd): Json<Command>,
) -> ApiResult<impl IntoResponse> {
    let sub = blocking(move || svc.submit_command(&id, &cmd.text)).await?;
    Ok((StatusCode::ACCEPTED, Json(sub)))
}

async fn list_runs(State(svc): State<Shared>) -> impl IntoResponse {
    Json(svc.runs())
}

async fn get_run(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(svc.run(&id)?))
}

async fn rewards(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let csv = blocking(move || svc.rewards_csv(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv))
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RolloutQuery {
    checkpoint: CheckpointChoice,
    source: RolloutSource,
    steps: Option<usize>,
}

async fn rollout(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<RolloutQuery>,
) -> ApiResult<impl IntoResponse> {
    let lines = blocking(move || svc.rollout(&id, q.checkpoint, q.source, q.steps)).await?;
    let mut body = lines.join("\n");
    body.push('\n');
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body))
}

async fn checkpoints(State(svc): State<Shared>) -> ApiResult<impl IntoResponse> {
    Ok(Json(blocking(move || svc.checkpoints()).await?))
}

async fn checkpoint_bytes(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let bytes = blocking(move || svc.checkpoint_bytes(&id)).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes))
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct EventQuery {
    run_id: Option<String>,
}

async fn events(
    State(svc): State<Shared>,
    Query(q): Query<EventQuery>,
) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let rx = svc.subscribe();
    let stream = futures::stream::unfold((rx, q.run_id), |(mut rx, filter)| async move {
        loop {
            let event = match rx.recv().await {
                Ok(e) => e,
                Err(RecvError::Lagged(n)) => {
                    let sse = SseEvent::default().event("lagged").data(json!({ "skipped": n }).to_string());
                    return Some((Ok(sse), (rx, filter)));
                }
                Err(RecvError::Closed) => return None,
            };
            if filter.as_ref().is_some_and(|f| event.run_id.as_ref() != Some(f)) {
                continue;
            }
            let data = serde_json::to_string(&event).expect("events serialize");
            let sse = SseEvent::default().event(event.kind.clone()).data(data);
            return Some((Ok(sse), (rx, filter)));
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}
