use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use crate::session::{self, parse_ordering};
use crate::{Service, ServiceError, SessionConfig};

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/pending", get(pending))
        .route("/sessions/{id}/answers", post(answer))
        .route("/sessions/{id}/status", get(status))
        .with_state(service)
}

struct ApiError {
    status: StatusCode,
    message: String,
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::SessionNotFound(_) | ServiceError::QueryNotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Core(decorr_core::Error::Config(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %e, "request failed");
        }
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError {
        status: if e.is_data() {
            StatusCode::UNPROCESSABLE_ENTITY
        } else {
            StatusCode::BAD_REQUEST
        },
        message: e.to_string(),
    })
}

async fn create_session(State(service): State<Arc<Service>>, body: Bytes) -> Result<Response, ApiError> {
    let config: SessionConfig = parse_body(&body)?;
    let svc = service.clone();
    let session = tokio::task::spawn_blocking(move || svc.create(config))
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))??;
    Ok((StatusCode::CREATED, Json(session.status())).into_response())
}

async fn list_sessions(State(service): State<Arc<Service>>) -> Json<serde_json::Value> {
    Json(json!({ "sessions": service.session_ids() }))
}

async fn pending(State(service): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(service.get(&id)?.pending()).into_response())
}

async fn status(State(service): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(service.get(&id)?.status()).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnswerBody {
    query_id: String,
    ordering: String,
}

async fn answer(
    State(service): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let session = service.get(&id)?;
    let body: AnswerBody = parse_body(&body)?;
    let ordering = parse_ordering(&body.ordering)?;
    // The log write syncs to disk, so keep it off the async workers.
    let worker = session.clone();
    let (ack, job) = tokio::task::spawn_blocking(move || worker.answer(&body.query_id, ordering))
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))??;
    if let Some(job) = job {
        session::spawn_training(session, job);
    }
    Ok(Json(ack).into_response())
}
