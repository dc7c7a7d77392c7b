//! JSON API for the review UI.
//!
//! | route | |
//! |---|---|
//! | `GET /api/tasks/next?reviewer=<id>` | task payload, or 204 when the queue is empty |
//! | `POST /api/tasks/{id}/selection` | `{reviewer, choice}`; 409 on a stale or foreign lock, 400 on an invalid choice |
//! | `POST /api/tasks/{id}/renew` | `{reviewer}`; extends the lock |
//! | `GET /api/progress` | queue counts |
//! | `GET /api/images/{ref}`, `GET /api/masks/{ref}` | 8-bit PNG |

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::campaign::{Campaign, Choice, TaskStatus};
use crate::Error;

pub type SharedCampaign = Arc<Mutex<Campaign>>;

impl IntoResponse for Error {
    fn into_response(self) -> Response {
        let status = match &self {
            Error::Conflict(_) => StatusCode::CONFLICT,
            Error::Invalid(_) | Error::MissingManualMask(_) => StatusCode::BAD_REQUEST,
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{self}");
        }
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

fn guard(c: &SharedCampaign) -> MutexGuard<'_, Campaign> {
    // A panic mid-request cannot leave the state half-applied: events are
    // logged first and applied infallibly.
    c.lock().unwrap_or_else(|p| p.into_inner())
}

#[derive(Deserialize)]
struct ReviewerQuery {
    reviewer: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionBody {
    pub reviewer: String,
    pub choice: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RenewBody {
    pub reviewer: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionResponse {
    pub task_id: String,
    pub status: TaskStatus,
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, Error> {
    serde_json::from_slice(body).map_err(|e| Error::Invalid(format!("request body: {e}")))
}

async fn next_task(State(c): State<SharedCampaign>, Query(q): Query<ReviewerQuery>) -> Result<Response, Error> {
    match guard(&c).next_task(&q.reviewer)? {
        Some(p) => Ok(Json(p).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn select(State(c): State<SharedCampaign>, Path(task_id): Path<String>, body: Bytes) -> Result<Response, Error> {
    let body: SelectionBody = parse_body(&body)?;
    let choice: Choice = body.choice.parse()?;
    let status = guard(&c).submit_selection(&task_id, &body.reviewer, choice)?;
    Ok(Json(SelectionResponse { task_id, status }).into_response())
}

async fn renew(State(c): State<SharedCampaign>, Path(task_id): Path<String>, body: Bytes) -> Result<Response, Error> {
    let body: RenewBody = parse_body(&body)?;
    let expiry = guard(&c).renew_lock(&task_id, &body.reviewer)?;
    Ok(Json(json!({ "task_id": task_id, "expiry": expiry })).into_response())
}

async fn progress(State(c): State<SharedCampaign>) -> Result<Response, Error> {
    Ok(Json(guard(&c).progress()?).into_response())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn image(State(c): State<SharedCampaign>, Path(r): Path<String>) -> Result<Response, Error> {
    let bytes = guard(&c).images().get_bytes(&r)?;
    Ok(png(bytes))
}

async fn mask(State(c): State<SharedCampaign>, Path(r): Path<String>) -> Result<Response, Error> {
    let bytes = guard(&c).masks().get_bytes(&r)?;
    Ok(png(bytes))
}

pub fn router(campaign: SharedCampaign) -> Router {
    Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}/selection", post(select))
        .route("/api/tasks/{id}/renew", post(renew))
        .route("/api/progress", get(progress))
        .route("/api/images/{id}", get(image))
        .route("/api/masks/{id}", get(mask))
        .with_state(campaign)
}

/// Serves until the process is stopped.
pub async fn serve(campaign: SharedCampaign, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(campaign)).await
}
