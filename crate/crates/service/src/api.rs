//! REST and WebSocket routes.
//!
//! | Method | Path | |
//! |---|---|---|
//! | GET | `/health` | liveness |
//! | POST | `/sessions` | create ([`CreateSession`]) |
//! | GET | `/sessions` | list descriptors |
//! | GET, DELETE | `/sessions/{id}` | info / remove |
//! | POST | `/sessions/{id}/commands` | run a session command |
//! | GET | `/sessions/{id}/snapshot` | latest snapshot |
//! | GET | `/sessions/{id}/events?after=n` | logged events after `n` |
//! | GET (WS) | `/sessions/{id}/stream?after=n` | backlog, then live events |
//! | GET | `/sessions/{id}/boundary?resolution=r` | fruit decision grid |
//! | GET | `/sessions/{id}/device` | backend status |
//! | POST | `/sessions/{id}/device/reconnect` | reopen the device link |
//! | POST | `/sessions/{id}/sim/fruit` | put a fruit on the simulated sensor |
//! | POST | `/sessions/{id}/sim/link` | cut or restore the simulated link |
//!
//! Errors are `{"error": {"code", "message"}}` with 404, 409, 422, 500 or 503.

use std::collections::HashMap;
use std::str::FromStr;

use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bricks_core::devices::{BackendStatus, DeviceHandle, FruitKind};
use bricks_core::sessions::{Command, SessionEvent};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tracing::debug;

use crate::app::{App, CreateSession};
use crate::error::{device_status, ServiceError};
use crate::store::{SessionDescriptor, Store};

pub struct ApiError(pub ServiceError);

impl<E: Into<ServiceError>> From<E> for ApiError {
    fn from(e: E) -> Self {
        ApiError(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = self.0.status_and_code();
        let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            debug!(error = %self.0, "request failed");
        }
        let body = ErrorResponse {
            error: ErrorBody {
                code: code.to_owned(),
                message: self.0.to_string(),
            },
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// `GET /sessions/{id}` and device routes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub backend: String,
    pub status: BackendStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    #[serde(flatten)]
    pub descriptor: SessionDescriptor,
    pub seq: u64,
    pub device: DeviceInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaceFruit {
    pub kind: FruitKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimLink {
    pub down: bool,
}

fn device_info(device: &DeviceHandle) -> DeviceInfo {
    DeviceInfo {
        backend: device.backend().to_owned(),
        status: device.status(),
    }
}

/// Parses a JSON body; any failure is a 422.
fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError(ServiceError::Malformed(e.to_string())))
}

fn query_num<T: FromStr>(
    query: &HashMap<String, String>,
    key: &str,
) -> Result<Option<T>, ApiError> {
    match query.get(key) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| {
            ApiError(ServiceError::Malformed(format!(
                "query parameter `{key}` must be a non-negative integer, got `{v}`"
            )))
        }),
    }
}

pub fn router(app: App) -> Router {
    let cors = match &app.config().cors_origin {
        Some(origin) => match HeaderValue::from_str(origin) {
            Ok(v) => CorsLayer::new().allow_origin(AllowOrigin::exact(v)),
            Err(_) => CorsLayer::new(),
        },
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);

    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/commands", post(run_command))
        .route("/sessions/{id}/snapshot", get(snapshot))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/stream", get(stream))
        .route("/sessions/{id}/boundary", get(boundary))
        .route("/sessions/{id}/device", get(device))
        .route("/sessions/{id}/device/reconnect", post(reconnect))
        .route("/sessions/{id}/sim/fruit", post(place_fruit))
        .route("/sessions/{id}/sim/link", post(sim_link))
        .fallback(|| async {
            let body = ErrorResponse {
                error: ErrorBody {
                    code: "no_route".into(),
                    message: "no such route".into(),
                },
            };
            (StatusCode::NOT_FOUND, Json(body))
        })
        .layer(cors)
        .with_state(app)
}

async fn health(State(app): State<App>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "sessions": app.list().len() }))
}

async fn create_session(
    State(app): State<App>,
    bytes: Bytes,
) -> ApiResult<(StatusCode, Json<SessionDescriptor>)> {
    let req: CreateSession = body(&bytes)?;
    let descriptor = tokio::task::spawn_blocking(move || app.create(req))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(descriptor)))
}

async fn list_sessions(State(app): State<App>) -> Json<Vec<SessionDescriptor>> {
    Json(app.list())
}

async fn get_session(
    State(app): State<App>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionInfo>> {
    let h = app.get(&id)?;
    Ok(Json(SessionInfo {
        descriptor: h.descriptor().clone(),
        seq: h.snapshot().seq,
        device: device_info(h.device()),
    }))
}

async fn delete_session(State(app): State<App>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    app.delete(&id).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn run_command(
    State(app): State<App>,
    Path(id): Path<String>,
    bytes: Bytes,
) -> ApiResult<Response> {
    let handle = app.get(&id)?;
    let command: Command = body(&bytes)?;
    let reply = handle.execute(command).await?;
    Ok(Json(reply).into_response())
}

async fn snapshot(State(app): State<App>, Path(id): Path<String>) -> ApiResult<Response> {
    let snap = app.get(&id)?.snapshot();
    Ok(Json(&*snap).into_response())
}

async fn events(
    State(app): State<App>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Json<Vec<SessionEvent>>> {
    let after = query_num(&query, "after")?.unwrap_or(0);
    Ok(Json(app.events_after(&id, after).await?))
}

async fn boundary(
    State(app): State<App>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let resolution = query_num(&query, "resolution")?;
    let grid = tokio::task::spawn_blocking(move || app.boundary(&id, resolution))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(grid).into_response())
}

async fn device(State(app): State<App>, Path(id): Path<String>) -> ApiResult<Json<DeviceInfo>> {
    Ok(Json(device_info(app.get(&id)?.device())))
}

async fn reconnect(State(app): State<App>, Path(id): Path<String>) -> ApiResult<Response> {
    let handle = app.get(&id)?;
    let result = tokio::task::spawn_blocking(move || {
        handle
            .device()
            .reconnect()
            .map(|_| device_info(handle.device()))
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))?;
    match result {
        Ok(info) => Ok(Json(info).into_response()),
        Err(e) => {
            let (status, _) = device_status(&e);
            debug!(session = %id, status, "reconnect failed");
            Err(ApiError::from(e))
        }
    }
}

async fn place_fruit(
    State(app): State<App>,
    Path(id): Path<String>,
    bytes: Bytes,
) -> ApiResult<Json<PlaceFruit>> {
    let handle = app.get(&id)?;
    let req: PlaceFruit = body(&bytes)?;
    let sim = handle
        .device()
        .sim()
        .ok_or_else(|| ServiceError::Malformed("session has no simulator".into()))?;
    sim.place_fruit(req.kind);
    Ok(Json(req))
}

async fn sim_link(
    State(app): State<App>,
    Path(id): Path<String>,
    bytes: Bytes,
) -> ApiResult<Json<SimLink>> {
    let handle = app.get(&id)?;
    let req: SimLink = body(&bytes)?;
    let sim = handle
        .device()
        .sim()
        .ok_or_else(|| ServiceError::Malformed("session has no simulator".into()))?;
    sim.set_link_down(req.down);
    Ok(Json(req))
}

async fn stream(
    State(app): State<App>,
    Path(id): Path<String>,
    Query(query): Query<HashMap<String, String>>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let after = query_num(&query, "after")?.unwrap_or(0);
    let handle = app.get(&id)?;
    // Subscribe before reading the log so nothing falls between the two.
    let live = handle.subscribe();
    drop(handle);
    let store = app.store().clone();
    let closing = app.closing();
    Ok(ws.on_upgrade(move |socket| {
        EventStream {
            socket,
            store,
            id,
            last: after,
        }
        .run(live, closing)
    }))
}

struct EventStream {
    socket: WebSocket,
    store: Store,
    id: String,
    /// Highest sequence number delivered so far.
    last: u64,
}

impl EventStream {
    async fn run(
        mut self,
        mut live: tokio::sync::broadcast::Receiver<std::sync::Arc<SessionEvent>>,
        mut closing: tokio::sync::watch::Receiver<bool>,
    ) {
        if self.backfill().await.is_err() {
            return;
        }
        loop {
            tokio::select! {
                received = live.recv() => match received {
                    Ok(event) => {
                        if event.seq <= self.last {
                            continue;
                        }
                        if event.seq > self.last + 1 && self.backfill().await.is_err() {
                            return;
                        }
                        if event.seq > self.last && self.send(&event).await.is_err() {
                            return;
                        }
                    }
                    Err(RecvError::Lagged(_)) => {
                        if self.backfill().await.is_err() {
                            return;
                        }
                    }
                    Err(RecvError::Closed) => {
                        self.close(1001, "session closed").await;
                        return;
                    }
                },
                incoming = self.socket.recv() => match incoming {
                    None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return,
                    Some(Ok(_)) => {}
                },
                _ = closing.changed() => {
                    self.close(1001, "server shutting down").await;
                    return;
                }
            }
        }
    }

    async fn send(&mut self, event: &SessionEvent) -> Result<(), ()> {
        let text = serde_json::to_string(event).map_err(|_| ())?;
        self.socket
            .send(Message::Text(text.into()))
            .await
            .map_err(|_| ())?;
        self.last = event.seq;
        Ok(())
    }

    /// Sends every logged event after `last`.
    async fn backfill(&mut self) -> Result<(), ()> {
        let store = self.store.clone();
        let id = self.id.clone();
        let after = self.last;
        let events = tokio::task::spawn_blocking(move || store.read_events(&id, after))
            .await
            .map_err(|_| ())?;
        match events {
            Ok(events) => {
                for e in &events {
                    self.send(e).await?;
                }
                Ok(())
            }
            Err(_) => {
                self.close(1011, "event log unavailable").await;
                Err(())
            }
        }
    }

    async fn close(&mut self, code: u16, reason: &'static str) {
        let _ = self
            .socket
            .send(Message::Close(Some(CloseFrame {
                code,
                reason: reason.into(),
            })))
            .await;
    }
}
