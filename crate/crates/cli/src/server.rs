use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ebr_core::retrieval::{ServeConfig, ServiceHandle};
use ebr_core::Error;
use serde::Deserialize;

#[derive(Clone)]
pub struct AppState {
    pub handle: Arc<ServiceHandle>,
    pub config: ServeConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRequest {
    pub retailer_id: String,
    pub query: String,
    /// Retrieval depth for this request; also caps the result size.
    #[serde(default)]
    pub k: Option<usize>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn status_of(e: &Error) -> StatusCode {
    match e {
        Error::UnknownRetailer(_) => StatusCode::NOT_FOUND,
        Error::Empty(_) | Error::Config(_) | Error::DimensionMismatch { .. } => {
            StatusCode::BAD_REQUEST
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

async fn search(State(state): State<AppState>, body: Bytes) -> Response {
    let req: SearchRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let cfg = match req.k {
        Some(0) => return error(StatusCode::BAD_REQUEST, "k must be at least 1"),
        Some(k) => state.config.with_depth(k),
        None => state.config,
    };
    let handle = state.handle.clone();
    let result =
        tokio::task::spawn_blocking(move || handle.search(&req.retailer_id, &req.query, &cfg))
            .await;
    match result {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e)) => error(status_of(&e), e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn healthz(State(state): State<AppState>) -> Response {
    Json(state.handle.snapshot().health()).into_response()
}

pub fn router(handle: Arc<ServiceHandle>, config: ServeConfig) -> Router {
    Router::new()
        .route("/search", post(search))
        .route("/healthz", get(healthz))
        .with_state(AppState { handle, config })
}

pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
