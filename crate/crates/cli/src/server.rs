//! HTTP serving: a thin layer over the same encode/retrieve functions the
//! CLI uses, against an immutable model + index snapshot.
//!
//! * `GET  /healthz`   → `200 "ok"`
//! * `POST /encode`    → document JSON in, embedding out
//! * `POST /retrieve`  → document + k + filter in, ranked neighbors out
//!
//! Malformed request bodies are 400s carrying the parse error; a model/index
//! width disagreement is a 500. Schemas are documented in `docs/api.md`.

use std::sync::Arc;

use anyhow::{Context, Result};
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use skillmatch_core::corpus::Document;
use skillmatch_core::index::{IndexError, VectorIndex};

use crate::commands::{run_retrieval, RetrievalError, RetrieveRequest};
use crate::model::Model;

/// Immutable serving snapshot.
pub struct AppState {
    pub model: Model,
    pub index: VectorIndex,
}

#[derive(Serialize, Deserialize)]
pub struct EncodeResponse {
    pub doc_id: String,
    pub dim: usize,
    pub vector: Vec<f32>,
}

#[derive(Serialize)]
struct ApiError {
    error: String,
}

fn error_response(status: StatusCode, message: String) -> Response {
    (status, Json(ApiError { error: message })).into_response()
}

fn retrieval_error_response(err: RetrievalError) -> Response {
    let status = match &err {
        // The request document itself failed to encode.
        RetrievalError::Encode(_) => StatusCode::BAD_REQUEST,
        // The serving snapshot is misconfigured.
        RetrievalError::Dimension { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        RetrievalError::BadQuery(IndexError::BadParameter(_)) => StatusCode::BAD_REQUEST,
        RetrievalError::BadQuery(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error_response(status, err.to_string())
}

async fn healthz() -> &'static str {
    "ok"
}

async fn encode_handler(State(state): State<Arc<AppState>>, body: String) -> Response {
    let document: Document = match serde_json::from_str(&body) {
        Ok(doc) => doc,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("bad document JSON: {e}")),
    };
    match state.model.encode(&document) {
        Ok(embedding) => Json(EncodeResponse {
            doc_id: embedding.doc_id,
            dim: embedding.vector.len(),
            vector: embedding.vector,
        })
        .into_response(),
        Err(e) => error_response(StatusCode::BAD_REQUEST, format!("encoding failed: {e}")),
    }
}

async fn retrieve_handler(State(state): State<Arc<AppState>>, body: String) -> Response {
    let request: RetrieveRequest = match serde_json::from_str(&body) {
        Ok(req) => req,
        Err(e) => return error_response(StatusCode::BAD_REQUEST, format!("bad retrieve request: {e}")),
    };
    match run_retrieval(&state.model, &state.index, &request) {
        Ok(response) => Json(response).into_response(),
        Err(err) => retrieval_error_response(err),
    }
}

/// Builds the router; separated from [`serve`] so tests can drive handlers
/// directly.
pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/encode", post(encode_handler))
        .route("/retrieve", post(retrieve_handler))
        .with_state(state)
}

/// Binds and serves until ctrl-c. Prints the bound address on startup
/// (flushed immediately so wrappers watching stdout see it), which matters
/// when `port` is 0 and the OS picks one.
pub async fn serve(state: Arc<AppState>, host: &str, port: u16) -> Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port))
        .await
        .with_context(|| format!("binding {host}:{port}"))?;
    let addr = listener.local_addr()?;
    {
        use std::io::Write;
        let mut out = std::io::stdout();
        writeln!(out, "listening on http://{addr}")?;
        out.flush()?;
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .context("serving")?;
    Ok(())
}
