//! HTTP service over one immutable index.
//!
//! | Method | Path      | Body                      |
//! |--------|-----------|---------------------------|
//! | GET    | `/schema` | dimensions and measures   |
//! | GET    | `/stats`  | build statistics          |
//! | POST   | `/query`  | [`api::QueryRequest`]     |
//!
//! Every endpoint answers 503 until the index is loaded.

pub mod api;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use ihcube_core::query::execute;
use ihcube_core::{store, Error, Index};

use api::{ErrorBody, ErrorDetail, QueryRequest, QueryResponse, SchemaResponse, StatsResponse};

pub const ELAPSED_HEADER: &str = "x-elapsed-micros";

/// Shared server state; the index slot is written once.
#[derive(Clone, Default)]
pub struct AppState {
    index: Arc<OnceLock<Arc<Index>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn loaded(index: Index) -> Self {
        let s = Self::new();
        s.set(index);
        s
    }

    /// Installs the index; later calls are ignored.
    pub fn set(&self, index: Index) {
        let _ = self.index.set(Arc::new(index));
    }

    pub fn index(&self) -> Option<Arc<Index>> {
        self.index.get().cloned()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/schema", get(schema))
        .route("/stats", get(stats))
        .route("/query", post(query))
        .with_state(state)
}

fn json_response(status: StatusCode, body: &impl serde::Serialize) -> Response {
    let bytes = serde_json::to_vec(body).expect("response serializes");
    (status, [("content-type", "application/json")], bytes).into_response()
}

fn error_response(status: StatusCode, kind: &str, field: Option<String>, message: String) -> Response {
    json_response(
        status,
        &ErrorBody {
            error: ErrorDetail {
                kind: kind.into(),
                field,
                message,
            },
        },
    )
}

fn from_error(e: Error) -> Response {
    match e {
        Error::InvalidQuery { field, message } => {
            error_response(StatusCode::BAD_REQUEST, "invalid_request", Some(field), message)
        }
        Error::Unsupported(m) => error_response(StatusCode::UNPROCESSABLE_ENTITY, "unsupported", None, m),
        e => error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", None, e.to_string()),
    }
}

fn not_loaded() -> Response {
    error_response(
        StatusCode::SERVICE_UNAVAILABLE,
        "not_loaded",
        None,
        "index is still loading".into(),
    )
}

async fn schema(State(state): State<AppState>) -> Response {
    match state.index() {
        Some(ix) => json_response(StatusCode::OK, &SchemaResponse::new(&ix)),
        None => not_loaded(),
    }
}

async fn stats(State(state): State<AppState>) -> Response {
    match state.index() {
        Some(ix) => json_response(StatusCode::OK, &StatsResponse::new(&ix)),
        None => not_loaded(),
    }
}

/// Parses and runs one query request against `index`.
pub fn handle_query(index: &Index, body: &[u8]) -> Response {
    let req: QueryRequest = match serde_json::from_slice(body) {
        Ok(r) => r,
        Err(e) => {
            let msg = e.to_string();
            let field = msg
                .strip_prefix("unknown field `")
                .and_then(|r| r.split('`').next())
                .unwrap_or("body");
            return error_response(StatusCode::BAD_REQUEST, "invalid_request", Some(field.into()), msg);
        }
    };
    let result = api::to_spec(index, &req).and_then(|spec| execute(index, &spec));
    match result {
        Ok(r) => {
            let elapsed = r.meta.elapsed_micros;
            let mut resp = json_response(
                StatusCode::OK,
                &QueryResponse::from_result(index.schema(), r, req.timing),
            );
            resp.headers_mut().insert(
                ELAPSED_HEADER,
                HeaderValue::from_str(&elapsed.to_string()).expect("digits"),
            );
            resp
        }
        Err(e) => from_error(e),
    }
}

async fn query(State(state): State<AppState>, body: Bytes) -> Response {
    let Some(ix) = state.index() else { return not_loaded() };
    tokio::task::spawn_blocking(move || handle_query(&ix, &body))
        .await
        .unwrap_or_else(|e| error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", None, e.to_string()))
}

/// Binds `port`, then loads `index` in the background and serves until the
/// process ends. Requests before the load completes get 503.
pub async fn serve(index: PathBuf, port: u16) -> std::io::Result<()> {
    let state = AppState::new();
    let loader = state.clone();
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    tokio::task::spawn_blocking(move || match store::load(&index) {
        Ok(ix) => {
            tracing::info!("index loaded: {} subspaces", ix.leaves().len());
            loader.set(ix);
        }
        Err(e) => tracing::error!("failed to load {}: {e}", index.display()),
    });
    axum::serve(listener, router(state)).await?;
    Ok(())
}
