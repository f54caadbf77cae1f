//! HTTP front end over a [`SearchEngine`].
//!
//! | Method | Path | Body |
//! |---|---|---|
//! | POST | `/v1/query` | [`QueryRequest`] → [`QueryResponse`](gridsearch_core::api::QueryResponse) |
//! | GET | `/v1/grids` | layouts with cell rectangles |
//! | GET | `/v1/models` | model names and availability |
//! | GET | `/v1/reports` | stored evaluation report ids |
//! | GET | `/v1/reports/{id}` | one evaluation report |
//! | GET | `/healthz` | liveness |
//!
//! Errors come back as `{"error": {"kind", "field"?, "message"}}`.

mod config;

pub use config::{Config, DEFAULT_LISTEN};

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use thiserror::Error;
use tower_http::services::ServeDir;
use tower_http::trace::TraceLayer;
use tracing::info;

use gridsearch_core::api::{self, ApiError, ApiErrorKind, QueryRequest};
use gridsearch_core::dataset::DatasetError;
use gridsearch_core::embed::EmbedError;
use gridsearch_core::retrieval::{RetrievalError, SearchEngine};
use gridsearch_core::store::StoreError;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<SearchEngine>,
    pub reports_dir: Option<PathBuf>,
    pub thumbnail_prefix: String,
}

impl AppState {
    pub fn new(engine: SearchEngine) -> Self {
        Self {
            engine: Arc::new(engine),
            reports_dir: None,
            thumbnail_prefix: api::DEFAULT_THUMBNAIL_PREFIX.to_string(),
        }
    }

    pub fn from_config(config: &Config) -> Result<Self, ServiceError> {
        Ok(Self {
            engine: Arc::new(config.load_engine()?),
            reports_dir: config.reports_dir.clone(),
            thumbnail_prefix: config.thumbnail_prefix.clone(),
        })
    }
}

struct ApiFailure(ApiError);

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self.0 }))).into_response()
    }
}

impl From<ApiError> for ApiFailure {
    fn from(e: ApiError) -> Self {
        ApiFailure(e)
    }
}

/// All API routes, plus static thumbnails when `thumbnail_root` is set.
pub fn router(state: AppState, thumbnail_root: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/query", post(query))
        .route("/v1/grids", get(grids))
        .route("/v1/models", get(models))
        .route("/v1/reports", get(list_reports))
        .route("/v1/reports/{id}", get(report));
    if let Some(root) = thumbnail_root {
        app = app.nest_service(&state.thumbnail_prefix, ServeDir::new(root));
    }
    app.with_state(state).layer(TraceLayer::new_for_http())
}

async fn query(
    State(state): State<AppState>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Json<api::QueryResponse>, ApiFailure> {
    let Json(req) = body.map_err(|e| ApiError::new(ApiErrorKind::BadRequest, None, e.body_text()))?;
    // Embedding may block on the network; keep it off the async workers.
    let result = tokio::task::spawn_blocking(move || {
        api::execute_query(&state.engine, &req, &state.thumbnail_prefix)
    })
    .await
    .map_err(|e| ApiError::new(ApiErrorKind::Internal, None, e.to_string()))??;
    Ok(Json(result))
}

async fn grids(State(state): State<AppState>) -> Json<Vec<api::GridInfo>> {
    Json(api::list_grids(&state.engine))
}

async fn models(State(state): State<AppState>) -> Json<Vec<api::ModelInfo>> {
    Json(api::list_models(&state.engine))
}

fn valid_report_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '@' | '='))
}

async fn list_reports(State(state): State<AppState>) -> Json<Vec<String>> {
    let mut ids = Vec::new();
    if let Some(dir) = &state.reports_dir {
        if let Ok(entries) = std::fs::read_dir(dir) {
            for e in entries.flatten() {
                let p = e.path();
                if p.extension().is_some_and(|x| x == "json") {
                    if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                        ids.push(stem.to_string());
                    }
                }
            }
        }
    }
    ids.sort();
    Json(ids)
}

async fn report(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiFailure> {
    let not_found = || ApiError::new(ApiErrorKind::NotFound, None, format!("unknown report {id:?}"));
    let dir = state.reports_dir.as_ref().ok_or_else(not_found)?;
    if !valid_report_id(&id) {
        return Err(not_found().into());
    }
    let text = match tokio::fs::read_to_string(dir.join(format!("{id}.json"))).await {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(not_found().into()),
        Err(e) => return Err(ApiError::new(ApiErrorKind::Internal, None, e.to_string()).into()),
    };
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| ApiError::new(ApiErrorKind::Internal, None, format!("report {id}: {e}")))?;
    Ok(Json(value).into_response())
}

/// Loads everything named in `config` and serves until Ctrl-C.
pub async fn serve(config: Config) -> Result<(), ServiceError> {
    let state = tokio::task::spawn_blocking({
        let config = config.clone();
        move || AppState::from_config(&config)
    })
    .await
    .map_err(|e| ServiceError::Config(e.to_string()))??;
    let app = router(state, config.thumbnail_root.clone());
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
