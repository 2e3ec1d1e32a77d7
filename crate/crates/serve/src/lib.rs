//! HTTP/JSON continuation service.
//!
//! `POST /v1/continue`, `GET /v1/health` and `POST /v1/reload` over an engine
//! that holds the checkpoint and the precomputed catalog matrix in memory.

mod engine;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

pub use engine::{
    ContinuationRequest, ContinuationResponse, Engine, LatencyMs, SeedId, ServeConfig, CATALOG_FILE, MODEL_FILE, SONGS_FILE,
};
use rta_core::RtaError;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("no seed track could be resolved")]
    UnknownSeed(Vec<String>),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("no engine is loaded")]
    NotLoaded,
    #[error("a reload is already in progress")]
    ReloadInProgress,
    #[error(transparent)]
    Core(#[from] RtaError),
}

impl ServeError {
    fn status_and_code(&self) -> (StatusCode, &'static str) {
        match self {
            ServeError::UnknownSeed(_) => (StatusCode::UNPROCESSABLE_ENTITY, "unknown_seed"),
            ServeError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServeError::NotLoaded => (StatusCode::SERVICE_UNAVAILABLE, "not_loaded"),
            ServeError::ReloadInProgress => (StatusCode::CONFLICT, "reload_in_progress"),
            ServeError::Core(RtaError::StaleArtifact(_)) => (StatusCode::INTERNAL_SERVER_ERROR, "stale_artifact"),
            ServeError::Core(RtaError::Domain(_) | RtaError::UnknownSong(_)) => (StatusCode::BAD_REQUEST, "bad_request"),
            ServeError::Core(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        }
    }
}

impl IntoResponse for ServeError {
    fn into_response(self) -> Response {
        let (status, code) = self.status_and_code();
        let warnings = match &self {
            ServeError::UnknownSeed(w) => w.clone(),
            _ => Vec::new(),
        };
        (status, Json(json!({"error": code, "message": self.to_string(), "warnings": warnings}))).into_response()
    }
}

/// Shared service state: the current engine behind a swappable reference.
pub struct AppState {
    config: ServeConfig,
    engine: RwLock<Option<Arc<Engine>>>,
    reloading: AtomicBool,
}

impl AppState {
    pub fn new(config: ServeConfig, engine: Option<Engine>) -> Arc<Self> {
        Arc::new(AppState {
            config,
            engine: RwLock::new(engine.map(Arc::new)),
            reloading: AtomicBool::new(false),
        })
    }

    /// The engine requests should use. In-flight requests keep the old one
    /// alive until they finish.
    pub fn engine(&self) -> Result<Arc<Engine>, ServeError> {
        self.engine.read().expect("engine lock").clone().ok_or(ServeError::NotLoaded)
    }

    /// Marks a reload as running; `None` if one already is.
    pub fn begin_reload(self: &Arc<Self>) -> Option<ReloadGuard> {
        self.reloading
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .is_ok()
            .then(|| ReloadGuard(self.clone()))
    }

    /// Loads fresh artifacts from the configured directory and swaps them in.
    pub fn reload(self: &Arc<Self>) -> Result<Arc<Engine>, ServeError> {
        let _guard = self.begin_reload().ok_or(ServeError::ReloadInProgress)?;
        let fresh = Arc::new(Engine::load(&self.config)?);
        *self.engine.write().expect("engine lock") = Some(fresh.clone());
        Ok(fresh)
    }
}

pub struct ReloadGuard(Arc<AppState>);

impl Drop for ReloadGuard {
    fn drop(&mut self) {
        self.0.reloading.store(false, Ordering::Release);
    }
}

async fn continue_handler(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ContinuationRequest>, JsonRejection>,
) -> Result<Json<ContinuationResponse>, ServeError> {
    let Json(request) = body.map_err(|e| ServeError::BadRequest(e.body_text()))?;
    let engine = state.engine()?;
    let response = tokio::task::spawn_blocking(move || engine.handle(&request))
        .await
        .map_err(|e| ServeError::Core(RtaError::Internal(e.to_string())))??;
    if !response.warnings.is_empty() {
        tracing::warn!(warnings = ?response.warnings, "continuation request had unresolved seeds");
    }
    Ok(Json(response))
}

async fn health_handler(State(state): State<Arc<AppState>>) -> Result<Json<serde_json::Value>, ServeError> {
    let engine = state.engine()?;
    Ok(Json(json!({
        "status": "ok",
        "catalog_size": engine.catalog_size(),
        "model": engine.label(),
        "checkpoint_sha256": engine.checkpoint_hash,
    })))
}

async fn reload_handler(State(state): State<Arc<AppState>>) -> Result<Json<serde_json::Value>, ServeError> {
    let engine = tokio::task::spawn_blocking(move || state.reload())
        .await
        .map_err(|e| ServeError::Core(RtaError::Internal(e.to_string())))??;
    Ok(Json(json!({"status": "reloaded", "catalog_size": engine.catalog_size(), "checkpoint_sha256": engine.checkpoint_hash})))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/continue", post(continue_handler))
        .route("/v1/health", get(health_handler))
        .route("/v1/reload", post(reload_handler))
        .with_state(state)
}

/// Loads the engine and serves until Ctrl-C.
pub fn serve(config: ServeConfig) -> Result<(), ServeError> {
    let engine = Engine::load(&config)?;
    tracing::info!(model = %engine.label(), catalog_size = engine.catalog_size(), "engine loaded");
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(config.worker_threads)
        .enable_all()
        .build()
        .map_err(|e| RtaError::Internal(format!("tokio runtime: {e}")))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&config.bind_address)
            .await
            .map_err(|e| RtaError::Config(format!("cannot bind {}: {e}", config.bind_address)))?;
        tracing::info!(address = %config.bind_address, "listening");
        let app = router(AppState::new(config, Some(engine)));
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| ServeError::Core(RtaError::Internal(e.to_string())))
    })
}
