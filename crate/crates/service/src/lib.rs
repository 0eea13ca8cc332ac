//! HTTP/JSON front end for the mini-app.
//!
//! | route              | body            | reply                     |
//! |--------------------|-----------------|---------------------------|
//! | `GET /v1/health`   |                 | [`Health`]                |
//! | `GET /v1/components` |               | component manifest        |
//! | `POST /v1/runs`    | `RunRequest`    | `RunSummary`              |
//! | `POST /v1/bench`   | `BenchRequest`  | `BenchReport`             |
//!
//! Failures reply with an `ApiError` body and a status derived from the
//! error category. Simulations run on the blocking pool one at a time, so
//! concurrent requests never skew each other's timings.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Mutex;

use monc_core::api::{ApiError, BenchReport, BenchRequest, RunRequest, RunSummary};
use monc_core::components::{manifest, VERSION};
use monc_core::options::OptionsDatabase;
use monc_core::registry::{ComponentInfo, Registry};
use monc_core::simulation::RunEnv;
use monc_core::{Error, ErrorCategory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
}

#[derive(Clone)]
pub struct AppState {
    env: Arc<RunEnv>,
    busy: Arc<Mutex<()>>,
}

impl AppState {
    pub fn new(env: RunEnv) -> Self {
        AppState {
            env: Arc::new(env),
            busy: Arc::new(Mutex::new(())),
        }
    }
}

pub struct ApiFailure(ApiError);

impl From<Error> for ApiFailure {
    fn from(e: Error) -> Self {
        ApiFailure(ApiError::from(&e))
    }
}

pub fn status_for(category: ErrorCategory) -> StatusCode {
    match category {
        ErrorCategory::Config => StatusCode::BAD_REQUEST,
        ErrorCategory::Numeric => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorCategory::Communication => StatusCode::BAD_GATEWAY,
        ErrorCategory::Io => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiFailure {
    fn into_response(self) -> Response {
        (status_for(self.0.category), Json(self.0)).into_response()
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: VERSION.into(),
    })
}

async fn components() -> Result<Json<Vec<ComponentInfo>>, ApiFailure> {
    let opts = OptionsDatabase::new();
    let mut r = Registry::new();
    for d in manifest() {
        r.register(d, &opts)?;
    }
    Ok(Json(r.components()))
}

async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiFailure>
where
    T: Send + 'static,
    F: FnOnce(&RunEnv) -> monc_core::Result<T> + Send + 'static,
{
    let _guard = state.busy.lock().await;
    let env = state.env.clone();
    match tokio::task::spawn_blocking(move || f(&env)).await {
        Ok(r) => r.map_err(ApiFailure::from),
        Err(e) => Err(ApiFailure(ApiError {
            category: ErrorCategory::Communication,
            message: format!("simulation task failed: {e}"),
        })),
    }
}

async fn runs(State(state): State<AppState>, Json(req): Json<RunRequest>) -> Result<Json<RunSummary>, ApiFailure> {
    let summary = blocking(&state, move |env| monc_core::simulation::run(&req, env)).await?;
    Ok(Json(summary))
}

async fn bench(State(state): State<AppState>, Json(req): Json<BenchRequest>) -> Result<Json<BenchReport>, ApiFailure> {
    let report = blocking(&state, move |env| monc_core::bench::run_bench(&req, env)).await?;
    Ok(Json(report))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/components", get(components))
        .route("/v1/runs", post(runs))
        .route("/v1/bench", post(bench))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, env: RunEnv) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::new(env))).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_map_to_distinct_statuses() {
        let all = [
            ErrorCategory::Config,
            ErrorCategory::Numeric,
            ErrorCategory::Communication,
            ErrorCategory::Io,
        ];
        let mut codes: Vec<u16> = all.iter().map(|&c| status_for(c).as_u16()).collect();
        codes.dedup();
        assert_eq!(codes.len(), 4);
        assert_eq!(status_for(ErrorCategory::Config), StatusCode::BAD_REQUEST);
    }

    #[tokio::test]
    async fn components_lists_the_manifest() {
        let Json(list) = components().await.ok().unwrap();
        let names: Vec<_> = list.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, monc_core::components::MANIFEST);
        assert!(list.iter().all(|c| !c.enabled));
    }
}
