//! JSON-over-HTTP service for the steering UI.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::api::{self, GenerateRequest, SortKey, SCHEMA_VERSION};
use crate::error::ServiceError;
use crate::registry::{JobStatus, Registry};

type AppState = Arc<Registry>;

pub enum ApiError {
    Service(ServiceError),
    Malformed(String),
    NotFound,
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self::Service(e)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::Malformed(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::Malformed(e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        Self::Malformed(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code, message, hint) = match self {
            Self::Malformed(msg) => (StatusCode::BAD_REQUEST, "malformed_request", msg, None),
            Self::NotFound => (
                StatusCode::NOT_FOUND,
                "not_found",
                "no such endpoint".to_string(),
                None,
            ),
            Self::Service(e) => {
                let status = match e.code() {
                    "unknown_run" | "unknown_checkpoint" | "no_checkpoints" => StatusCode::NOT_FOUND,
                    "analysis_missing" => StatusCode::CONFLICT,
                    "bad_request" => StatusCode::BAD_REQUEST,
                    _ => StatusCode::INTERNAL_SERVER_ERROR,
                };
                if status == StatusCode::INTERNAL_SERVER_ERROR {
                    log::error!("request failed: {e}");
                }
                (status, e.code(), e.to_string(), e.hint())
            }
        };
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": { "code": code, "message": message, "hint": hint },
        });
        (status, Json(body)).into_response()
    }
}

type ApiResult = Result<Json<Value>, ApiError>;

/// Serializes `body` with the schema version added at the top level.
fn envelope<T: Serialize>(body: &T) -> ApiResult {
    let mut v = serde_json::to_value(body)
        .map_err(|e| ApiError::Service(ServiceError::Core(topklm::Error::from(e))))?;
    match &mut v {
        Value::Object(map) => {
            map.insert("schema_version".into(), json!(SCHEMA_VERSION));
        }
        other => {
            *other = json!({ "schema_version": SCHEMA_VERSION, "data": other.take() });
        }
    }
    Ok(Json(v))
}

/// Runs CPU-bound work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Service(ServiceError::Io(std::io::Error::other(e.to_string()))))?
        .map_err(ApiError::from)
}

pub fn router(registry: Arc<Registry>) -> Router {
    Router::new()
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{run}/checkpoints", get(list_checkpoints))
        .route("/api/neurons", get(list_neurons))
        .route("/api/neurons/{layer}/{idx}/top-tokens", get(top_tokens))
        .route("/api/generate", post(generate))
        .route("/api/trace", get(trace))
        .route("/api/entropy/summary", get(entropy_summary))
        .route("/api/analyze", post(analyze))
        .route("/api/analyze/status", get(analyze_status))
        .fallback(|| async { ApiError::NotFound })
        .with_state(registry)
}

/// Serves until the process receives ctrl-c.
pub async fn serve(registry: Arc<Registry>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!(
        "serving {} on http://{}",
        registry.root().display(),
        listener.local_addr()?
    );
    axum::serve(listener, router(registry))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn list_runs(State(reg): State<AppState>) -> ApiResult {
    let runs = blocking(move || reg.runs()).await?;
    envelope(&json!({ "runs": runs }))
}

async fn list_checkpoints(State(reg): State<AppState>, path: Result<Path<String>, PathRejection>) -> ApiResult {
    let Path(run) = path?;
    let name = run.clone();
    let ckpts = blocking(move || reg.checkpoints(&name)).await?;
    envelope(&json!({ "run": run, "checkpoints": ckpts }))
}

#[derive(Deserialize)]
struct NeuronsQuery {
    run: String,
    ckpt: Option<usize>,
    layer: Option<usize>,
    #[serde(default)]
    sort: SortKey,
    limit: Option<usize>,
}

async fn list_neurons(State(reg): State<AppState>, q: Result<Query<NeuronsQuery>, QueryRejection>) -> ApiResult {
    let Query(q) = q?;
    let list = blocking(move || api::neurons(&reg, &q.run, q.ckpt, q.layer, q.sort, q.limit)).await?;
    envelope(&list)
}

#[derive(Deserialize)]
struct RunCkptQuery {
    run: String,
    ckpt: Option<usize>,
    limit: Option<usize>,
}

async fn top_tokens(
    State(reg): State<AppState>,
    path: Result<Path<(usize, usize)>, PathRejection>,
    q: Result<Query<RunCkptQuery>, QueryRejection>,
) -> ApiResult {
    let Path((layer, idx)) = path?;
    let Query(q) = q?;
    let limit = q.limit.unwrap_or(20);
    let out = blocking(move || api::top_tokens(&reg, &q.run, q.ckpt, layer, idx, limit)).await?;
    envelope(&out)
}

async fn generate(State(reg): State<AppState>, body: Result<Json<GenerateRequest>, JsonRejection>) -> ApiResult {
    let Json(req) = body?;
    let out = blocking(move || api::generate(&reg, &req)).await?;
    envelope(&out)
}

#[derive(Deserialize)]
struct TraceQuery {
    run: String,
    dim: usize,
    /// Token id.
    token: Option<usize>,
    /// Alternatively, a single-byte token given as text.
    #[serde(rename = "char")]
    ch: Option<String>,
}

async fn trace(State(reg): State<AppState>, q: Result<Query<TraceQuery>, QueryRejection>) -> ApiResult {
    let Query(q) = q?;
    let token = match (q.token, q.ch.as_deref().map(str::as_bytes)) {
        (Some(t), None) => t,
        (None, Some([b])) => *b as usize,
        _ => {
            return Err(ApiError::Malformed(
                "give exactly one of `token` (id) or `char` (single byte)".into(),
            ))
        }
    };
    let map = blocking(move || api::trace(&reg, &q.run, q.dim, token, false)).await?;
    envelope(&map)
}

#[derive(Deserialize)]
struct SummaryQuery {
    run: String,
    ckpt: Option<usize>,
}

async fn entropy_summary(State(reg): State<AppState>, q: Result<Query<SummaryQuery>, QueryRejection>) -> ApiResult {
    let Query(q) = q?;
    let out = blocking(move || api::entropy_summary(&reg, &q.run, q.ckpt)).await?;
    envelope(&out)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalyzeRequest {
    run: String,
    /// One checkpoint, or every checkpoint of the run when absent.
    ckpt: Option<usize>,
}

async fn analyze(State(reg): State<AppState>, body: Result<Json<AnalyzeRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body?;
    let jobs: Vec<JobStatus> = blocking(move || {
        let steps = match req.ckpt {
            Some(s) => vec![reg.resolve_step(&req.run, Some(s))?],
            None => reg.run_dir(&req.run)?.steps()?,
        };
        steps
            .into_iter()
            .map(|s| reg.enqueue_analysis(&req.run, s))
            .collect()
    })
    .await?;
    let all_done = jobs
        .iter()
        .all(|j| j.state == crate::registry::JobState::Done);
    let status = if all_done { StatusCode::OK } else { StatusCode::ACCEPTED };
    Ok((status, envelope(&json!({ "jobs": jobs }))?).into_response())
}

#[derive(Deserialize)]
struct StatusQuery {
    run: String,
    ckpt: usize,
}

async fn analyze_status(State(reg): State<AppState>, q: Result<Query<StatusQuery>, QueryRejection>) -> ApiResult {
    let Query(q) = q?;
    let status = blocking(move || reg.job_status(&q.run, q.ckpt)).await?;
    envelope(&status)
}
