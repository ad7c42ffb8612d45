//! REST API over a [`Project`].
//!
//! Handlers only decode the request, call the matching `Project` method and
//! serialize its result; errors become [`ApiError`] bodies.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::annotation::LabelValue;
use crate::error::{Error, ErrorCode};
use crate::evalharness::Metric;
use crate::project::Project;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<BTreeMap<String, serde_json::Value>>,
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self.code {
            ErrorCode::NotFound => StatusCode::NOT_FOUND,
            ErrorCode::Validation => StatusCode::BAD_REQUEST,
            ErrorCode::State => StatusCode::CONFLICT,
            ErrorCode::Transport => StatusCode::BAD_GATEWAY,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self {
            code: ErrorCode::Validation,
            message: message.into(),
            details: None,
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self {
            code: e.code(),
            message: e.to_string(),
            details: e.details(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRoundBody {
    pub prompt_template: String,
    #[serde(default)]
    pub parent: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelBody {
    pub item_id: i64,
    pub value: LabelValue,
    pub annotator: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalBody {
    pub round_id: u64,
    pub model_name: String,
    /// `null` keeps the identity option order.
    #[serde(default)]
    pub option_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHandle {
    pub run_id: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportBody {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub holdout: Option<usize>,
}

pub const DEFAULT_PAGE_LIMIT: usize = 50;

struct AppState {
    project: Arc<Project>,
    /// Endpoints with a run in progress; one run per endpoint at a time.
    busy_endpoints: Mutex<HashSet<String>>,
    token: Option<String>,
}

type Shared = State<Arc<AppState>>;

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(bytes).map_err(|e| ApiError::validation(format!("invalid request body: {e}")))
}

fn id(raw: &str) -> Result<u64, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::validation(format!("invalid id {raw:?}")))
}

fn query(raw: Option<String>) -> HashMap<String, String> {
    raw.map(|q| url::form_urlencoded::parse(q.as_bytes()).into_owned().collect())
        .unwrap_or_default()
}

fn query_parse<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<Option<T>, ApiError> {
    q.get(key)
        .map(|v| v.parse().map_err(|_| ApiError::validation(format!("invalid {key} {v:?}"))))
        .transpose()
}

async fn list_rounds(State(s): Shared) -> ApiResult<Vec<crate::annotation::AnnotationRound>> {
    Ok(Json(s.project.list_rounds()))
}

async fn create_round(State(s): Shared, bytes: Bytes) -> ApiResult<crate::annotation::AnnotationRound> {
    let b: CreateRoundBody = body(&bytes)?;
    Ok(Json(s.project.create_round(&b.prompt_template, b.parent)?))
}

async fn items(State(s): Shared, Path(round): Path<String>, RawQuery(q): RawQuery) -> ApiResult<crate::annotation::ItemsPage> {
    let q = query(q);
    let cursor = query_parse(&q, "cursor")?.unwrap_or(0);
    let limit = query_parse(&q, "limit")?.unwrap_or(DEFAULT_PAGE_LIMIT);
    Ok(Json(s.project.items_page(id(&round)?, cursor, limit)?))
}

async fn submit_label(State(s): Shared, Path(round): Path<String>, bytes: Bytes) -> ApiResult<crate::annotation::Label> {
    let b: LabelBody = body(&bytes)?;
    Ok(Json(s.project.submit_label(id(&round)?, b.item_id, b.value, &b.annotator)?))
}

async fn progress(State(s): Shared, Path(round): Path<String>) -> ApiResult<crate::annotation::Progress> {
    Ok(Json(s.project.progress(id(&round)?)?))
}

async fn start_eval(State(s): Shared, bytes: Bytes) -> ApiResult<RunHandle> {
    let b: EvalBody = body(&bytes)?;
    let endpoint = s.project.model(&b.model_name)?.endpoint.clone();
    if !s.busy_endpoints.lock().unwrap().insert(endpoint.clone()) {
        return Err(Error::State(format!("endpoint {endpoint} already has a run in progress")).into());
    }
    let pending = match s.project.prepare_eval(b.round_id, &b.model_name, b.option_seed) {
        Ok(p) => p,
        Err(e) => {
            s.busy_endpoints.lock().unwrap().remove(&endpoint);
            return Err(e.into());
        }
    };
    let run_id = pending.run_id();
    let state = s.clone();
    tokio::spawn(async move {
        if let Err(e) = state.project.finish_eval(pending).await {
            tracing::warn!(run_id, "eval run failed: {e}");
        }
        state.busy_endpoints.lock().unwrap().remove(&endpoint);
    });
    Ok(Json(RunHandle { run_id }))
}

async fn get_run(State(s): Shared, Path(run): Path<String>) -> ApiResult<crate::evalharness::EvalRun> {
    Ok(Json(s.project.get_run(id(&run)?)?))
}

async fn calibration(State(s): Shared, Path(round): Path<String>, RawQuery(q): RawQuery) -> ApiResult<crate::calibration::CalibrationReport> {
    let metric: Option<Metric> = query_parse(&query(q), "metric")?;
    Ok(Json(s.project.calibrate(id(&round)?, metric)?))
}

async fn export(State(s): Shared, Path(round): Path<String>, bytes: Bytes) -> ApiResult<crate::exporter::ExportMetadata> {
    let b: ExportBody = if bytes.is_empty() {
        ExportBody { seed: None, holdout: None }
    } else {
        body(&bytes)?
    };
    Ok(Json(s.project.export(id(&round)?, b.seed, b.holdout)?))
}

async fn not_found() -> ApiError {
    ApiError {
        code: ErrorCode::NotFound,
        message: "no such endpoint".into(),
        details: None,
    }
}

async fn method_not_allowed() -> Response {
    let err = ApiError::validation("method not allowed");
    (StatusCode::METHOD_NOT_ALLOWED, Json(err)).into_response()
}

async fn require_token(State(s): Shared, req: Request, next: Next) -> Response {
    if let Some(expected) = &s.token {
        let ok = req
            .headers()
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == expected);
        if !ok {
            let err = ApiError::validation("missing or invalid bearer token");
            return (StatusCode::UNAUTHORIZED, Json(err)).into_response();
        }
    }
    next.run(req).await
}

/// Build the API router. The bearer token, when configured, is read from
/// the environment once here.
pub fn router(project: Arc<Project>) -> Result<Router, Error> {
    let token = match &project.config().service.bearer_token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| {
            Error::Config(format!("environment variable {var} for the service token is not set"))
        })?),
        None => None,
    };
    let state = Arc::new(AppState {
        project,
        busy_endpoints: Mutex::new(HashSet::new()),
        token,
    });
    Ok(Router::new()
        .route("/api/rounds", get(list_rounds).post(create_round))
        .route("/api/rounds/{id}/items", get(items))
        .route("/api/rounds/{id}/labels", post(submit_label))
        .route("/api/rounds/{id}/progress", get(progress))
        .route("/api/rounds/{id}/calibration", get(calibration))
        .route("/api/rounds/{id}/export", post(export))
        .route("/api/eval/runs", post(start_eval))
        .route("/api/eval/runs/{id}", get(get_run))
        .fallback(not_found)
        .method_not_allowed_fallback(method_not_allowed)
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state))
}

/// Bind `addr` and serve until `shutdown` resolves.
pub async fn serve(
    project: Arc<Project>,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), Error> {
    let app = router(project)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Config(format!("cannot bind {addr}: {e}")))?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    Ok(())
}
