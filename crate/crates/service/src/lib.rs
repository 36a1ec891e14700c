//! JSON-over-HTTP API for the live annotation loop.
//!
//! | method | path | body / query | response |
//! |---|---|---|---|
//! | GET | `/api/batch/next` | `?annotator_id=&role=` | [`BatchPayload`] |
//! | POST | `/api/annotations/blind` | [`BlindRequest`] | [`SubmitReport`] |
//! | POST | `/api/annotations/gold` | [`GoldRequest`] | [`GoldReport`] |
//! | POST | `/api/iteration/run` | [`RunRequest`] | [`RunResponse`] or a job token |
//! | GET | `/api/jobs/{token}` | | [`JobStatus`] |
//! | GET | `/api/metrics` | | [`Metrics`] |
//! | GET | `/api/sentence/{id}` | | [`SentenceView`] |
//!
//! Field names are fixed by `api-schema.json` next to this crate's manifest.
//! Out-of-order calls get 409, unknown sentences 404, and every project call
//! made while an iteration is training gets 503.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use mobal_core::active_learning::IterationRecord;
use mobal_core::project::Project;
use mobal_core::workflow::{
    ApiSession, BatchPayload, GoldReport, GoldSubmission, Metrics, Role, SentenceView, SpanSubmission, SubmitReport,
};
use mobal_core::Error;

/// The API contract shared with the annotation UI.
pub const API_SCHEMA: &str = include_str!("../api-schema.json");

pub const ROUTES: [(&str, &str); 7] = [
    ("GET", "/api/batch/next"),
    ("POST", "/api/annotations/blind"),
    ("POST", "/api/annotations/gold"),
    ("POST", "/api/iteration/run"),
    ("GET", "/api/jobs/{token}"),
    ("GET", "/api/metrics"),
    ("GET", "/api/sentence/{id}"),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionQuery {
    pub annotator_id: String,
    #[serde(default = "default_role")]
    pub role: Role,
}

fn default_role() -> Role {
    Role::Annotator
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlindRequest {
    pub annotator_id: String,
    pub annotations: Vec<SpanSubmission>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldRequest {
    pub adjudicator_id: String,
    pub resolutions: Vec<GoldSubmission>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunRequest {
    /// Train in the background and return a job token.
    #[serde(default, rename = "async")]
    pub run_async: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResponse {
    /// `ready` when a new batch is open, `terminal` when the loop has ended.
    pub status: String,
    pub record: IterationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Done { result: RunResponse },
    Failed { error: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobToken {
    pub job: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub status: String,
    pub error: String,
}

/// An error with its HTTP status.
#[derive(Debug)]
pub struct ApiError {
    pub code: StatusCode,
    pub status: &'static str,
    pub message: String,
}

impl ApiError {
    fn busy() -> Self {
        ApiError { code: StatusCode::SERVICE_UNAVAILABLE, status: "busy", message: "an iteration is training".into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError { code: StatusCode::BAD_REQUEST, status: "bad_request", message: message.into() }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (code, status) = match &e {
            Error::Workflow(_) | Error::PendingAnnotations(_) | Error::EmptyPool => (StatusCode::CONFLICT, "not_ready"),
            Error::UnknownSentence(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::AnnotationRejected { .. } | Error::SentenceMismatch => (StatusCode::BAD_REQUEST, "bad_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "error"),
        };
        ApiError { code, status, message: e.to_string() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { status: self.status.to_string(), error: self.message };
        (self.code, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Shared server state: the single-writer project and the training flag.
#[derive(Clone)]
pub struct AppState {
    project: Arc<Mutex<Project>>,
    busy: Arc<AtomicBool>,
    jobs: Arc<Mutex<BTreeMap<String, JobStatus>>>,
    next_job: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(project: Project) -> Self {
        AppState {
            project: Arc::new(Mutex::new(project)),
            busy: Arc::new(AtomicBool::new(false)),
            jobs: Arc::default(),
            next_job: Arc::default(),
        }
    }

    /// The project, unless an iteration is training.
    fn project(&self) -> Result<MutexGuard<'_, Project>, ApiError> {
        if self.busy.load(Ordering::SeqCst) {
            return Err(ApiError::busy());
        }
        Ok(self.project.lock().unwrap_or_else(|p| p.into_inner()))
    }

    pub fn is_busy(&self) -> bool {
        self.busy.load(Ordering::SeqCst)
    }

    /// Marks the state busy for the lifetime of the guard.
    pub fn claim(&self) -> Result<BusyGuard, ApiError> {
        self.busy.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).map_err(|_| ApiError::busy())?;
        Ok(BusyGuard(self.busy.clone()))
    }
}

pub struct BusyGuard(Arc<AtomicBool>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

fn session(id: &str, role: Role) -> Result<ApiSession, ApiError> {
    ApiSession::new(id, role).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn next_batch(State(st): State<AppState>, Query(q): Query<SessionQuery>) -> ApiResult<BatchPayload> {
    let s = session(&q.annotator_id, q.role)?;
    Ok(Json(st.project()?.next_batch(&s)?))
}

async fn submit_blind(State(st): State<AppState>, Json(req): Json<BlindRequest>) -> ApiResult<SubmitReport> {
    let s = session(&req.annotator_id, Role::Annotator)?;
    Ok(Json(st.project()?.submit_blind(&s, req.annotations)?))
}

async fn submit_gold(State(st): State<AppState>, Json(req): Json<GoldRequest>) -> ApiResult<GoldReport> {
    let s = session(&req.adjudicator_id, Role::Adjudicator)?;
    Ok(Json(st.project()?.submit_gold(&s, req.resolutions)?))
}

fn run_blocking(st: &AppState) -> Result<RunResponse, ApiError> {
    let mut project = st.project.lock().unwrap_or_else(|p| p.into_inner());
    let record = project.close_and_run()?;
    Ok(RunResponse { status: if record.terminal { "terminal" } else { "ready" }.to_string(), record })
}

async fn run_iteration(State(st): State<AppState>, body: Option<Json<RunRequest>>) -> Result<Response, ApiError> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    // reject early while the batch is still open, without claiming the flag
    {
        let p = st.project()?;
        if p.is_terminal() {
            return Err(Error::Workflow("iteration not ready: the loop has terminated".into()).into());
        }
        if !p.batch_closeable() {
            return Err(Error::Workflow("iteration not ready: batch has sentences without gold".into()).into());
        }
    }
    let guard = st.claim()?;
    if req.run_async {
        let token = format!("job-{}", st.next_job.fetch_add(1, Ordering::SeqCst) + 1);
        st.jobs.lock().unwrap().insert(token.clone(), JobStatus::Running);
        let st2 = st.clone();
        let t2 = token.clone();
        tokio::task::spawn_blocking(move || {
            let _guard = guard;
            let status = match run_blocking(&st2) {
                Ok(result) => JobStatus::Done { result },
                Err(e) => JobStatus::Failed { error: e.message },
            };
            st2.jobs.lock().unwrap().insert(t2, status);
        });
        return Ok((StatusCode::ACCEPTED, Json(JobToken { job: token })).into_response());
    }
    let st2 = st.clone();
    let res = tokio::task::spawn_blocking(move || {
        let _guard = guard;
        run_blocking(&st2)
    })
    .await
    .map_err(|e| ApiError {
        code: StatusCode::INTERNAL_SERVER_ERROR,
        status: "error",
        message: e.to_string(),
    })??;
    Ok(Json(res).into_response())
}

async fn job_status(State(st): State<AppState>, Path(token): Path<String>) -> ApiResult<JobStatus> {
    st.jobs.lock().unwrap().get(&token).cloned().map(Json).ok_or(ApiError {
        code: StatusCode::NOT_FOUND,
        status: "not_found",
        message: format!("unknown job {token}"),
    })
}

async fn metrics(State(st): State<AppState>) -> ApiResult<Metrics> {
    Ok(Json(st.project()?.metrics()))
}

async fn sentence(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<SentenceView> {
    Ok(Json(st.project()?.sentence_view(&id)?))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/batch/next", get(next_batch))
        .route("/api/annotations/blind", post(submit_blind))
        .route("/api/annotations/gold", post(submit_gold))
        .route("/api/iteration/run", post(run_iteration))
        .route("/api/jobs/{token}", get(job_status))
        .route("/api/metrics", get(metrics))
        .route("/api/sentence/{id}", get(sentence))
        .with_state(state)
}

/// Serves the project until the process is stopped.
pub async fn serve(project: Project, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(project))).await
}
