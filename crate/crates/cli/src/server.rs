//! HTTP service over a loaded checkpoint.

use std::collections::HashMap;
use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use head360::checkpoint::{Checkpoint, Head};
use head360::geometry::camera::CameraRecord;
use head360::optim::fit::FitConfig;
use serde::{Deserialize, Serialize};

use crate::api::{self, ApiError, AnimateRequest, FitInput, FittedLookup, RenderRequest};

pub const DEFAULT_QUEUE: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    pub max_size: u32,
    /// Fit jobs that may wait behind the running one.
    pub queue: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            max_size: api::DEFAULT_MAX_SIZE,
            queue: DEFAULT_QUEUE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: String,
    pub state: JobState,
    pub progress: f64,
    pub result: Option<String>,
    pub error: Option<String>,
}

struct Job {
    record: JobRecord,
    bundle: Option<Arc<Vec<u8>>>,
    head: Option<Head>,
}

type Jobs = Arc<Mutex<HashMap<String, Job>>>;

pub struct AppState {
    checkpoint: Arc<Checkpoint>,
    config: ServerConfig,
    jobs: Jobs,
    queue: SyncSender<(String, FitInput)>,
}

struct JobsLookup<'a>(&'a Jobs);

impl FittedLookup for JobsLookup<'_> {
    fn fitted(&self, job: &str) -> Option<Head> {
        self.0.lock().unwrap().get(job).and_then(|j| j.head.clone())
    }
}

fn update(jobs: &Jobs, id: &str, f: impl FnOnce(&mut Job)) {
    if let Some(job) = jobs.lock().unwrap().get_mut(id) {
        f(job);
    }
}

fn stage_progress(stage: &str, done: usize, total: usize) -> f64 {
    let frac = if total == 0 { 1.0 } else { done as f64 / total as f64 };
    match stage {
        "shape" => 0.05 * frac,
        "texture" => 0.05 + 0.9 * frac,
        _ => 0.95 + 0.05 * frac,
    }
}

impl AppState {
    /// Start the fit worker; it exits when the state is dropped.
    pub fn new(checkpoint: Checkpoint, config: ServerConfig) -> Arc<Self> {
        let checkpoint = Arc::new(checkpoint);
        let jobs: Jobs = Arc::default();
        let (tx, rx) = sync_channel::<(String, FitInput)>(config.queue);
        let (ck, worker_jobs) = (checkpoint.clone(), jobs.clone());
        std::thread::spawn(move || {
            for (id, input) in rx {
                update(&worker_jobs, &id, |j| j.record.state = JobState::Running);
                let result = api::run_fit(&ck, &input, |stage, done, total| {
                    let p = stage_progress(stage, done, total);
                    update(&worker_jobs, &id, |j| j.record.progress = j.record.progress.max(p));
                })
                .and_then(|fitted| Ok((api::zip_files(&fitted.to_files(&ck)?)?, fitted)));
                update(&worker_jobs, &id, |j| match result {
                    Ok((bundle, fitted)) => {
                        j.bundle = Some(Arc::new(bundle));
                        j.head = Some(fitted.head);
                        j.record.progress = 1.0;
                        j.record.result = Some(format!("/jobs/{id}/result"));
                        j.record.state = JobState::Done;
                    }
                    Err(e) => {
                        j.record.error = Some(e.to_string());
                        j.record.state = JobState::Failed;
                    }
                });
            }
        });
        Arc::new(Self {
            checkpoint,
            config,
            jobs,
            queue: tx,
        })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn job(&self, id: &str) -> Option<JobRecord> {
        self.jobs.lock().unwrap().get(id).map(|j| j.record.clone())
    }

    /// Queue a fit; fails with 503 when the queue is full.
    pub fn submit_fit(&self, input: FitInput) -> Result<JobRecord, ApiError> {
        let id = ulid::Ulid::new().to_string();
        let record = JobRecord {
            id: id.clone(),
            kind: "fit".into(),
            state: JobState::Queued,
            progress: 0.0,
            result: None,
            error: None,
        };
        self.jobs.lock().unwrap().insert(
            id.clone(),
            Job {
                record: record.clone(),
                bundle: None,
                head: None,
            },
        );
        match self.queue.try_send((id.clone(), input)) {
            Ok(()) => Ok(record),
            Err(e) => {
                self.jobs.lock().unwrap().remove(&id);
                Err(match e {
                    TrySendError::Full(_) => ApiError::Busy("fit queue is full".into()),
                    TrySendError::Disconnected(_) => ApiError::Internal("fit worker stopped".into()),
                })
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/model", get(model))
        .route("/render", post(render))
        .route("/animate", post(animate))
        .route("/fit", post(fit))
        .route("/jobs/{id}", get(job))
        .route("/jobs/{id}/result", get(job_result))
        .with_state(state)
}

fn parse<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed request: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn model(State(st): State<Shared>) -> Json<api::ModelInfo> {
    Json(api::model_info(&st.checkpoint, st.config.max_size))
}

async fn render(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest = parse(&body)?;
    let png = blocking(move || api::render_png(&st.checkpoint, &req, st.config.max_size, &JobsLookup(&st.jobs))).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn animate(State(st): State<Shared>, body: Bytes) -> Result<Response, ApiError> {
    let spec = parse::<AnimateRequest>(&body)?.into_spec();
    let zip = blocking(move || {
        let frames = api::animate_frames(&st.checkpoint, &spec, st.config.max_size, &JobsLookup(&st.jobs))?;
        api::zip_files(&frames)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/zip")], zip).into_response())
}

async fn fit(State(st): State<Shared>, mut form: Multipart) -> Result<Response, ApiError> {
    let mut parts: HashMap<String, Vec<u8>> = HashMap::new();
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::BadRequest(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field.bytes().await.map_err(|e| ApiError::BadRequest(e.to_string()))?;
        parts.insert(name, bytes.to_vec());
    }
    let need = |k: &str| parts.get(k).ok_or_else(|| ApiError::BadRequest(format!("multipart field `{k}` is required")));
    let mut input = FitInput::decode(need("image")?, need("mask")?, need("landmarks")?)?;
    if let Some(b) = parts.get("camera_id") {
        let text = String::from_utf8_lossy(b);
        input.camera_id = Some(text.trim().parse().map_err(|_| ApiError::BadRequest(format!("bad camera_id `{text}`")))?);
    }
    if let Some(b) = parts.get("camera") {
        input.camera = Some(parse::<CameraRecord>(b)?);
    }
    if let Some(b) = parts.get("activations") {
        input.activations = Some(parse(b)?);
    }
    if let Some(b) = parts.get("config") {
        input.config = parse::<FitConfig>(b)?;
    }
    // Reject bad dimensions now rather than in the job.
    let ck = &st.checkpoint;
    api::resolve_landmarks(ck, &input.landmarks)?;
    api::resolve_camera(ck, input.camera_id, input.camera.as_ref(), None, u32::MAX)?;
    api::blend(ck, input.activations.as_deref())?;
    input.config.validate()?;
    let record = st.submit_fit(input)?;
    Ok((StatusCode::ACCEPTED, Json(record)).into_response())
}

async fn job(State(st): State<Shared>, Path(id): Path<String>) -> Result<Json<JobRecord>, ApiError> {
    st.job(&id).map(Json).ok_or_else(|| ApiError::NotFound(format!("job `{id}`")))
}

async fn job_result(State(st): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let (state, bundle) = {
        let jobs = st.jobs.lock().unwrap();
        let j = jobs.get(&id).ok_or_else(|| ApiError::NotFound(format!("job `{id}`")))?;
        (j.record.state, j.bundle.clone())
    };
    match (state, bundle) {
        (JobState::Done, Some(b)) => Ok(([(header::CONTENT_TYPE, "application/zip")], b.as_ref().clone()).into_response()),
        (JobState::Failed, _) => Err(ApiError::Conflict(format!("job `{id}` failed"))),
        _ => Err(ApiError::Conflict(format!("job `{id}` has no result yet"))),
    }
}
