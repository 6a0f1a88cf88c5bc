//! HTTP/JSON service.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | POST | `/v1/outpaint` | multipart: `image` PNG, optional `mask` PNG, `params` JSON | 202 `{"job_id"}` |
//! | POST | `/v1/outpaint/baseline` | same, run on the frozen base alone | 202 `{"job_id"}` |
//! | GET | `/v1/jobs/{id}` | | job JSON |
//! | GET | `/v1/jobs/{id}/result` | | ZIP (`variant_NNN.png`, `mask.png`, `metrics.json`) or report JSON |
//! | POST | `/v1/metrics/expansion` | multipart: `input` PNG, `outpainted` PNG, `seed` | expansion report JSON |
//! | POST | `/v1/segment` | multipart: `image` PNG | salient mask PNG |
//! | POST | `/v1/eval` | JSON `{"dataset", "config"?, "compare_baseline"?}` | 202 `{"job_id"}` |
//! | GET | `/v1/health` | | build and model hashes |
//!
//! `params` fields: `prompt`, `seed`, `w`, `steps`, `guidance`,
//! `num_variants`; all optional. Errors are `{"code", "message"}` with 400
//! for bad input, 401 for a missing or wrong bearer token, 404 for unknown
//! jobs, 409 for results that are not ready, 503 when the queue is full or a
//! model client is down.
//!
//! Generation runs on one worker in submission order. Results are stored
//! under the SHA-256 of the request, so a repeated request is served from
//! disk. Jobs live in memory unless `job_store_dir` is configured.

pub mod jobs;
pub mod results;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, Semaphore};

use outpaint_core::clients::{with_retry, MaskSegmenter};
use outpaint_core::config::{Clients, RunConfig, ServiceSection};
use outpaint_core::eval::{AdaptedGenerator, BaselineGenerator, EvalConfig, Generator};
use outpaint_core::expansion::measure_pair;
use outpaint_core::image::{BinaryMask, Image, MaskKind};
use outpaint_core::pipeline::{validate_request, ModelBundle, OutpaintParams, OutpaintRequest};
use outpaint_core::Error;

use jobs::{Job, JobKind, JobState, JobStore, ResultLocator};

/// Upload limit for multipart bodies.
pub const MAX_BODY_BYTES: usize = 64 << 20;

pub const BUILD_HASH: &str = env!("OUTPAINT_BUILD_HASH");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
        }
    }
}

impl From<&Error> for ApiError {
    fn from(e: &Error) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}

/// An error response.
pub struct Failure(StatusCode, ApiError);

impl Failure {
    fn bad(code: &str, message: impl Into<String>) -> Self {
        Failure(StatusCode::BAD_REQUEST, ApiError::new(code, message))
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

pub fn status_for(e: &Error) -> StatusCode {
    match e {
        Error::InvalidInput(_) | Error::Validation(_) | Error::Image(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
        Error::MetricUnavailable(_) | Error::PromptUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
        Error::Protocol(_) => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_for(&e), ApiError::from(&e))
    }
}

fn internal(e: impl std::fmt::Display) -> Failure {
    Failure(
        StatusCode::INTERNAL_SERVER_ERROR,
        ApiError::new("internal", e.to_string()),
    )
}

/// Work waiting for the generation worker.
enum Task {
    Outpaint { job_id: String, input: OutpaintInput },
    Eval { job_id: String, input: EvalInput },
}

#[derive(Clone)]
struct OutpaintInput {
    image: Image,
    mask: Option<BinaryMask>,
    params: OutpaintParams,
    baseline: bool,
    key: String,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvalInput {
    /// Manifest path on the service host.
    pub dataset: PathBuf,
    /// Protocol settings; the service configuration when absent.
    #[serde(default)]
    pub config: Option<EvalConfig>,
    /// Add a row for the frozen base.
    #[serde(default)]
    pub compare_baseline: bool,
}

pub struct AppState {
    pub service: ServiceSection,
    pub run: RunConfig,
    pub models: Arc<ModelBundle>,
    pub clients: Clients,
    pub jobs: Arc<JobStore>,
    queue: mpsc::Sender<Task>,
    metric_permits: Semaphore,
}

/// Wires models, clients and stores together and starts the generation
/// worker on the current runtime.
pub fn build_state(run: RunConfig, models: ModelBundle, clients: Clients) -> std::io::Result<Arc<AppState>> {
    let service = run.service.clone();
    std::fs::create_dir_all(&service.results_dir)?;
    let jobs = Arc::new(JobStore::open(service.job_store_dir.as_deref())?);
    let (tx, rx) = mpsc::channel(service.queue_capacity.max(1));
    let state = Arc::new(AppState {
        metric_permits: Semaphore::new(service.metric_workers.max(1)),
        service,
        run,
        models: Arc::new(models),
        clients,
        jobs,
        queue: tx,
    });
    tokio::spawn(worker(state.clone(), rx));
    Ok(state)
}

pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/v1/outpaint", post(submit_outpaint))
        .route("/v1/outpaint/baseline", post(submit_baseline))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/jobs/{id}/result", get(get_result))
        .route("/v1/metrics/expansion", post(expansion_metric))
        .route("/v1/segment", post(segment))
        .route("/v1/eval", post(submit_eval))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/v1/health", get(health))
        .merge(protected)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Loads models and clients from the configuration and serves until the
/// process is stopped.
pub async fn serve(run: RunConfig) -> std::io::Result<()> {
    let models = run.model.load_bundle().map_err(std::io::Error::other)?;
    let clients = run.clients.build().map_err(std::io::Error::other)?;
    let addr: SocketAddr = format!("{}:{}", run.service.host, run.service.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_on(listener, run, models, clients).await
}

pub async fn serve_on(
    listener: tokio::net::TcpListener,
    run: RunConfig,
    models: ModelBundle,
    clients: Clients,
) -> std::io::Result<()> {
    let state = build_state(run, models, clients)?;
    axum::serve(listener, router(state)).await
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.service.bearer_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return Failure(
                StatusCode::UNAUTHORIZED,
                ApiError::new("unauthorized", "missing or wrong bearer token"),
            )
            .into_response();
        }
    }
    next.run(req).await
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct Health {
    pub status: String,
    pub build_hash: String,
    pub base_hash: String,
    pub adapter_hash: Option<String>,
    pub jobs: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Result<Json<Health>, Failure> {
    Ok(Json(Health {
        status: "ok".into(),
        build_hash: BUILD_HASH.into(),
        base_hash: state.models.base_hash()?,
        adapter_hash: state.models.adapter_hash()?,
        jobs: state.jobs.len(),
    }))
}

/// Reads all multipart fields into `(name, bytes)` pairs.
async fn read_fields(mut mp: Multipart) -> Result<Vec<(String, Bytes)>, Failure> {
    let mut out = Vec::new();
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| Failure::bad("malformed_multipart", e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| Failure::bad("malformed_multipart", e.to_string()))?;
        out.push((name, bytes));
    }
    Ok(out)
}

fn take(fields: &mut Vec<(String, Bytes)>, name: &str) -> Option<Bytes> {
    fields.iter().position(|(n, _)| n == name).map(|i| fields.remove(i).1)
}

fn decode_png(bytes: &[u8], field: &str) -> Result<Image, Failure> {
    Image::from_png_bytes(bytes).map_err(|e| Failure::bad("invalid_image", format!("`{field}` is not a PNG: {e}")))
}

async fn submit_outpaint(State(state): State<Arc<AppState>>, mp: Multipart) -> Result<Response, Failure> {
    submit(state, mp, false).await
}

async fn submit_baseline(State(state): State<Arc<AppState>>, mp: Multipart) -> Result<Response, Failure> {
    submit(state, mp, true).await
}

async fn submit(state: Arc<AppState>, mp: Multipart, baseline: bool) -> Result<Response, Failure> {
    let mut fields = read_fields(mp).await?;
    let image_bytes = take(&mut fields, "image").ok_or_else(|| Failure::bad("missing_field", "`image` is required"))?;
    let image = decode_png(&image_bytes, "image")?;
    let mask = match take(&mut fields, "mask") {
        Some(b) => Some(
            BinaryMask::from_png_bytes(&b, MaskKind::Object)
                .map_err(|e| Failure::bad("invalid_mask", format!("`mask` is not a PNG: {e}")))?,
        ),
        None => None,
    };
    let params: OutpaintParams = match take(&mut fields, "params") {
        Some(b) => serde_json::from_slice(&b).map_err(|e| Failure::bad("invalid_params", e.to_string()))?,
        None => OutpaintParams::default(),
    };
    if let Some((name, _)) = fields.first() {
        return Err(Failure::bad(
            "unknown_field",
            format!("unexpected multipart field `{name}`"),
        ));
    }
    let probe = OutpaintRequest {
        object_mask: match &mask {
            Some(m) => m.clone(),
            None => BinaryMask::filled(image.height(), image.width(), false, MaskKind::Object)?,
        },
        object_image: image.clone(),
        params: params.clone(),
    };
    let models = if baseline {
        state.models.baseline()
    } else {
        (*state.models).clone()
    };
    validate_request(&probe, &models)?;
    if mask.is_none() && state.clients.sos.is_none() {
        return Err(Failure::bad(
            "missing_field",
            "`mask` is required: no salient segmenter is configured",
        ));
    }
    let key = results::outpaint_key(&image, mask.as_ref(), &params, &models)?;
    let request = serde_json::json!({
        "params": params,
        "baseline": baseline,
        "mask_source": if mask.is_some() { "upload" } else { "segmenter" },
        "width": image.width(),
        "height": image.height(),
        "request_hash": key,
    });
    let job = state.jobs.create(JobKind::Outpaint, request);
    let input = OutpaintInput {
        image,
        mask,
        params,
        baseline,
        key,
    };
    enqueue(
        &state,
        &job,
        Task::Outpaint {
            job_id: job.id.clone(),
            input,
        },
    )
}

fn enqueue(state: &AppState, job: &Job, task: Task) -> Result<Response, Failure> {
    match state.queue.try_send(task) {
        Ok(()) => Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": job.id }))).into_response()),
        Err(mpsc::error::TrySendError::Full(_)) => {
            state.jobs.remove(&job.id);
            Err(Failure(
                StatusCode::SERVICE_UNAVAILABLE,
                ApiError::new("queue_full", "too many queued jobs; retry later"),
            ))
        }
        Err(mpsc::error::TrySendError::Closed(_)) => {
            state.jobs.remove(&job.id);
            Err(internal("generation worker stopped"))
        }
    }
}

async fn submit_eval(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, Failure> {
    let input: EvalInput = serde_json::from_slice(&body).map_err(|e| Failure::bad("invalid_params", e.to_string()))?;
    let job = state
        .jobs
        .create(JobKind::Eval, serde_json::to_value(&input).map_err(internal)?);
    enqueue(
        &state,
        &job,
        Task::Eval {
            job_id: job.id.clone(),
            input,
        },
    )
}

fn not_found(id: &str) -> Failure {
    Failure(
        StatusCode::NOT_FOUND,
        ApiError::new("not_found", format!("no job `{id}`")),
    )
}

async fn get_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Job>, Failure> {
    state.jobs.get(&id).map(Json).ok_or_else(|| not_found(&id))
}

async fn get_result(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, Failure> {
    let job = state.jobs.get(&id).ok_or_else(|| not_found(&id))?;
    match (job.state, &job.result) {
        (JobState::Done, Some(loc)) => {
            let path = results::path_for(&state.service.results_dir, loc);
            let bytes = tokio::fs::read(&path).await.map_err(internal)?;
            let mut headers = HeaderMap::new();
            headers.insert(header::CONTENT_TYPE, loc.media_type.parse().map_err(internal)?);
            Ok((headers, bytes).into_response())
        }
        (JobState::Failed, _) => Err(Failure(
            StatusCode::CONFLICT,
            job.error.unwrap_or_else(|| ApiError::new("job_failed", "job failed")),
        )),
        _ => Err(Failure(
            StatusCode::CONFLICT,
            ApiError::new("not_ready", format!("job is {:?}", job.state)),
        )),
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> outpaint_core::Result<T> + Send + 'static,
) -> Result<T, Failure> {
    Ok(tokio::task::spawn_blocking(f).await.map_err(internal)??)
}

async fn expansion_metric(State(state): State<Arc<AppState>>, mp: Multipart) -> Result<Response, Failure> {
    let mut fields = read_fields(mp).await?;
    let input = take(&mut fields, "input").ok_or_else(|| Failure::bad("missing_field", "`input` is required"))?;
    let output =
        take(&mut fields, "outpainted").ok_or_else(|| Failure::bad("missing_field", "`outpainted` is required"))?;
    let seed: u64 = match take(&mut fields, "seed") {
        Some(b) => std::str::from_utf8(&b)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Failure::bad("invalid_params", "`seed` must be an unsigned integer"))?,
        None => 0,
    };
    let (input, output) = (decode_png(&input, "input")?, decode_png(&output, "outpainted")?);
    let (Some(sos), Some(seg)) = (state.clients.sos.clone(), state.clients.point_segmenter.clone()) else {
        return Err(Failure(
            StatusCode::SERVICE_UNAVAILABLE,
            ApiError::new(
                "metric_unavailable",
                "salient and point segmenters must both be configured",
            ),
        ));
    };
    let _permit = state.metric_permits.acquire().await.map_err(internal)?;
    let retry = state.clients.retry.clone();
    let report = blocking(move || measure_pair(&input, &output, sos.as_ref(), seg.as_ref(), seed, &retry)).await?;
    Ok(Json(report).into_response())
}

async fn segment(State(state): State<Arc<AppState>>, mp: Multipart) -> Result<Response, Failure> {
    let mut fields = read_fields(mp).await?;
    let image = take(&mut fields, "image").ok_or_else(|| Failure::bad("missing_field", "`image` is required"))?;
    let image = decode_png(&image, "image")?;
    let sos = state.clients.sos.clone().ok_or_else(|| {
        Failure(
            StatusCode::SERVICE_UNAVAILABLE,
            ApiError::new("metric_unavailable", "no salient segmenter configured"),
        )
    })?;
    let _permit = state.metric_permits.acquire().await.map_err(internal)?;
    let retry = state.clients.retry.clone();
    let png = blocking(move || {
        let soft = with_retry(&retry, "salient segmenter", || sos.segment(&image))?;
        soft.binarize(image.height(), image.width(), MaskKind::Object)?
            .to_png_bytes()
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn worker(state: Arc<AppState>, mut rx: mpsc::Receiver<Task>) {
    while let Some(task) = rx.recv().await {
        let (job_id, outcome) = match task {
            Task::Outpaint { job_id, input } => {
                if !state.jobs.transition(&job_id, JobState::Running, |_| {}) {
                    continue;
                }
                let st = state.clone();
                let out = tokio::task::spawn_blocking(move || run_outpaint(&st, &input)).await;
                (job_id, out)
            }
            Task::Eval { job_id, input } => {
                if !state.jobs.transition(&job_id, JobState::Running, |_| {}) {
                    continue;
                }
                let st = state.clone();
                let out = tokio::task::spawn_blocking(move || run_eval(&st, &input)).await;
                (job_id, out)
            }
        };
        match outcome {
            Ok(Ok(loc)) => {
                state.jobs.transition(&job_id, JobState::Done, |j| {
                    j.result = Some(ResultLocator {
                        url: format!("/v1/jobs/{}/result", j.id),
                        ..loc
                    })
                });
            }
            Ok(Err(e)) => {
                log::warn!("job {job_id} failed: {e}");
                state
                    .jobs
                    .transition(&job_id, JobState::Failed, |j| j.error = Some(ApiError::from(&e)));
            }
            Err(e) => {
                state.jobs.transition(&job_id, JobState::Failed, |j| {
                    j.error = Some(ApiError::new("internal", e.to_string()))
                });
            }
        }
    }
}

fn run_outpaint(state: &AppState, input: &OutpaintInput) -> outpaint_core::Result<ResultLocator> {
    let loc = results::locator(&input.key, results::ZIP);
    let path = results::path_for(&state.service.results_dir, &loc);
    if path.exists() {
        log::info!("serving stored result {}", input.key);
        return Ok(loc);
    }
    let zip = render_outpaint(
        &state.models,
        &state.clients,
        &input.image,
        input.mask.clone(),
        &input.params,
        input.baseline,
    )?;
    results::store(&path, &zip)?;
    Ok(loc)
}

/// Runs one outpaint request and packs the result archive. The service and
/// the CLI both go through here, so their outputs are byte-identical.
pub fn render_outpaint(
    models: &ModelBundle,
    clients: &Clients,
    image: &Image,
    mask: Option<BinaryMask>,
    params: &OutpaintParams,
    baseline: bool,
) -> outpaint_core::Result<Vec<u8>> {
    let mask = match mask {
        Some(m) => m,
        None => {
            let sos = clients
                .sos
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("no salient segmenter".into()))?;
            with_retry(&clients.retry, "salient segmenter", || sos.segment(image))?.binarize(
                image.height(),
                image.width(),
                MaskKind::Object,
            )?
        }
    };
    let req = OutpaintRequest::from_photo(image, mask, params.clone())?;
    let models = if baseline { models.baseline() } else { models.clone() };
    let variants = outpaint_core::pipeline::outpaint(&req, &models)?;
    let scores: Vec<_> = variants
        .iter()
        .enumerate()
        .map(|(i, v)| match &clients.point_segmenter {
            Some(seg) => {
                let sos = MaskSegmenter(req.object_mask.clone());
                let seed = req.params.seed.wrapping_add(i as u64);
                measure_pair(&req.object_image, v, &sos, seg.as_ref(), seed, &clients.retry).map(|r| r.e)
            }
            None => Err(Error::MetricUnavailable("no point segmenter configured".into())),
        })
        .collect();
    results::outpaint_archive(&req, &variants, &scores)
}

fn run_eval(state: &AppState, input: &EvalInput) -> outpaint_core::Result<ResultLocator> {
    let mut run = state.run.clone();
    if let Some(c) = &input.config {
        run.eval = c.clone();
    }
    let key = results::eval_key(input, &run.eval, &state.models)?;
    let loc = results::locator(&key, results::JSON);
    let path = results::path_for(&state.service.results_dir, &loc);
    if path.exists() {
        return Ok(loc);
    }
    let adapted = AdaptedGenerator(&state.models);
    let base = BaselineGenerator(&state.models);
    let mut generators: Vec<&dyn Generator> = vec![&adapted];
    if input.compare_baseline && state.models.adapter.is_some() {
        generators.push(&base);
    }
    let report = outpaint_core::workflow::run_evaluation(&run, &input.dataset, &generators)?;
    results::store(&path, report.to_json()?.as_bytes())?;
    Ok(loc)
}

/// Result file path for tests and tools.
pub fn result_path(results_dir: &Path, loc: &ResultLocator) -> PathBuf {
    results::path_for(results_dir, loc)
}
