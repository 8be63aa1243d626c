//! JSON service under `/api/v1/` for the review UI.
//!
//! Every handler calls the same operation as the matching CLI command.
//! Successful responses are `{"head": ..., "data": ...}`, where `head` is the
//! experiment's MANIFEST digest after the call. Mutations accept an optional
//! `expected_head`; if the experiment moved on since then, or another writer
//! holds the lock, the answer is 409.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rubric_loop_core::active::ErrorTag;
use rubric_loop_core::digest::Digest;
use rubric_loop_core::irr::ConsensusRecord;
use rubric_loop_core::storage::{Experiment, RecordKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::ops::{al, envelope, irr, pipeline, BackendChoice, Exit, OpsError};

#[derive(Debug, Clone)]
pub struct ServiceState {
    pub home: PathBuf,
    /// Backend used by scoring and validation requests that name none.
    pub backend: Option<BackendChoice>,
}

pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl From<OpsError> for ApiError {
    fn from(e: OpsError) -> Self {
        let exit = e.exit();
        let status = if e.is_not_found() {
            StatusCode::NOT_FOUND
        } else {
            match exit {
                Exit::Lock => StatusCode::CONFLICT,
                Exit::Gateway => StatusCode::BAD_GATEWAY,
                Exit::Internal => StatusCode::INTERNAL_SERVER_ERROR,
                _ => StatusCode::UNPROCESSABLE_ENTITY,
            }
        };
        Self {
            status,
            body: json!({
                "error": {
                    "module": e.module(),
                    "code": e.code(),
                    "message": e.to_string(),
                    "exit_code": exit.code(),
                }
            }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn bad_request(msg: String) -> ApiError {
    ApiError {
        status: StatusCode::BAD_REQUEST,
        body: json!({
            "error": {"module": "service_cli", "code": "bad_request", "message": msg, "exit_code": Exit::Validation.code()}
        }),
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let body: &[u8] = if body.is_empty() { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| bad_request(format!("invalid request body: {e}")))
}

fn ok<T: Serialize>(exp: &Experiment, data: T) -> ApiResult {
    Ok(Json(envelope(exp, data)?).into_response())
}

/// Runs a synchronous operation off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, OpsError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(OpsError::Io {
            path: "service".into(),
            reason: e.to_string(),
        }
        .into()),
    }
}

fn open(state: &ServiceState, id: &str) -> Result<Experiment, ApiError> {
    Ok(Experiment::open(&state.home, id).map_err(OpsError::from)?)
}

/// Request body of a mutation: the payload plus the head it was based on.
#[derive(Debug, Deserialize)]
struct Mutation<T> {
    #[serde(default)]
    expected_head: Option<Digest>,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Default, Deserialize)]
struct Empty {}

type St = State<Arc<ServiceState>>;

pub fn router(state: ServiceState) -> Router {
    Router::new()
        .route("/api/v1/experiments", get(list_experiments).post(create_experiment))
        .route("/api/v1/experiments/:id", get(experiment))
        .route("/api/v1/experiments/:id/split", post(split))
        .route("/api/v1/experiments/:id/irr", get(irr_view))
        .route("/api/v1/experiments/:id/irr/disagreements", get(irr_disagreements))
        .route("/api/v1/experiments/:id/irr/rounds", post(irr_compute))
        .route("/api/v1/experiments/:id/irr/consensus", post(irr_consensus))
        .route("/api/v1/experiments/:id/irr/advance", post(irr_advance))
        .route("/api/v1/experiments/:id/prompts", post(prompt_build))
        .route("/api/v1/experiments/:id/runs", post(score))
        .route("/api/v1/experiments/:id/runs/:run/evaluation", get(evaluation))
        .route("/api/v1/experiments/:id/report", get(report))
        .route("/api/v1/experiments/:id/al", get(al_status).post(al_init))
        .route("/api/v1/experiments/:id/al/iterations/:n", get(al_iteration))
        .route("/api/v1/experiments/:id/al/candidates", get(al_candidates))
        .route("/api/v1/experiments/:id/al/validate", post(al_validate))
        .route("/api/v1/experiments/:id/al/tags", post(al_tags))
        .route("/api/v1/experiments/:id/al/select", post(al_select))
        .route("/api/v1/experiments/:id/al/advance", post(al_advance))
        .route("/api/v1/experiments/:id/al/revert", post(al_revert))
        .with_state(Arc::new(state))
}

pub async fn serve(addr: SocketAddr, state: ServiceState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "serving /api/v1/");
    axum::serve(listener, router(state)).await
}

async fn list_experiments(State(s): St) -> ApiResult {
    let dir = s.home.join("experiment");
    let mut ids: Vec<String> = match std::fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("config.toml").is_file())
            .filter_map(|e| e.file_name().to_str().map(str::to_string))
            .collect(),
        Err(_) => Vec::new(),
    };
    ids.sort();
    Ok(Json(json!({ "data": ids })).into_response())
}

async fn create_experiment(State(s): St, body: Bytes) -> ApiResult {
    let req: pipeline::InitRequest = parse(&body)?;
    let home = s.home.clone();
    let done = blocking(move || pipeline::init(&home, req)).await?;
    let exp = open(&s, &done.id)?;
    ok(&exp, done)
}

#[derive(Serialize)]
struct ExperimentView {
    id: String,
    seed: u64,
    train_ratio: f64,
    irr_fraction: f64,
    question_id: String,
    subscores: Vec<String>,
    records: BTreeMap<&'static str, usize>,
    manifest: Vec<rubric_loop_core::storage::ManifestEntry>,
}

async fn experiment(State(s): St, Path(id): Path<String>) -> ApiResult {
    let exp = open(&s, &id)?;
    let config = exp.config().map_err(OpsError::from)?;
    let manifest = exp.manifest().map_err(OpsError::from)?;
    let mut records = BTreeMap::new();
    for kind in RecordKind::ALL {
        records.insert(kind.name(), manifest.iter().filter(|e| e.kind == kind).count());
    }
    ok(
        &exp,
        ExperimentView {
            id: exp.id().to_string(),
            seed: config.seed,
            train_ratio: config.train_ratio,
            irr_fraction: config.irr_fraction,
            question_id: config.rubric.question_id.clone(),
            subscores: config.rubric.subscore_names().map(str::to_string).collect(),
            records,
            manifest,
        },
    )
}

#[derive(Debug, Default, Deserialize)]
struct SplitBody {
    #[serde(default)]
    ratio: Option<f64>,
    #[serde(default)]
    seed: Option<u64>,
}

async fn split(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<SplitBody> = parse(&body)?;
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || pipeline::split(&e, m.body.ratio, m.body.seed, m.expected_head.as_ref())).await?;
    ok(&exp, done)
}

async fn irr_view(State(s): St, Path(id): Path<String>) -> ApiResult {
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let view = blocking(move || irr::view(&e)).await?;
    ok(&exp, view)
}

#[derive(Serialize)]
struct DisagreementView {
    response_id: String,
    subscore: String,
    rater_a: u8,
    rater_b: u8,
    consensus: Option<ConsensusRecord>,
    status: &'static str,
}

async fn irr_disagreements(State(s): St, Path(id): Path<String>) -> ApiResult {
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let view = blocking(move || irr::view(&e)).await?;
    let rows: Vec<DisagreementView> = view
        .round
        .disagreements
        .iter()
        .map(|d| {
            let consensus = view
                .consensus
                .iter()
                .find(|c| c.response_id == d.response_id && c.subscore == d.subscore)
                .cloned();
            DisagreementView {
                response_id: d.response_id.clone(),
                subscore: d.subscore.clone(),
                rater_a: d.rater_a,
                rater_b: d.rater_b,
                status: if consensus.is_some() { "resolved" } else { "pending" },
                consensus,
            }
        })
        .collect();
    ok(&exp, rows)
}

#[derive(Debug, Deserialize)]
struct RoundBody {
    rater_a: irr::RaterSheet,
    rater_b: irr::RaterSheet,
    #[serde(default)]
    threshold: Option<f64>,
}

async fn irr_compute(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<RoundBody> = parse(&body)?;
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || {
        irr::compute(&e, m.body.rater_a, m.body.rater_b, m.body.threshold, m.expected_head.as_ref())
    })
    .await?;
    ok(&exp, done)
}

#[derive(Debug, Deserialize)]
struct ConsensusBody {
    records: Vec<ConsensusRecord>,
}

async fn irr_consensus(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<ConsensusBody> = parse(&body)?;
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let view = blocking(move || irr::submit_consensus(&e, m.body.records, m.expected_head.as_ref())).await?;
    ok(&exp, view)
}

#[derive(Debug, Default, Deserialize)]
struct AdvanceBody {
    #[serde(default)]
    drafts: BTreeMap<String, BTreeMap<String, String>>,
}

async fn irr_advance(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<AdvanceBody> = parse(&body)?;
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || irr::advance(&e, m.body.drafts, m.expected_head.as_ref())).await?;
    ok(&exp, done)
}

async fn prompt_build(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<pipeline::BuildRequest> = parse(&body)?;
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || pipeline::build_prompt(&e, m.body, m.expected_head.as_ref())).await?;
    ok(&exp, done)
}

#[derive(Debug, Deserialize)]
struct ScoreBody {
    prompt: String,
    target: pipeline::Target,
    #[serde(default)]
    backend: Option<BackendChoice>,
    #[serde(default)]
    resume: bool,
}

fn backend_for(s: &ServiceState, exp: &Experiment, requested: Option<BackendChoice>) -> Result<BackendChoice, ApiError> {
    match requested.or_else(|| s.backend.clone()) {
        Some(b) => Ok(b),
        None => Ok(BackendChoice::configured(&exp.config().map_err(OpsError::from)?)),
    }
}

async fn score(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<ScoreBody> = parse(&body)?;
    let exp = open(&s, &id)?;
    let backend = backend_for(&s, &exp, m.body.backend)?;
    let req = pipeline::ScoreRequest {
        prompt: m.body.prompt,
        target: m.body.target,
        backend,
        resume: m.body.resume,
    };
    let done = pipeline::score(&exp, req, m.expected_head.as_ref()).await?;
    ok(&exp, done)
}

async fn evaluation(State(s): St, Path((id, run)): Path<(String, String)>) -> ApiResult {
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || pipeline::evaluate(&e, &run)).await?;
    ok(&exp, done)
}

async fn report(State(s): St, Path(id): Path<String>) -> ApiResult {
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || pipeline::report(&e)).await?;
    ok(&exp, done)
}

async fn al_status(State(s): St, Path(id): Path<String>) -> ApiResult {
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || al::status(&e)).await?;
    ok(&exp, done)
}

async fn al_init(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<al::InitRequest> = parse(&body)?;
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || al::init(&e, m.body, m.expected_head.as_ref())).await?;
    ok(&exp, done)
}

async fn al_iteration(State(s): St, Path((id, n)): Path<(String, u32)>) -> ApiResult {
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || al::iteration(&e, n)).await?;
    ok(&exp, done)
}

async fn al_candidates(State(s): St, Path(id): Path<String>) -> ApiResult {
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || al::candidates(&e)).await?;
    ok(&exp, done)
}

#[derive(Debug, Default, Deserialize)]
struct ValidateBody {
    #[serde(default)]
    backend: Option<BackendChoice>,
}

async fn al_validate(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<ValidateBody> = parse(&body)?;
    let exp = open(&s, &id)?;
    let backend = backend_for(&s, &exp, m.body.backend)?;
    let done = al::validate(&exp, &backend, m.expected_head.as_ref()).await?;
    ok(&exp, done)
}

#[derive(Debug, Deserialize)]
struct TagsBody {
    tags: Vec<ErrorTag>,
}

async fn al_tags(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<TagsBody> = parse(&body)?;
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || al::tag(&e, m.body.tags, m.expected_head.as_ref())).await?;
    ok(&exp, done)
}

async fn al_select(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<Empty> = parse(&body)?;
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || al::select(&e, m.expected_head.as_ref())).await?;
    ok(&exp, done)
}

async fn al_advance(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<al::AcceptRequest> = parse(&body)?;
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || al::accept(&e, m.body, m.expected_head.as_ref())).await?;
    ok(&exp, done)
}

#[derive(Debug, Default, Deserialize)]
struct RevertBody {
    #[serde(default)]
    to: Option<u32>,
}

async fn al_revert(State(s): St, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let m: Mutation<RevertBody> = parse(&body)?;
    let exp = open(&s, &id)?;
    let e = exp.clone();
    let done = blocking(move || al::revert(&e, m.body.to, m.expected_head.as_ref())).await?;
    ok(&exp, done)
}

