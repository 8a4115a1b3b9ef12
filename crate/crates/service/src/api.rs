//! HTTP routes. Bodies are JSON; errors are `{error, message, field?, record_ids?}`.

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Utc};
use etongue_core::{preprocess, ForestError, MeasurementRecord, Prediction};
use futures::Stream;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::live::{LiveStreamMessage, Session, StartAcquisition, StartError, StreamEnd};
use crate::registry::{Begin, ModelStatus, TrainRequest, TrainingError, TrainingJob};
use crate::store::{IngestOutcome, StoreError, StoredRecord};
use crate::AppState;

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_ids: Option<Vec<Uuid>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: error.into(),
                message: message.into(),
                field: None,
                record_ids: None,
            },
        }
    }

    fn field(mut self, field: impl Into<String>) -> Self {
        self.body.field = Some(field.into());
        self
    }

    fn records(mut self, ids: Vec<Uuid>) -> Self {
        self.body.record_ids = Some(ids);
        self
    }

    fn bad_request(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message).field(field)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, reporting the path of the first offending field.
fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = e.inner().to_string();
        let field = if path == "." { String::new() } else { path };
        ApiError::bad_request(field, message)
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker task failed: {e}")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/measurements", post(ingest).get(list_measurements))
        .route("/v1/measurements/{id}", get(get_measurement))
        .route("/v1/models", get(list_models))
        .route("/v1/models:train", post(train_model))
        .route("/v1/models/{key}", get(get_model).post(model_action))
        .route("/v1/scenarios", get(list_scenarios))
        .route("/v1/acquisitions", post(start_acquisition))
        .route(
            "/v1/acquisitions/{id}",
            get(acquisition_status).delete(stop_acquisition),
        )
        .route("/v1/stream", get(stream))
        .with_state(state)
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    records: usize,
    models: usize,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok",
        records: state.store.len(),
        models: state.registry.list().len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestResponse {
    pub record_id: Uuid,
    pub duplicate: bool,
}

async fn ingest(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let record: MeasurementRecord = parse_json(&body)?;
    record.validate().map_err(|e| {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_record", e.to_string()).field(e.field)
    })?;
    let id = record.record_id;
    let store = state.store.clone();
    match blocking(move || store.ingest(record, Utc::now())).await? {
        Ok(outcome) => {
            let duplicate = outcome == IngestOutcome::Duplicate;
            let status = if duplicate {
                StatusCode::OK
            } else {
                StatusCode::CREATED
            };
            Ok((
                status,
                Json(IngestResponse {
                    record_id: id,
                    duplicate,
                }),
            )
                .into_response())
        }
        Err(StoreError::Conflict(id)) => Err(ApiError::new(
            StatusCode::CONFLICT,
            "conflict",
            format!("record {id} already stored with different content"),
        )
        .records(vec![id])),
        Err(e) => Err(ApiError::internal(e.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub record_id: Uuid,
    pub device_id: String,
    pub label: Option<String>,
    pub started_at: DateTime<Utc>,
    pub received_at: DateTime<Utc>,
    pub frame_count: usize,
    pub immersion_index: u32,
}

impl From<&StoredRecord> for RecordSummary {
    fn from(s: &StoredRecord) -> Self {
        Self {
            record_id: s.record.record_id,
            device_id: s.record.device_id.clone(),
            label: s.record.label.clone(),
            started_at: s.record.started_at,
            received_at: s.received_at,
            frame_count: s.record.frames.len(),
            immersion_index: s.record.immersion_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPage {
    pub items: Vec<RecordSummary>,
    pub next_page_token: Option<String>,
}

fn encode_token(position: usize) -> String {
    URL_SAFE_NO_PAD.encode(format!("p{position}"))
}

fn decode_token(token: &str) -> Option<usize> {
    let bytes = URL_SAFE_NO_PAD.decode(token).ok()?;
    std::str::from_utf8(&bytes).ok()?.strip_prefix('p')?.parse().ok()
}

async fn list_measurements(
    State(state): State<AppState>,
    Query(params): Query<HashMap<String, String>>,
) -> ApiResult<Json<MeasurementPage>> {
    let mut label = None;
    let mut device = None;
    let mut since: Option<DateTime<Utc>> = None;
    let mut page_size = DEFAULT_PAGE_SIZE;
    let mut start = 0usize;
    for (key, value) in &params {
        match key.as_str() {
            "label" => label = Some(value.clone()),
            "device" => device = Some(value.clone()),
            "since" => {
                since = Some(
                    DateTime::parse_from_rfc3339(value)
                        .map_err(|e| {
                            ApiError::bad_request("since", format!("not an RFC 3339 timestamp: {e}"))
                        })?
                        .with_timezone(&Utc),
                )
            }
            "page_size" => {
                page_size = value
                    .parse()
                    .ok()
                    .filter(|n| (1..=MAX_PAGE_SIZE).contains(n))
                    .ok_or_else(|| {
                        ApiError::bad_request(
                            "page_size",
                            format!("must be an integer in 1..={MAX_PAGE_SIZE}"),
                        )
                    })?
            }
            "page_token" => {
                start = decode_token(value)
                    .ok_or_else(|| ApiError::bad_request("page_token", "malformed page token"))?
            }
            other => return Err(ApiError::bad_request(other, "unknown query parameter")),
        }
    }

    let all = state.store.all();
    let matches = |s: &StoredRecord| {
        label.as_ref().is_none_or(|l| s.record.label.as_ref() == Some(l))
            && device.as_ref().is_none_or(|d| &s.record.device_id == d)
            && since.is_none_or(|t| s.received_at >= t)
    };
    let mut items = Vec::with_capacity(page_size);
    let mut next_page_token = None;
    for (pos, s) in all.iter().enumerate().skip(start) {
        if !matches(s) {
            continue;
        }
        if items.len() == page_size {
            next_page_token = Some(encode_token(pos));
            break;
        }
        items.push(RecordSummary::from(s.as_ref()));
    }
    Ok(Json(MeasurementPage {
        items,
        next_page_token,
    }))
}

fn parse_uuid(field: &str, s: &str) -> ApiResult<Uuid> {
    Uuid::parse_str(s).map_err(|e| ApiError::bad_request(field, format!("not a UUID: {e}")))
}

async fn get_measurement(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<MeasurementRecord>> {
    let id = parse_uuid("id", &id)?;
    state
        .store
        .get(&id)
        .map(|s| Json(s.record.clone()))
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "not_found",
                format!("record {id} not found"),
            )
        })
}

fn training_error(e: TrainingError) -> ApiError {
    let unprocessable = StatusCode::UNPROCESSABLE_ENTITY;
    match &e {
        TrainingError::InsufficientClasses { .. } => {
            ApiError::new(unprocessable, "insufficient_classes", e.to_string())
        }
        TrainingError::DimensionMismatch { record_ids, .. } => {
            let ids = record_ids.clone();
            ApiError::new(unprocessable, "dimension_mismatch", e.to_string()).records(ids)
        }
        TrainingError::DegenerateFold { record_id, .. } => {
            let id = *record_id;
            ApiError::new(unprocessable, "degenerate_fold", e.to_string()).records(vec![id])
        }
        TrainingError::Preprocess(_) => ApiError::new(unprocessable, "preprocess_failed", e.to_string()),
        TrainingError::Forest(ForestError::InvalidHyperparams(_)) => {
            ApiError::bad_request("hyperparams", e.to_string())
        }
        TrainingError::Forest(_) => ApiError::new(unprocessable, "training_rejected", e.to_string()),
    }
}

async fn train_model(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let request: TrainRequest = if body.iter().all(u8::is_ascii_whitespace) {
        TrainRequest::default()
    } else {
        parse_json(&body)?
    };
    let records = state.store.all();
    let job = blocking(move || TrainingJob::prepare(&records, &request))
        .await?
        .map_err(training_error)?;
    let location = format!("/v1/models/{}", job.model_id);
    let begin = state
        .registry
        .begin(&job, Utc::now())
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let (status, descriptor) = match begin {
        Begin::Existing(d) => (StatusCode::OK, d),
        Begin::Started(d) => {
            let registry = state.registry.clone();
            tokio::task::spawn_blocking(move || {
                let outcome = job.run().map_err(|e| e.to_string());
                if let Err(e) = registry.complete(&job.model_id, outcome, Utc::now()) {
                    log::error!("model {}: {e}", job.model_id);
                }
            });
            (StatusCode::ACCEPTED, d)
        }
    };
    Ok((status, [(header::LOCATION, location)], Json(descriptor)).into_response())
}

#[derive(Serialize)]
struct ModelList {
    models: Vec<crate::registry::ModelDescriptor>,
}

async fn list_models(State(state): State<AppState>) -> Json<ModelList> {
    Json(ModelList {
        models: state.registry.list(),
    })
}

fn unknown_model(id: &str) -> ApiError {
    ApiError::new(
        StatusCode::NOT_FOUND,
        "not_found",
        format!("model {id} not found"),
    )
}

async fn get_model(State(state): State<AppState>, Path(key): Path<String>) -> ApiResult<Response> {
    state
        .registry
        .descriptor(&key)
        .map(|d| Json(d).into_response())
        .ok_or_else(|| unknown_model(&key))
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    #[serde(default)]
    pub record_id: Option<Uuid>,
    #[serde(default)]
    pub record: Option<MeasurementRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub record_id: Uuid,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub record_id: Uuid,
    pub model_id: String,
    pub likelihoods: std::collections::BTreeMap<String, f64>,
    pub top_class: String,
    pub confidence: f64,
    /// One entry per training record, in training order.
    pub similarities: Vec<Similarity>,
    /// Server-side preprocess + predict + proximity time.
    pub latency_ms: f64,
}

/// `POST /v1/models/{id}:infer`. Other `{key}` suffixes are unknown routes.
async fn model_action(
    State(state): State<AppState>,
    Path(key): Path<String>,
    body: Bytes,
) -> ApiResult<Json<ClassificationResult>> {
    let Some(model_id) = key.strip_suffix(":infer") else {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("no action at /v1/models/{key}"),
        ));
    };
    let request: InferRequest = parse_json(&body)?;
    let (descriptor, model) = state
        .registry
        .model(model_id)
        .ok_or_else(|| unknown_model(model_id))?;
    let Some(model) = model else {
        let reason = match descriptor.status {
            ModelStatus::Training => "is still training".to_string(),
            _ => format!("failed: {}", descriptor.error.unwrap_or_default()),
        };
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "model_not_ready",
            format!("model {model_id} {reason}"),
        ));
    };
    let record = match (request.record_id, request.record) {
        (Some(id), None) => state.store.get(&id).map(|s| s.record.clone()).ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "record_not_found",
                format!("record {id} not found"),
            )
            .field("record_id")
        })?,
        (None, Some(r)) => {
            r.validate().map_err(|e| {
                ApiError::new(StatusCode::BAD_REQUEST, "invalid_record", e.to_string())
                    .field(format!("record.{}", e.field))
            })?;
            r
        }
        _ => {
            return Err(ApiError::bad_request(
                "",
                "exactly one of record_id or record is required",
            ))
        }
    };
    let model_id = model_id.to_string();
    blocking(move || classify(&model_id, &model, &record))
        .await?
        .map(Json)
}

fn classify(
    model_id: &str,
    model: &etongue_core::ForestModel,
    record: &MeasurementRecord,
) -> ApiResult<ClassificationResult> {
    let started = Instant::now();
    let unprocessable = |code: &str, msg: String| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, msg).records(vec![record.record_id])
    };
    let x = preprocess(record).map_err(|e| unprocessable("preprocess_failed", e.to_string()))?;
    let Prediction {
        likelihoods,
        top_class,
        confidence,
    } = model
        .predict_proba(&x)
        .map_err(|e| unprocessable("dimension_mismatch", e.to_string()))?;
    let similarities = model
        .training_similarities(&x)
        .map_err(|e| unprocessable("dimension_mismatch", e.to_string()))?
        .into_iter()
        .map(|(record_id, similarity)| Similarity {
            record_id,
            similarity,
        })
        .collect();
    Ok(ClassificationResult {
        record_id: record.record_id,
        model_id: model_id.to_string(),
        likelihoods,
        top_class,
        confidence,
        similarities,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

#[derive(Serialize)]
struct ScenarioSummary {
    name: String,
    description: Option<String>,
    replicates: u32,
    baseline_duration: f64,
    sample_duration: f64,
}

#[derive(Serialize)]
struct PackSummary {
    name: String,
    scenarios: Vec<ScenarioSummary>,
}

async fn list_scenarios(State(state): State<AppState>) -> Json<Vec<PackSummary>> {
    Json(
        state
            .live
            .packs()
            .iter()
            .map(|p| PackSummary {
                name: p.name.clone(),
                scenarios: p
                    .scenarios
                    .iter()
                    .map(|s| ScenarioSummary {
                        name: s.name.clone(),
                        description: s.description.clone(),
                        replicates: s.replicates,
                        baseline_duration: s.baseline_duration,
                        sample_duration: s.sample_duration,
                    })
                    .collect(),
            })
            .collect(),
    )
}

async fn start_acquisition(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let request: StartAcquisition = parse_json(&body)?;
    let session = state
        .live
        .start(request, state.store.clone())
        .map_err(|e| match e {
            StartError::UnknownScenario(_) | StartError::UnknownPack(_) => {
                ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string())
            }
            StartError::Invalid { field, reason } => ApiError::bad_request(field, reason),
        })?;
    let location = format!("/v1/acquisitions/{}", session.id());
    Ok((
        StatusCode::ACCEPTED,
        [(header::LOCATION, location)],
        Json(session.status()),
    )
        .into_response())
}

fn unknown_acquisition(id: Uuid) -> ApiError {
    ApiError::new(
        StatusCode::NOT_FOUND,
        "not_found",
        format!("acquisition {id} not found"),
    )
}

async fn acquisition_status(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let id = parse_uuid("id", &id)?;
    let session = state.live.session(&id).ok_or_else(|| unknown_acquisition(id))?;
    Ok(Json(session.status()).into_response())
}

async fn stop_acquisition(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let id = parse_uuid("id", &id)?;
    match state.live.stop(&id) {
        None => Err(unknown_acquisition(id)),
        Some(false) => Err(ApiError::new(
            StatusCode::CONFLICT,
            "not_running",
            format!("acquisition {id} has already ended"),
        )),
        Some(true) => {
            let session = state.live.session(&id).expect("session exists");
            Ok((StatusCode::ACCEPTED, Json(session.status())).into_response())
        }
    }
}

fn frame_event(msg: &LiveStreamMessage) -> Event {
    Event::default()
        .event("frame")
        .id(msg.frame.seq.to_string())
        .json_data(msg)
        .expect("message serializes")
}

fn end_event(end: &StreamEnd) -> Event {
    Event::default()
        .event("end")
        .json_data(end)
        .expect("end serializes")
}

enum Source {
    Live {
        session: Arc<Session>,
        rx: tokio::sync::watch::Receiver<u64>,
    },
    Replay {
        messages: Vec<LiveStreamMessage>,
        end: StreamEnd,
    },
}

struct Cursor {
    source: Source,
    next: usize,
    pending: std::collections::VecDeque<Event>,
    done: bool,
}

/// `GET /v1/stream?record_id=&after_seq=`. Frames of a running acquisition
/// are pushed as they arrive; a finished or stored record is replayed.
async fn stream(
    State(state): State<AppState>,
    Query(params): Query<HashMap<String, String>>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let mut record_id = None;
    let mut after: Option<u32> = None;
    for (key, value) in &params {
        match key.as_str() {
            "record_id" => record_id = Some(parse_uuid("record_id", value)?),
            "after_seq" => {
                after = Some(
                    value
                        .parse()
                        .map_err(|_| ApiError::bad_request("after_seq", "must be a non-negative integer"))?,
                )
            }
            other => return Err(ApiError::bad_request(other, "unknown query parameter")),
        }
    }
    let record_id = record_id.ok_or_else(|| ApiError::bad_request("record_id", "required"))?;
    if after.is_none() {
        if let Some(v) = headers.get("last-event-id") {
            after = Some(
                v.to_str()
                    .ok()
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| ApiError::bad_request("Last-Event-ID", "must be a frame seq"))?,
            );
        }
    }
    let next = after.map_or(0, |s| s as usize + 1);

    let source = if let Some(session) = state.live.session(&record_id) {
        let rx = session.subscribe();
        Source::Live { session, rx }
    } else if let Some(stored) = state.store.get(&record_id) {
        let messages = LiveStreamMessage::from_record(&stored.record);
        Source::Replay {
            end: StreamEnd {
                record_id,
                status: crate::live::AcquisitionState::Completed,
                frames: messages.len() as u32,
            },
            messages,
        }
    } else {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("no acquisition or record {record_id}"),
        ));
    };

    let cursor = Cursor {
        source,
        next,
        pending: Default::default(),
        done: false,
    };
    let events = futures::stream::unfold(cursor, |mut c| async move {
        loop {
            if let Some(ev) = c.pending.pop_front() {
                return Some((Ok(ev), c));
            }
            if c.done {
                return None;
            }
            match &mut c.source {
                Source::Replay { messages, end } => {
                    c.pending
                        .extend(messages.get(c.next..).unwrap_or_default().iter().map(frame_event));
                    c.pending.push_back(end_event(end));
                    c.done = true;
                }
                Source::Live { session, rx } => {
                    // Mark the version seen before reading so no update slips between.
                    rx.borrow_and_update();
                    let (msgs, end) = session.read_from(c.next);
                    c.next += msgs.len();
                    c.pending.extend(msgs.iter().map(frame_event));
                    if let Some(end) = end {
                        c.pending.push_back(end_event(&end));
                        c.done = true;
                    } else if c.pending.is_empty() && rx.changed().await.is_err() {
                        c.done = true;
                    }
                }
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}
