//! HTTP API.
//!
//! | route                     | purpose                                   |
//! |---------------------------|-------------------------------------------|
//! | `GET /api/status`         | uptime, frames, config version, last event |
//! | `GET /api/config`         | current config snapshot                    |
//! | `PUT /api/config`         | replace the config; 422 with field errors  |
//! | `GET /api/events`         | events with `from <= ts < to`              |
//! | `GET /api/calendar`       | per-day totals for `month=YYYY-MM`         |
//! | `GET /api/images/{id}`    | stored image bytes                         |
//! | `GET /api/warnings`       | warnings after `cursor`                    |
//! | `POST /api/capture`       | process the next scenario frame            |

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;
use trapsight::detector::{DetectionConfig, FieldError};
use trapsight::simulator::TrapScenario;
use trapsight::store::{EventRecord, FsStore, StoreError, TrapStore, YearMonth};

use crate::config::{ConfigCell, ConfigSnapshot};
use crate::feed::{FeedWarning, WarningFeed};
use crate::pipeline::{Pipeline, Processed};

/// Frame source behind `POST /api/capture`.
pub struct CaptureSource {
    pipeline: Pipeline,
    scenario: Option<TrapScenario>,
    next_frame: usize,
}

impl CaptureSource {
    pub fn new(pipeline: Pipeline, scenario: Option<TrapScenario>) -> Self {
        Self {
            pipeline,
            scenario,
            next_frame: 0,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<FsStore>,
    pub config: Arc<ConfigCell>,
    pub warnings: Arc<WarningFeed>,
    capture: Arc<Mutex<CaptureSource>>,
    frames_processed: Arc<AtomicU64>,
    started: Instant,
}

impl AppState {
    pub fn new(
        store: Arc<FsStore>,
        config: Arc<ConfigCell>,
        warnings: Arc<WarningFeed>,
        capture: CaptureSource,
    ) -> Self {
        Self {
            store,
            config,
            warnings,
            capture: Arc::new(Mutex::new(capture)),
            frames_processed: Arc::new(AtomicU64::new(0)),
            started: Instant::now(),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/config", get(get_config).put(put_config))
        .route("/api/events", get(events))
        .route("/api/calendar", get(calendar))
        .route("/api/images/{id}", get(image))
        .route("/api/warnings", get(warnings))
        .route("/api/capture", post(capture))
        .with_state(state)
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotFound(String),
    Conflict(String),
    Invalid(Vec<FieldError>),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, json!({ "error": m })),
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, json!({ "error": m })),
            ApiError::Invalid(fields) => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": "invalid configuration", "fields": fields }),
            ),
            ApiError::Internal(m) => {
                tracing::error!(error = %m, "request failed");
                (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": m }))
            }
        };
        (status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Range { .. } | StoreError::Month(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StatusDoc {
    pub uptime_s: f64,
    pub frames_processed: u64,
    pub config_version: u64,
    pub events_stored: usize,
    pub warnings: u64,
    pub last_event: Option<EventRecord>,
}

async fn status(State(st): State<AppState>) -> Json<StatusDoc> {
    Json(StatusDoc {
        uptime_s: st.started.elapsed().as_secs_f64(),
        frames_processed: st.frames_processed.load(Ordering::SeqCst),
        config_version: st.config.load().version,
        events_stored: st.store.event_count(),
        warnings: st.warnings.head(),
        last_event: st.store.last_event(),
    })
}

async fn get_config(State(st): State<AppState>) -> Json<ConfigSnapshot> {
    Json((*st.config.load()).clone())
}

async fn put_config(State(st): State<AppState>, body: Bytes) -> Result<Json<ConfigSnapshot>, ApiError> {
    let value: serde_json::Value =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("malformed JSON: {e}")))?;
    let cfg = DetectionConfig::from_json_value(&value).map_err(ApiError::Invalid)?;
    let snap = st.config.update(cfg).map_err(ApiError::Invalid)?;
    tracing::info!(version = snap.version, "configuration updated");
    Ok(Json((*snap).clone()))
}

#[derive(Debug, Deserialize)]
struct RangeQuery {
    from: Option<String>,
    to: Option<String>,
}

fn parse_instant(name: &str, raw: &str) -> Result<DateTime<Utc>, ApiError> {
    DateTime::parse_from_rfc3339(raw)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| ApiError::BadRequest(format!("`{name}` is not an RFC 3339 instant: {e}")))
}

async fn events(State(st): State<AppState>, Query(q): Query<RangeQuery>) -> Result<Json<Vec<EventRecord>>, ApiError> {
    let from = match q.from.as_deref() {
        Some(raw) => parse_instant("from", raw)?,
        None => DateTime::<Utc>::MIN_UTC,
    };
    let records = match q.to.as_deref() {
        Some(raw) => st.store.query_events(from, parse_instant("to", raw)?)?,
        // unbounded above, so the event at the far end is not cut off
        None => st
            .store
            .all_events()
            .into_iter()
            .filter(|r| r.event.timestamp().is_ok_and(|t| t >= from))
            .collect(),
    };
    Ok(Json(records))
}

#[derive(Debug, Deserialize)]
struct MonthQuery {
    month: Option<String>,
}

async fn calendar(
    State(st): State<AppState>,
    Query(q): Query<MonthQuery>,
) -> Result<Json<BTreeMap<u32, u64>>, ApiError> {
    let raw = q
        .month
        .ok_or_else(|| ApiError::BadRequest("missing `month` (YYYY-MM)".into()))?;
    let month: YearMonth = raw.parse()?;
    Ok(Json(st.store.calendar_counts(month)))
}

async fn image(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let store = st.store.clone();
    let found = tokio::task::spawn_blocking(move || store.get_image(&id).map(|r| (id, r)))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    match found {
        (_, Some((blob, bytes))) => Ok(([(header::CONTENT_TYPE, blob.content_type())], bytes).into_response()),
        (id, None) => Err(ApiError::NotFound(format!("no image `{id}`"))),
    }
}

#[derive(Debug, Deserialize)]
struct CursorQuery {
    cursor: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WarningBatch {
    pub warnings: Vec<FeedWarning>,
    pub cursor: u64,
}

async fn warnings(State(st): State<AppState>, Query(q): Query<CursorQuery>) -> Result<Json<WarningBatch>, ApiError> {
    let cursor = match q.cursor.as_deref() {
        None | Some("") => 0,
        Some(raw) => raw
            .parse::<u64>()
            .map_err(|_| ApiError::BadRequest(format!("cursor must be a non-negative integer, got `{raw}`")))?,
    };
    let (warnings, cursor) = st.warnings.since(cursor);
    Ok(Json(WarningBatch { warnings, cursor }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CaptureDoc {
    pub frame_index: usize,
    pub config_version: u64,
    pub event: EventRecord,
    pub warning: Option<FeedWarning>,
}

async fn capture(State(st): State<AppState>) -> Result<(StatusCode, Json<CaptureDoc>), ApiError> {
    let capture = st.capture.clone();
    let config = st.config.clone();
    let doc = tokio::task::spawn_blocking(move || -> Result<CaptureDoc, ApiError> {
        let mut src = capture.lock().expect("capture lock poisoned");
        let index = src.next_frame;
        let scenario = src
            .scenario
            .as_ref()
            .ok_or_else(|| ApiError::Conflict("no scenario loaded; start the service with --scenario".into()))?;
        if index >= scenario.frame_count() {
            return Err(ApiError::Conflict(format!(
                "scenario exhausted after {} frames",
                scenario.frame_count()
            )));
        }
        let frame = scenario
            .render_frame(index)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        let at = scenario.frames[index];
        let snapshot = config.load();
        let Processed { record, warning } = src
            .pipeline
            .process_rendered(&frame, at, &snapshot.config)
            .map_err(|e| ApiError::Internal(format!("{e:#}")))?;
        src.next_frame += 1;
        Ok(CaptureDoc {
            frame_index: index,
            config_version: snapshot.version,
            event: record,
            warning,
        })
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    st.frames_processed.fetch_add(1, Ordering::SeqCst);
    Ok((StatusCode::CREATED, Json(doc)))
}
