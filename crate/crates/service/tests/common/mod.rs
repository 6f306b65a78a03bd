#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use chrono::{Duration, TimeZone, Utc};
use http_body_util::BodyExt;
use tower::ServiceExt;
use trapsight::detector::DetectionConfig;
use trapsight::simulator::{ScriptedObject, TrapScenario, WeevilSpec};
use trapsight::store::FsStore;
use trapsight_service::api::{router, AppState, CaptureSource};
use trapsight_service::config::ConfigCell;
use trapsight_service::feed::WarningFeed;
use trapsight_service::pipeline::Pipeline;

/// 800x600 frames on a gray-200 background with one 50,000 px blob of
/// `gray` present from the first frame on.
pub fn blob_scenario(gray: u8, frames: usize) -> TrapScenario {
    let start = Utc.with_ymd_and_hms(2024, 6, 15, 6, 0, 0).unwrap();
    let mut s = TrapScenario::evenly_spaced(800, 600, 200, start, Duration::minutes(10), frames);
    s.objects.push(ScriptedObject {
        spec: WeevilSpec::still(gray, 50_000),
        position: (400, 300),
        appear_at: 0,
        depart_at: None,
        dead: false,
    });
    s
}

pub fn app(data: &Path, scenario: Option<TrapScenario>) -> (Router, AppState) {
    let store = Arc::new(FsStore::open(data).unwrap());
    let warnings = Arc::new(WarningFeed::open(&data.join("warnings.jsonl"), &data.join("quarantine")).unwrap());
    let config = Arc::new(ConfigCell::new(DetectionConfig::default()).unwrap());
    let pipeline = Pipeline::new(store.clone(), warnings.clone());
    let state = AppState::new(store, config, warnings, CaptureSource::new(pipeline, scenario));
    (router(state.clone()), state)
}

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> serde_json::Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, None).await
}
