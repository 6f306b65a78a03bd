//! Frame-processing controller.
//!
//! Each frame is converted to grayscale, thresholded with `T`, compared with
//! the previous binarized frame and then counted either in full (Algorithm A)
//! or restricted to newly appeared foreground (Algorithm B). Only the
//! binarized previous frame is retained between calls.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{
    self, binary_threshold, count_weevils, label_components, new_foreground_mask,
    similarity_percent, to_grayscale, BinaryImage, ColorImage, ImagingError,
};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),

    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Tunables for one detection pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    /// Grayscale threshold; pixels at or below become foreground.
    #[serde(default = "defaults::t")]
    pub t: u8,
    /// Similarity threshold in percent; at or above it Algorithm B runs.
    #[serde(default = "defaults::s")]
    pub s: f64,
    /// Smallest component area (pixels) counted as a weevil.
    #[serde(default = "defaults::lower")]
    pub lower: u64,
    /// Largest component area (pixels) counted as a weevil.
    #[serde(default = "defaults::upper")]
    pub upper: u64,
    /// Minimum per-frame count that raises a warning.
    #[serde(default = "defaults::alert_threshold")]
    pub alert_threshold: u64,
}

mod defaults {
    pub fn t() -> u8 {
        60
    }
    pub fn s() -> f64 {
        97.0
    }
    pub fn lower() -> u64 {
        27_785
    }
    pub fn upper() -> u64 {
        266_000
    }
    pub fn alert_threshold() -> u64 {
        1
    }
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            t: defaults::t(),
            s: defaults::s(),
            lower: defaults::lower(),
            upper: defaults::upper(),
            alert_threshold: defaults::alert_threshold(),
        }
    }
}

/// A single invalid field, reported back to whoever submitted the config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl DetectionConfig {
    /// Checks the cross-field invariants; `t <= 255` holds by type.
    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut errors = Vec::new();
        if !self.s.is_finite() || !(0.0..=100.0).contains(&self.s) {
            errors.push(FieldError::new("s", format!("must be within [0, 100], got {}", self.s)));
        }
        if self.lower < 1 {
            errors.push(FieldError::new("lower", "must be at least 1"));
        }
        if self.lower > self.upper {
            errors.push(FieldError::new(
                "lower",
                format!("must not exceed upper ({} > {})", self.lower, self.upper),
            ));
        }
        if self.alert_threshold < 1 {
            errors.push(FieldError::new("alert_threshold", "must be at least 1"));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    /// Parses and validates a JSON document, reporting every bad field
    /// rather than stopping at the first. Missing keys take their defaults.
    pub fn from_json_value(value: &serde_json::Value) -> Result<Self, Vec<FieldError>> {
        let Some(obj) = value.as_object() else {
            return Err(vec![FieldError::new("", "expected a JSON object")]);
        };
        let mut errors = Vec::new();
        for key in obj.keys() {
            if !["t", "s", "lower", "upper", "alert_threshold"].contains(&key.as_str()) {
                errors.push(FieldError::new(key, "unknown field"));
            }
        }

        let uint = |key: &str, default: u64, errors: &mut Vec<FieldError>| -> u64 {
            match obj.get(key) {
                None => default,
                Some(v) => match v.as_u64() {
                    Some(n) => n,
                    None => {
                        errors.push(FieldError::new(key, format!("expected a non-negative integer, got {v}")));
                        default
                    }
                },
            }
        };

        let mut cfg = Self::default();
        let t = uint("t", cfg.t as u64, &mut errors);
        match u8::try_from(t) {
            Ok(t) => cfg.t = t,
            Err(_) => errors.push(FieldError::new("t", format!("must be within [0, 255], got {t}"))),
        }
        cfg.lower = uint("lower", cfg.lower, &mut errors);
        cfg.upper = uint("upper", cfg.upper, &mut errors);
        cfg.alert_threshold = uint("alert_threshold", cfg.alert_threshold, &mut errors);
        if let Some(v) = obj.get("s") {
            match v.as_f64() {
                Some(s) => cfg.s = s,
                None => errors.push(FieldError::new("s", format!("expected a number, got {v}"))),
            }
        }
        if let Err(more) = cfg.validate() {
            errors.extend(more);
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }
}

/// Which counting path produced an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    /// Full-frame count.
    A,
    /// Count of newly appeared objects only.
    B,
    /// Full-frame count on the very first frame, when nothing can be compared.
    #[serde(rename = "A-first-frame")]
    AFirstFrame,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::A => "A",
            Algorithm::B => "B",
            Algorithm::AFirstFrame => "A-first-frame",
        })
    }
}

/// Below `s` the scene changed too much to trust differencing, so everything
/// is recounted; at or above it only arrivals are counted.
pub fn select_algorithm(similarity: f64, s: f64) -> Algorithm {
    if similarity >= s {
        Algorithm::B
    } else {
        Algorithm::A
    }
}

pub fn algorithm_a(current: &BinaryImage, cfg: &DetectionConfig) -> Result<usize, DetectorError> {
    Ok(count_weevils(&label_components(current), cfg.lower, cfg.upper)?)
}

/// Counts in-range components of the mask "foreground now, background before".
///
/// Pixels that went from foreground to background (departed objects) show
/// up in the raw difference but never in this mask.
pub fn algorithm_b(
    previous: &BinaryImage,
    current: &BinaryImage,
    cfg: &DetectionConfig,
) -> Result<usize, DetectorError> {
    let mask = new_foreground_mask(previous, current)?;
    Ok(count_weevils(&label_components(&mask), cfg.lower, cfg.upper)?)
}

/// One processed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub count: u64,
    pub algorithm: Algorithm,
    /// Absent on the first frame.
    pub similarity: Option<f64>,
    pub image_ref: String,
    pub config_snapshot: DetectionConfig,
}

/// Config fields recorded on every event-log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoggedConfig {
    pub t: u8,
    pub s: f64,
    pub lower: u64,
    pub upper: u64,
}

impl From<&DetectionConfig> for LoggedConfig {
    fn from(c: &DetectionConfig) -> Self {
        Self {
            t: c.t,
            s: c.s,
            lower: c.lower,
            upper: c.upper,
        }
    }
}

/// Wire form of a [`DetectionEvent`]: one JSON object per event-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLine {
    pub seq: u64,
    pub ts: String,
    pub count: u64,
    pub algorithm: Algorithm,
    pub similarity: Option<f64>,
    pub image_ref: String,
    pub config: LoggedConfig,
}

/// Event timestamps are RFC 3339, UTC, millisecond precision.
pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl EventLine {
    pub fn timestamp(&self) -> Result<DateTime<Utc>, chrono::ParseError> {
        Ok(DateTime::parse_from_rfc3339(&self.ts)?.with_timezone(&Utc))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("event line serializes")
    }
}

impl From<&DetectionEvent> for EventLine {
    fn from(e: &DetectionEvent) -> Self {
        Self {
            seq: e.seq,
            ts: format_timestamp(&e.timestamp),
            count: e.count,
            algorithm: e.algorithm,
            similarity: e.similarity,
            image_ref: e.image_ref.clone(),
            config: LoggedConfig::from(&e.config_snapshot),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub event_seq: u64,
    pub timestamp: DateTime<Utc>,
    pub count: u64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct FrameOutcome {
    pub event: DetectionEvent,
    pub warning: Option<Warning>,
}

/// State carried between frames of one trap.
#[derive(Debug, Clone, Default)]
pub struct DetectorState {
    previous: Option<BinaryImage>,
    frame_seq: u64,
}

impl DetectorState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frame_seq(&self) -> u64 {
        self.frame_seq
    }

    pub fn previous(&self) -> Option<&BinaryImage> {
        self.previous.as_ref()
    }

    /// Runs one frame through the pipeline.
    ///
    /// `now` is injected so identical inputs always give identical events.
    /// On error the state is left untouched.
    pub fn process_frame(
        &mut self,
        frame: &ColorImage,
        cfg: &DetectionConfig,
        now: DateTime<Utc>,
        image_ref: &str,
    ) -> Result<FrameOutcome, DetectorError> {
        cfg.validate().map_err(|errs| {
            DetectorError::Config(
                errs.iter()
                    .map(|e| format!("{}: {}", e.field, e.message))
                    .collect::<Vec<_>>()
                    .join("; "),
            )
        })?;
        let binary = binary_threshold(&to_grayscale(frame), cfg.t);

        let (algorithm, similarity, count) = match &self.previous {
            None => (Algorithm::AFirstFrame, None, algorithm_a(&binary, cfg)?),
            Some(previous) => {
                let similarity = similarity_percent(previous, &binary)?;
                let algorithm = select_algorithm(similarity, cfg.s);
                let count = match algorithm {
                    Algorithm::B => {
                        let departed = departed_pixels(previous, &binary);
                        if departed > 0 {
                            tracing::debug!(departed, "foreground pixels left the frame");
                        }
                        algorithm_b(previous, &binary, cfg)?
                    }
                    _ => algorithm_a(&binary, cfg)?,
                };
                (algorithm, Some(similarity), count)
            }
        };

        let seq = self.frame_seq + 1;
        let count = count as u64;
        let event = DetectionEvent {
            seq,
            timestamp: now,
            count,
            algorithm,
            similarity,
            image_ref: image_ref.to_string(),
            config_snapshot: *cfg,
        };
        let warning = (count >= cfg.alert_threshold).then(|| Warning {
            event_seq: seq,
            timestamp: now,
            count,
            message: format!(
                "{count} weevil{} detected in frame {seq}",
                if count == 1 { "" } else { "s" }
            ),
        });

        self.previous = Some(binary);
        self.frame_seq = seq;
        Ok(FrameOutcome { event, warning })
    }
}

fn departed_pixels(previous: &BinaryImage, current: &BinaryImage) -> usize {
    previous
        .as_raw()
        .iter()
        .zip(current.as_raw())
        .filter(|(&p, &c)| p == imaging::FOREGROUND && c == imaging::BACKGROUND)
        .count()
}

/// Bounded, drop-oldest event queue between the detection loop and its
/// consumers. Publishing never blocks.
pub fn event_channel<T>(capacity: usize) -> (EventPublisher<T>, EventReceiver<T>) {
    assert!(capacity > 0, "channel capacity must be positive");
    let shared = Arc::new(ChannelShared {
        queue: Mutex::new(VecDeque::with_capacity(capacity)),
        ready: Condvar::new(),
        capacity,
        dropped: AtomicU64::new(0),
    });
    (
        EventPublisher {
            shared: shared.clone(),
        },
        EventReceiver { shared },
    )
}

struct ChannelShared<T> {
    queue: Mutex<VecDeque<T>>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicU64,
}

pub struct EventPublisher<T> {
    shared: Arc<ChannelShared<T>>,
}

impl<T> Clone for EventPublisher<T> {
    fn clone(&self) -> Self {
        Self {
            shared: self.shared.clone(),
        }
    }
}

impl<T> EventPublisher<T> {
    pub fn publish(&self, item: T) {
        let mut queue = self.shared.queue.lock().expect("channel lock poisoned");
        if queue.len() == self.shared.capacity {
            queue.pop_front();
            self.shared.dropped.fetch_add(1, Ordering::Relaxed);
        }
        queue.push_back(item);
        drop(queue);
        self.shared.ready.notify_one();
    }

    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }
}

pub struct EventReceiver<T> {
    shared: Arc<ChannelShared<T>>,
}

impl<T> EventReceiver<T> {
    pub fn try_recv(&self) -> Option<T> {
        self.shared.queue.lock().expect("channel lock poisoned").pop_front()
    }

    pub fn recv_timeout(&self, timeout: std::time::Duration) -> Option<T> {
        let queue = self.shared.queue.lock().expect("channel lock poisoned");
        let (mut queue, _) = self
            .shared
            .ready
            .wait_timeout_while(queue, timeout, |q| q.is_empty())
            .expect("channel lock poisoned");
        queue.pop_front()
    }

    pub fn drain(&self) -> Vec<T> {
        self.shared
            .queue
            .lock()
            .expect("channel lock poisoned")
            .drain(..)
            .collect()
    }

    /// Items discarded because the buffer was full.
    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn small_cfg() -> DetectionConfig {
        DetectionConfig {
            t: 60,
            s: 97.0,
            lower: 20,
            upper: 400,
            alert_threshold: 1,
        }
    }

    /// 100x100 frame, background 200, with dark squares at the given corners.
    fn frame(squares: &[(u32, u32, u32)]) -> ColorImage {
        let mut img = ColorImage::filled(100, 100, [200, 200, 200]).unwrap();
        for &(x0, y0, side) in squares {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    img.put_pixel(x, y, [30, 30, 30]);
                }
            }
        }
        img
    }

    fn bin(squares: &[(u32, u32, u32)]) -> BinaryImage {
        binary_threshold(&to_grayscale(&frame(squares)), 60)
    }

    fn ts(secs: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_718_409_600 + secs, 0).unwrap()
    }

    #[test]
    fn select_algorithm_cases() {
        assert_eq!(select_algorithm(96.0, 97.0), Algorithm::A);
        assert_eq!(select_algorithm(98.0, 97.0), Algorithm::B);
        assert_eq!(select_algorithm(97.0, 97.0), Algorithm::B);
    }

    #[test]
    fn algorithm_a_filters_specks() {
        // 2 squares of 100 px in range, one 3x3 = 9 px speck below `lower`.
        let img = bin(&[(5, 5, 10), (50, 50, 10), (80, 10, 3)]);
        assert_eq!(algorithm_a(&img, &small_cfg()).unwrap(), 2);
        assert_eq!(algorithm_a(&bin(&[]), &small_cfg()).unwrap(), 0);
    }

    #[test]
    fn algorithm_b_counts_only_arrivals() {
        let cfg = small_cfg();
        let p = bin(&[(5, 5, 10)]);
        let pq = bin(&[(5, 5, 10), (50, 50, 10)]);
        assert_eq!(algorithm_b(&p, &pq, &cfg).unwrap(), 1);
        assert_eq!(algorithm_b(&pq, &pq, &cfg).unwrap(), 0);
        // departed object
        assert_eq!(algorithm_b(&p, &bin(&[]), &cfg).unwrap(), 0);
        // nothing before: everything is new
        assert_eq!(algorithm_b(&bin(&[]), &pq, &cfg).unwrap(), algorithm_a(&pq, &cfg).unwrap());
        let other = BinaryImage::empty(10, 10).unwrap();
        assert!(algorithm_b(&other, &pq, &cfg).is_err());
    }

    #[test]
    fn first_frame_then_identical_frame() {
        let mut state = DetectorState::new();
        let cfg = small_cfg();
        let f = frame(&[(5, 5, 10)]);
        let out = state.process_frame(&f, &cfg, ts(0), "img-1").unwrap();
        assert_eq!(out.event.seq, 1);
        assert_eq!(out.event.algorithm, Algorithm::AFirstFrame);
        assert_eq!(out.event.similarity, None);
        assert_eq!(out.event.count, 1);
        assert!(out.warning.is_some());

        let out = state.process_frame(&f, &cfg, ts(1), "img-1").unwrap();
        assert_eq!(out.event.seq, 2);
        assert_eq!(out.event.algorithm, Algorithm::B);
        assert_eq!(out.event.similarity, Some(100.0));
        assert_eq!(out.event.count, 0);
        assert!(out.warning.is_none());
        assert_eq!(state.frame_seq(), 2);
    }

    #[test]
    fn large_change_switches_to_a() {
        let mut state = DetectorState::new();
        let cfg = small_cfg();
        state.process_frame(&frame(&[]), &cfg, ts(0), "a").unwrap();
        // top half dark: 50% of pixels change
        let mut half = frame(&[]);
        for y in 0..50 {
            for x in 0..100 {
                half.put_pixel(x, y, [10, 10, 10]);
            }
        }
        let out = state.process_frame(&half, &cfg, ts(1), "b").unwrap();
        assert_eq!(out.event.similarity, Some(50.0));
        assert_eq!(out.event.algorithm, Algorithm::A);
    }

    #[test]
    fn warning_threshold_respected() {
        let mut state = DetectorState::new();
        let cfg = DetectionConfig {
            alert_threshold: 2,
            ..small_cfg()
        };
        let out = state.process_frame(&frame(&[(5, 5, 10)]), &cfg, ts(0), "a").unwrap();
        assert!(out.warning.is_none());
        let mut state = DetectorState::new();
        let out = state
            .process_frame(&frame(&[(5, 5, 10), (50, 50, 10)]), &cfg, ts(0), "a")
            .unwrap();
        let w = out.warning.unwrap();
        assert_eq!((w.event_seq, w.count), (1, 2));
    }

    #[test]
    fn invalid_config_leaves_state_untouched() {
        let mut state = DetectorState::new();
        let bad = DetectionConfig {
            lower: 500,
            upper: 10,
            ..small_cfg()
        };
        assert!(state.process_frame(&frame(&[]), &bad, ts(0), "a").is_err());
        assert_eq!(state.frame_seq(), 0);
        assert!(state.previous().is_none());
    }

    #[test]
    fn config_json_diagnostics() {
        let cfg = DetectionConfig::from_json_value(&serde_json::json!({"t": 80})).unwrap();
        assert_eq!(cfg.t, 80);
        assert_eq!(cfg.upper, 266_000);

        let errs = DetectionConfig::from_json_value(&serde_json::json!({
            "t": 300, "s": "high", "lower": 300000, "upper": 266000, "bogus": 1
        }))
        .unwrap_err();
        let fields: Vec<_> = errs.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"t"));
        assert!(fields.contains(&"s"));
        assert!(fields.contains(&"lower"));
        assert!(fields.contains(&"bogus"));

        let errs = DetectionConfig::from_json_value(&serde_json::json!({"s": 100.5, "alert_threshold": 0}))
            .unwrap_err();
        assert_eq!(errs.len(), 2);
        assert!(DetectionConfig::from_json_value(&serde_json::json!([1])).is_err());
    }

    #[test]
    fn event_line_format() {
        let e = DetectionEvent {
            seq: 1,
            timestamp: ts(0),
            count: 1,
            algorithm: Algorithm::AFirstFrame,
            similarity: None,
            image_ref: "abc".into(),
            config_snapshot: DetectionConfig::default(),
        };
        assert_eq!(
            EventLine::from(&e).to_json(),
            r#"{"seq":1,"ts":"2024-06-15T00:00:00.000Z","count":1,"algorithm":"A-first-frame","similarity":null,"image_ref":"abc","config":{"t":60,"s":97.0,"lower":27785,"upper":266000}}"#
        );
        let line: EventLine = serde_json::from_str(&EventLine::from(&e).to_json()).unwrap();
        assert_eq!(line.timestamp().unwrap(), ts(0));
    }

    #[test]
    fn channel_drops_oldest_when_full() {
        let (tx, rx) = event_channel(2);
        for i in 0..5 {
            tx.publish(i);
        }
        assert_eq!(rx.dropped(), 3);
        assert_eq!(rx.drain(), vec![3, 4]);
        assert_eq!(rx.try_recv(), None);
        assert_eq!(rx.recv_timeout(std::time::Duration::from_millis(5)), None);
        tx.publish(9);
        assert_eq!(rx.recv_timeout(std::time::Duration::from_millis(5)), Some(9));
    }
}
