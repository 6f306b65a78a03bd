//! Frame ingestion: store the image, run the detector, record the event and
//! any warning.

use std::sync::Arc;

use anyhow::Context;
use chrono::{DateTime, Utc};
use trapsight::detector::{DetectionConfig, DetectorState, EventPublisher};
use trapsight::imaging::{decode_color, encode_png_color, ColorImage};
use trapsight::store::{EventRecord, FsStore, TrapStore};

use crate::feed::{FeedWarning, WarningFeed};

#[derive(Debug, Clone)]
pub struct Processed {
    pub record: EventRecord,
    pub warning: Option<FeedWarning>,
}

/// Owns the detector state for one trap. Frames go through one at a time.
pub struct Pipeline {
    store: Arc<FsStore>,
    warnings: Arc<WarningFeed>,
    detector: DetectorState,
    publisher: Option<EventPublisher<EventRecord>>,
}

impl Pipeline {
    pub fn new(store: Arc<FsStore>, warnings: Arc<WarningFeed>) -> Self {
        Self {
            store,
            warnings,
            detector: DetectorState::new(),
            publisher: None,
        }
    }

    pub fn with_publisher(mut self, publisher: EventPublisher<EventRecord>) -> Self {
        self.publisher = Some(publisher);
        self
    }

    pub fn frames_processed(&self) -> u64 {
        self.detector.frame_seq()
    }

    /// Processes an encoded frame. Undecodable bytes leave the detector
    /// state untouched.
    pub fn process_encoded(
        &mut self,
        bytes: &[u8],
        captured_at: DateTime<Utc>,
        cfg: &DetectionConfig,
    ) -> anyhow::Result<Processed> {
        let frame = decode_color(bytes).context("frame rejected")?;
        self.process(&frame, bytes, captured_at, cfg)
    }

    /// Processes a rendered frame, archiving it as PNG.
    pub fn process_rendered(
        &mut self,
        frame: &ColorImage,
        captured_at: DateTime<Utc>,
        cfg: &DetectionConfig,
    ) -> anyhow::Result<Processed> {
        let bytes = encode_png_color(frame)?;
        self.process(frame, &bytes, captured_at, cfg)
    }

    fn process(
        &mut self,
        frame: &ColorImage,
        bytes: &[u8],
        captured_at: DateTime<Utc>,
        cfg: &DetectionConfig,
    ) -> anyhow::Result<Processed> {
        let blob = self.store.put_image(bytes, captured_at)?;
        let outcome = self.detector.process_frame(frame, cfg, captured_at, &blob.id)?;
        let record = self.store.append_detection(&outcome.event)?;
        let warning = match &outcome.warning {
            Some(w) => Some(self.warnings.push(w, record.storage_seq)?),
            None => None,
        };
        if let Some(p) = &self.publisher {
            p.publish(record.clone());
        }
        tracing::info!(
            seq = record.event.seq,
            count = record.event.count,
            algorithm = %record.event.algorithm,
            "frame processed"
        );
        Ok(Processed { record, warning })
    }
}
