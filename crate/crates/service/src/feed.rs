//! Cursor-addressed warning feed.
//!
//! Every warning gets a feed sequence number, dense from 1. A client that
//! polls with the last cursor it received sees each warning exactly once.

use std::path::{Path, PathBuf};
use std::sync::RwLock;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use trapsight::detector::{format_timestamp, Warning};
use trapsight::store::{append_line, recover_jsonl};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedWarning {
    pub seq: u64,
    pub event_seq: u64,
    pub storage_seq: u64,
    pub ts: String,
    pub count: u64,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct WarningFeed {
    entries: RwLock<Vec<FeedWarning>>,
    log: Option<PathBuf>,
}

impl WarningFeed {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Feed persisted to `path` (JSON Lines); a torn tail goes to
    /// `quarantine_dir`.
    pub fn open(path: &Path, quarantine_dir: &Path) -> anyhow::Result<Self> {
        let mut entries = Vec::new();
        if path.exists() {
            let mut quarantined = Vec::new();
            entries = recover_jsonl::<FeedWarning>(path, quarantine_dir, &mut quarantined)
                .with_context(|| format!("reading warning feed {}", path.display()))?;
        }
        for (i, w) in entries.iter().enumerate() {
            anyhow::ensure!(w.seq == i as u64 + 1, "{}: warning seq {} out of order", path.display(), w.seq);
        }
        Ok(Self {
            entries: RwLock::new(entries),
            log: Some(path.to_path_buf()),
        })
    }

    pub fn push(&self, warning: &Warning, storage_seq: u64) -> anyhow::Result<FeedWarning> {
        let mut entries = self.entries.write().expect("feed lock poisoned");
        let entry = FeedWarning {
            seq: entries.len() as u64 + 1,
            event_seq: warning.event_seq,
            storage_seq,
            ts: format_timestamp(&warning.timestamp),
            count: warning.count,
            message: warning.message.clone(),
        };
        if let Some(log) = &self.log {
            append_line(log, &serde_json::to_string(&entry)?)?;
        }
        entries.push(entry.clone());
        Ok(entry)
    }

    /// Warnings with `seq > cursor` and the cursor to send next time.
    pub fn since(&self, cursor: u64) -> (Vec<FeedWarning>, u64) {
        let entries = self.entries.read().expect("feed lock poisoned");
        let start = (cursor as usize).min(entries.len());
        let batch = entries[start..].to_vec();
        let next = batch.last().map_or(cursor, |w| w.seq);
        (batch, next)
    }

    pub fn head(&self) -> u64 {
        self.entries.read().expect("feed lock poisoned").len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn warning(seq: u64) -> Warning {
        Warning {
            event_seq: seq,
            timestamp: Utc.with_ymd_and_hms(2024, 6, 15, 0, 0, seq as u32).unwrap(),
            count: 1,
            message: "1 weevil detected".into(),
        }
    }

    #[test]
    fn cursor_at_head_returns_nothing() {
        let feed = WarningFeed::in_memory();
        assert_eq!(feed.since(0), (vec![], 0));
        feed.push(&warning(1), 1).unwrap();
        let (batch, cursor) = feed.since(0);
        assert_eq!((batch.len(), cursor), (1, 1));
        assert_eq!(feed.since(cursor), (vec![], 1));
        assert_eq!(feed.since(7), (vec![], 7));
    }

    #[test]
    fn polling_interleaved_with_pushes_sees_each_once() {
        let feed = WarningFeed::in_memory();
        let mut cursor = 0;
        let mut seen = Vec::new();
        for i in 1..=20u64 {
            for _ in 0..(i % 3) {
                feed.push(&warning(i), i).unwrap();
            }
            if i % 2 == 0 {
                let (batch, next) = feed.since(cursor);
                seen.extend(batch.into_iter().map(|w| w.seq));
                cursor = next;
            }
        }
        let (batch, _) = feed.since(cursor);
        seen.extend(batch.into_iter().map(|w| w.seq));
        assert_eq!(seen, (1..=feed.head()).collect::<Vec<_>>());
    }

    #[test]
    fn persisted_feed_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("warnings.jsonl");
        {
            let feed = WarningFeed::open(&path, dir.path()).unwrap();
            feed.push(&warning(1), 1).unwrap();
            feed.push(&warning(2), 2).unwrap();
        }
        let feed = WarningFeed::open(&path, dir.path()).unwrap();
        assert_eq!(feed.head(), 2);
        assert_eq!(feed.push(&warning(3), 3).unwrap().seq, 3);
    }
}
