//! Filesystem persistence: content-addressed image blobs plus an append-only
//! event table in dated JSON Lines segments.
//!
//! Layout under the store root:
//!
//! ```text
//! blobs/index.jsonl              one ImageBlobRef per stored image
//! blobs/<aa>/<id>.<ext>          image bytes, <aa> = first two id chars
//! events/YYYY-MM-DD.jsonl        event records, segmented by UTC date
//! quarantine/                    torn tails cut off during recovery
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate, TimeZone, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detector::{format_timestamp, DetectionEvent, EventLine};
use crate::imaging;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("bytes are not a supported image: {0}")]
    Undecodable(String),

    #[error("event references unknown image `{0}`")]
    DanglingImageRef(String),

    #[error("invalid time range: from {from} is after to {to}")]
    Range { from: String, to: String },

    #[error("invalid month `{0}`, expected YYYY-MM")]
    Month(String),

    #[error("bad timestamp `{0}`")]
    Timestamp(String),

    #[error("{path}:{line}: corrupt record: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageBlobRef {
    /// Hex prefix of the SHA-256 of the stored bytes.
    pub id: String,
    /// Path relative to the store root.
    pub path: String,
    pub captured_at: DateTime<Utc>,
    pub bytes: u64,
}

impl ImageBlobRef {
    pub fn content_type(&self) -> &'static str {
        match Path::new(&self.path).extension().and_then(|e| e.to_str()) {
            Some("png") => "image/png",
            Some("pgm") => "image/x-portable-graymap",
            Some("ppm") => "image/x-portable-pixmap",
            Some("pbm") => "image/x-portable-bitmap",
            _ => "application/octet-stream",
        }
    }
}

/// A stored event: the event-log line plus its storage sequence number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub storage_seq: u64,
    #[serde(flatten)]
    pub event: EventLine,
}

/// Calendar month, parsed from and displayed as `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Option<Self> {
        NaiveDate::from_ymd_opt(year, month, 1).map(|_| Self { year, month })
    }

    pub fn next(&self) -> Self {
        if self.month == 12 {
            Self {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Self {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    /// Half-open `[start, end)` of the month in `offset`, as UTC instants.
    pub fn bounds(&self, offset: FixedOffset) -> (DateTime<Utc>, DateTime<Utc>) {
        let start = |ym: YearMonth| {
            offset
                .with_ymd_and_hms(ym.year, ym.month, 1, 0, 0, 0)
                .single()
                .expect("fixed offsets are unambiguous")
                .with_timezone(&Utc)
        };
        (start(*self), start(self.next()))
    }
}

impl FromStr for YearMonth {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StoreError::Month(s.to_string());
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year = y.parse().map_err(|_| bad())?;
        let month = m.parse().map_err(|_| bad())?;
        Self::new(year, month).ok_or_else(bad)
    }
}

impl std::fmt::Display for YearMonth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Storage backend contract used by the detection loop and the API.
pub trait TrapStore: Send + Sync {
    fn put_image(&self, bytes: &[u8], captured_at: DateTime<Utc>) -> Result<ImageBlobRef, StoreError>;
    fn get_image(&self, id: &str) -> Result<Option<(ImageBlobRef, Vec<u8>)>, StoreError>;
    fn append_event(&self, event: &EventLine) -> Result<EventRecord, StoreError>;
    fn query_events(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<Vec<EventRecord>, StoreError>;
    fn all_events(&self) -> Vec<EventRecord>;
    fn calendar_counts(&self, month: YearMonth) -> BTreeMap<u32, u64>;
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// Timezone used to bucket events into calendar days.
    pub reporting_offset: FixedOffset,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            reporting_offset: FixedOffset::east_opt(0).expect("zero offset"),
        }
    }
}

#[derive(Default)]
struct EventTable {
    records: Vec<(DateTime<Utc>, EventRecord)>,
}

/// Filesystem-backed [`TrapStore`]. One writer at a time; readers only take
/// short read locks on the in-memory index.
pub struct FsStore {
    root: PathBuf,
    options: StoreOptions,
    write_lock: Mutex<()>,
    blobs: RwLock<HashMap<String, ImageBlobRef>>,
    events: RwLock<EventTable>,
    quarantined: Vec<PathBuf>,
}

impl std::fmt::Debug for FsStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FsStore").field("root", &self.root).finish_non_exhaustive()
    }
}

const ID_HEX_LEN: usize = 32;

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::open_with(root, StoreOptions::default())
    }

    /// Opens (or creates) a store, rebuilding the in-memory index from disk.
    /// A torn final line in any log is moved to `quarantine/` and cut off.
    pub fn open_with(root: impl Into<PathBuf>, options: StoreOptions) -> Result<Self, StoreError> {
        let root = root.into();
        for dir in ["blobs", "events", "quarantine"] {
            let d = root.join(dir);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
        let mut quarantined = Vec::new();

        let index_path = root.join("blobs").join("index.jsonl");
        let mut blobs = HashMap::new();
        if index_path.exists() {
            for blob in recover_jsonl::<ImageBlobRef>(&index_path, &root.join("quarantine"), &mut quarantined)? {
                blobs.entry(blob.id.clone()).or_insert(blob);
            }
        }

        let events_dir = root.join("events");
        let mut segments: Vec<PathBuf> = fs::read_dir(&events_dir)
            .map_err(io_err(&events_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        segments.sort();
        let mut records = Vec::new();
        for seg in &segments {
            for rec in recover_jsonl::<EventRecord>(seg, &root.join("quarantine"), &mut quarantined)? {
                let ts = rec
                    .event
                    .timestamp()
                    .map_err(|_| StoreError::Timestamp(rec.event.ts.clone()))?;
                records.push((ts, rec));
            }
        }
        records.sort_by_key(|(_, r)| r.storage_seq);

        Ok(Self {
            root,
            options,
            write_lock: Mutex::new(()),
            blobs: RwLock::new(blobs),
            events: RwLock::new(EventTable { records }),
            quarantined,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Files written to `quarantine/` while opening this store.
    pub fn quarantined(&self) -> &[PathBuf] {
        &self.quarantined
    }

    pub fn reporting_offset(&self) -> FixedOffset {
        self.options.reporting_offset
    }

    pub fn image_ref(&self, id: &str) -> Option<ImageBlobRef> {
        self.blobs.read().expect("blob index poisoned").get(id).cloned()
    }

    pub fn event_count(&self) -> usize {
        self.events.read().expect("event index poisoned").records.len()
    }

    pub fn last_event(&self) -> Option<EventRecord> {
        self.events
            .read()
            .expect("event index poisoned")
            .records
            .last()
            .map(|(_, r)| r.clone())
    }

    /// Convenience wrapper around [`TrapStore::append_event`].
    pub fn append_detection(&self, event: &DetectionEvent) -> Result<EventRecord, StoreError> {
        self.append_event(&EventLine::from(event))
    }

    fn extension_for(bytes: &[u8]) -> Option<&'static str> {
        match imaging::guess_format(bytes)? {
            image::ImageFormat::Png => Some("png"),
            image::ImageFormat::Pnm => match bytes.get(1) {
                Some(b'1' | b'4') => Some("pbm"),
                Some(b'2' | b'5') => Some("pgm"),
                Some(b'3' | b'6') => Some("ppm"),
                _ => Some("pam"),
            },
            _ => None,
        }
    }
}

impl TrapStore for FsStore {
    /// Stores `bytes` under their content hash. Re-storing identical bytes
    /// returns the original reference.
    fn put_image(&self, bytes: &[u8], captured_at: DateTime<Utc>) -> Result<ImageBlobRef, StoreError> {
        let ext = Self::extension_for(bytes).ok_or_else(|| StoreError::Undecodable("unrecognised format".into()))?;
        imaging::decode_color(bytes).map_err(|e| StoreError::Undecodable(e.to_string()))?;

        let digest = Sha256::digest(bytes);
        let id = hex::encode(digest)[..ID_HEX_LEN].to_string();
        if let Some(existing) = self.image_ref(&id) {
            return Ok(existing);
        }

        let _guard = self.write_lock.lock().expect("store writer poisoned");
        if let Some(existing) = self.image_ref(&id) {
            return Ok(existing);
        }
        let rel = format!("blobs/{}/{}.{}", &id[..2], id, ext);
        let full = self.root.join(&rel);
        let dir = full.parent().expect("blob path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = full.with_extension("tmp");
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            f.write_all(bytes).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, &full).map_err(io_err(&full))?;

        let blob = ImageBlobRef {
            id: id.clone(),
            path: rel,
            captured_at,
            bytes: bytes.len() as u64,
        };
        let index = self.root.join("blobs").join("index.jsonl");
        append_line(&index, &serde_json::to_string(&blob).expect("blob ref serializes"))?;
        self.blobs.write().expect("blob index poisoned").insert(id, blob.clone());
        Ok(blob)
    }

    fn get_image(&self, id: &str) -> Result<Option<(ImageBlobRef, Vec<u8>)>, StoreError> {
        let Some(blob) = self.image_ref(id) else {
            return Ok(None);
        };
        let full = self.root.join(&blob.path);
        let bytes = fs::read(&full).map_err(io_err(&full))?;
        Ok(Some((blob, bytes)))
    }

    fn append_event(&self, event: &EventLine) -> Result<EventRecord, StoreError> {
        let ts = event.timestamp().map_err(|_| StoreError::Timestamp(event.ts.clone()))?;
        if self.image_ref(&event.image_ref).is_none() {
            return Err(StoreError::DanglingImageRef(event.image_ref.clone()));
        }

        let _guard = self.write_lock.lock().expect("store writer poisoned");
        let storage_seq = self.last_event().map_or(1, |r| r.storage_seq + 1);
        let record = EventRecord {
            storage_seq,
            event: EventLine {
                // normalise so segments sort and compare consistently
                ts: format_timestamp(&ts),
                ..event.clone()
            },
        };
        let segment = self
            .root
            .join("events")
            .join(format!("{}.jsonl", ts.format("%Y-%m-%d")));
        append_line(&segment, &serde_json::to_string(&record).expect("event record serializes"))?;
        self.events
            .write()
            .expect("event index poisoned")
            .records
            .push((ts, record.clone()));
        Ok(record)
    }

    /// Records with `from <= ts < to`, in storage order.
    fn query_events(&self, from: DateTime<Utc>, to: DateTime<Utc>) -> Result<Vec<EventRecord>, StoreError> {
        if from > to {
            return Err(StoreError::Range {
                from: format_timestamp(&from),
                to: format_timestamp(&to),
            });
        }
        Ok(self
            .events
            .read()
            .expect("event index poisoned")
            .records
            .iter()
            .filter(|(ts, _)| *ts >= from && *ts < to)
            .map(|(_, r)| r.clone())
            .collect())
    }

    fn all_events(&self) -> Vec<EventRecord> {
        self.events
            .read()
            .expect("event index poisoned")
            .records
            .iter()
            .map(|(_, r)| r.clone())
            .collect()
    }

    /// Per-day weevil totals for `month` in the reporting timezone. Days
    /// without events are absent.
    fn calendar_counts(&self, month: YearMonth) -> BTreeMap<u32, u64> {
        let offset = self.options.reporting_offset;
        let mut days = BTreeMap::new();
        for (ts, rec) in &self.events.read().expect("event index poisoned").records {
            let local = ts.with_timezone(&offset);
            if local.year() == month.year && local.month() == month.month {
                *days.entry(local.day()).or_insert(0) += rec.event.count;
            }
        }
        days
    }
}

/// Appends `line` plus a newline and syncs the data to disk.
pub fn append_line(path: &Path, line: &str) -> Result<(), StoreError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut buf = Vec::with_capacity(line.len() + 1);
    buf.extend_from_slice(line.as_bytes());
    buf.push(b'\n');
    f.write_all(&buf).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

/// Reads a JSON Lines file. An unparsable or unterminated final line is
/// treated as a torn write: its bytes go to `quarantine_dir` and the file is
/// truncated to the last good record. Damage anywhere else is an error.
pub fn recover_jsonl<T: DeserializeOwned>(
    path: &Path,
    quarantine_dir: &Path,
    quarantined: &mut Vec<PathBuf>,
) -> Result<Vec<T>, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let (line, next, terminated) = match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(i) => (&bytes[offset..offset + i], offset + i + 1, true),
            None => (&bytes[offset..], bytes.len(), false),
        };
        let is_last = next >= bytes.len();
        if line.iter().all(u8::is_ascii_whitespace) && terminated {
            offset = next;
            continue;
        }
        let parsed = std::str::from_utf8(line)
            .map_err(|e| e.to_string())
            .and_then(|s| serde_json::from_str::<T>(s).map_err(|e| e.to_string()));
        match parsed {
            Ok(v) if terminated => out.push(v),
            Ok(_) | Err(_) if is_last => {
                let name = format!(
                    "{}.{}.torn",
                    path.file_name().and_then(|n| n.to_str()).unwrap_or("log"),
                    offset
                );
                let dest = quarantine_dir.join(name);
                fs::write(&dest, &bytes[offset..]).map_err(io_err(&dest))?;
                let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
                f.set_len(offset as u64).map_err(io_err(path))?;
                f.sync_all().map_err(io_err(path))?;
                tracing::warn!(file = %path.display(), quarantine = %dest.display(), "torn tail quarantined");
                quarantined.push(dest);
                break;
            }
            Ok(_) => unreachable!("unterminated lines are always last"),
            Err(message) => {
                return Err(StoreError::Corrupt {
                    path: path.to_path_buf(),
                    line: line_no,
                    message,
                })
            }
        }
        offset = next;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{Algorithm, LoggedConfig};
    use crate::imaging::{encode_pgm, GrayImage};

    fn pgm(seed: u8) -> Vec<u8> {
        let img = GrayImage::from_raw(4, 2, (0..8).map(|i| i * 10 + seed).collect()).unwrap();
        encode_pgm(&img)
    }

    fn at(s: &str) -> DateTime<Utc> {
        DateTime::parse_from_rfc3339(s).unwrap().with_timezone(&Utc)
    }

    fn line(seq: u64, ts: &str, count: u64, image_ref: &str) -> EventLine {
        EventLine {
            seq,
            ts: ts.into(),
            count,
            algorithm: Algorithm::A,
            similarity: Some(99.5),
            image_ref: image_ref.into(),
            config: LoggedConfig {
                t: 60,
                s: 97.0,
                lower: 27_785,
                upper: 266_000,
            },
        }
    }

    #[test]
    fn put_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::open(dir.path()).unwrap();
        let a = store.put_image(&pgm(1), at("2024-06-15T00:00:00Z")).unwrap();
        let again = store.put_image(&pgm(1), at("2024-06-16T00:00:00Z")).unwrap();
        let b = store.put_image(&pgm(2), at("2024-06-15T00:00:00Z")).unwrap();
        assert_eq!(a, again);
        assert_ne!(a.id, b.id);
        assert!(a.path.starts_with(&format!("blobs/{}/", &a.id[..2])));
        assert!(a.path.ends_with(".pgm"));
        assert_eq!(a.content_type(), "image/x-portable-graymap");
        let index = fs::read_to_string(dir.path().join("blobs/index.jsonl")).unwrap();
        assert_eq!(index.lines().count(), 2);
        let (_, bytes) = store.get_image(&a.id).unwrap().unwrap();
        assert_eq!(bytes, pgm(1));
        assert!(store.get_image("nope").unwrap().is_none());
    }

    #[test]
    fn undecodable_bytes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::open(dir.path()).unwrap();
        assert!(matches!(
            store.put_image(b"hello", Utc::now()),
            Err(StoreError::Undecodable(_))
        ));
        // right magic, truncated body
        assert!(matches!(
            store.put_image(b"P5\n4 4\n255\n\x01", Utc::now()),
            Err(StoreError::Undecodable(_))
        ));
    }

    #[test]
    fn sequence_numbers_and_dangling_refs() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::open(dir.path()).unwrap();
        let img = store.put_image(&pgm(1), Utc::now()).unwrap();
        let r1 = store.append_event(&line(1, "2024-06-15T10:00:00.000Z", 1, &img.id)).unwrap();
        let r2 = store.append_event(&line(2, "2024-06-15T10:00:01.000Z", 0, &img.id)).unwrap();
        assert_eq!((r1.storage_seq, r2.storage_seq), (1, 2));
        assert!(matches!(
            store.append_event(&line(3, "2024-06-15T10:00:02.000Z", 0, "missing")),
            Err(StoreError::DanglingImageRef(_))
        ));
        assert!(dir.path().join("events/2024-06-15.jsonl").exists());
    }

    #[test]
    fn numbering_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let id = {
            let store = FsStore::open(dir.path()).unwrap();
            let img = store.put_image(&pgm(1), Utc::now()).unwrap();
            store.append_event(&line(1, "2024-06-15T10:00:00.000Z", 1, &img.id)).unwrap();
            store.append_event(&line(2, "2024-06-16T10:00:00.000Z", 1, &img.id)).unwrap();
            img.id
        };
        let store = FsStore::open(dir.path()).unwrap();
        assert_eq!(store.event_count(), 2);
        let r = store.append_event(&line(3, "2024-06-15T11:00:00.000Z", 1, &id)).unwrap();
        assert_eq!(r.storage_seq, 3);
        let seqs: Vec<_> = store.all_events().iter().map(|r| r.storage_seq).collect();
        assert_eq!(seqs, vec![1, 2, 3]);
    }

    #[test]
    fn range_queries_are_half_open() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::open(dir.path()).unwrap();
        assert!(store
            .query_events(at("2024-01-01T00:00:00Z"), at("2025-01-01T00:00:00Z"))
            .unwrap()
            .is_empty());
        let img = store.put_image(&pgm(1), Utc::now()).unwrap();
        store.append_event(&line(1, "2024-06-15T10:00:00.000Z", 1, &img.id)).unwrap();
        store.append_event(&line(2, "2024-06-15T11:00:00.000Z", 2, &img.id)).unwrap();
        let all = store
            .query_events(at("2024-01-01T00:00:00Z"), at("2025-01-01T00:00:00Z"))
            .unwrap();
        assert_eq!(all.len(), 2);
        let first = store
            .query_events(at("2024-06-15T10:00:00Z"), at("2024-06-15T11:00:00Z"))
            .unwrap();
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].event.seq, 1);
        assert!(matches!(
            store.query_events(at("2024-06-16T00:00:00Z"), at("2024-06-15T00:00:00Z")),
            Err(StoreError::Range { .. })
        ));
    }

    #[test]
    fn calendar_buckets_by_day_and_month() {
        let dir = tempfile::tempdir().unwrap();
        let store = FsStore::open(dir.path()).unwrap();
        let june: YearMonth = "2024-06".parse().unwrap();
        assert!(store.calendar_counts(june).is_empty());
        let img = store.put_image(&pgm(1), Utc::now()).unwrap();
        store.append_event(&line(1, "2024-06-05T08:00:00.000Z", 1, &img.id)).unwrap();
        store.append_event(&line(2, "2024-06-05T20:00:00.000Z", 2, &img.id)).unwrap();
        store.append_event(&line(3, "2024-06-30T23:59:59.999Z", 4, &img.id)).unwrap();
        store.append_event(&line(4, "2024-07-01T00:00:00.000Z", 8, &img.id)).unwrap();
        let days = store.calendar_counts(june);
        assert_eq!(days, BTreeMap::from([(5, 3), (30, 4)]));
        assert_eq!(store.calendar_counts(june.next()), BTreeMap::from([(1, 8)]));
    }

    #[test]
    fn calendar_uses_reporting_offset() {
        let dir = tempfile::tempdir().unwrap();
        let opts = StoreOptions {
            reporting_offset: FixedOffset::east_opt(2 * 3600).unwrap(),
        };
        let store = FsStore::open_with(dir.path(), opts).unwrap();
        let img = store.put_image(&pgm(1), Utc::now()).unwrap();
        // 23:00 UTC on June 30 is 01:00 on July 1 at UTC+2
        store.append_event(&line(1, "2024-06-30T23:00:00.000Z", 1, &img.id)).unwrap();
        assert!(store.calendar_counts("2024-06".parse().unwrap()).is_empty());
        assert_eq!(
            store.calendar_counts("2024-07".parse().unwrap()),
            BTreeMap::from([(1, 1)])
        );
    }

    #[test]
    fn year_month_parsing() {
        assert_eq!("2024-06".parse::<YearMonth>().unwrap().to_string(), "2024-06");
        for bad in ["2024-13", "2024-6", "24-06", "2024/06", ""] {
            assert!(bad.parse::<YearMonth>().is_err(), "{bad}");
        }
        let dec = YearMonth::new(2024, 12).unwrap();
        assert_eq!(dec.next(), YearMonth::new(2025, 1).unwrap());
        let (start, end) = dec.bounds(FixedOffset::east_opt(0).unwrap());
        assert_eq!(start, at("2024-12-01T00:00:00Z"));
        assert_eq!(end, at("2025-01-01T00:00:00Z"));
    }

    #[test]
    fn torn_tail_is_quarantined() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = FsStore::open(dir.path()).unwrap();
            let img = store.put_image(&pgm(1), Utc::now()).unwrap();
            store.append_event(&line(1, "2024-06-15T10:00:00.000Z", 1, &img.id)).unwrap();
            store.append_event(&line(2, "2024-06-15T10:00:01.000Z", 1, &img.id)).unwrap();
        }
        let seg = dir.path().join("events/2024-06-15.jsonl");
        let good_len = fs::metadata(&seg).unwrap().len();
        let mut f = OpenOptions::new().append(true).open(&seg).unwrap();
        f.write_all(br#"{"storage_seq":3,"seq":3,"ts":"2024-06-"#).unwrap();
        drop(f);

        let store = FsStore::open(dir.path()).unwrap();
        assert_eq!(store.event_count(), 2);
        assert_eq!(store.quarantined().len(), 1);
        assert_eq!(fs::metadata(&seg).unwrap().len(), good_len);
        let torn = fs::read_to_string(&store.quarantined()[0]).unwrap();
        assert!(torn.starts_with(r#"{"storage_seq":3"#));
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("events")).unwrap();
        fs::write(dir.path().join("events/2024-06-15.jsonl"), "garbage\n{}\n").unwrap();
        assert!(matches!(
            FsStore::open(dir.path()),
            Err(StoreError::Corrupt { line: 1, .. })
        ));
    }
}
