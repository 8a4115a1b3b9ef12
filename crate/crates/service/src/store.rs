//! Measurement storage.
//!
//! [`LogStore`] is an append-only JSON-lines file plus an in-memory index
//! rebuilt on open. Every record is written as one line and fsynced before the
//! ingest returns, so after a crash the file holds whole records followed by
//! at most one torn line, which `open` truncates away.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Utc};
use etongue_core::MeasurementRecord;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub received_at: DateTime<Utc>,
    /// Byte offset of the record's line in the log (0 for in-memory stores).
    pub offset: u64,
    pub content_hash: String,
    pub record: MeasurementRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestOutcome {
    Created,
    /// Identical record already stored.
    Duplicate,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record {0} already stored with different content")]
    Conflict(Uuid),
    #[error("store I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Storage seam; a document database can stand in for the log file.
pub trait RecordStore: Send + Sync {
    fn ingest(
        &self,
        record: MeasurementRecord,
        received_at: DateTime<Utc>,
    ) -> Result<IngestOutcome, StoreError>;
    fn get(&self, id: &Uuid) -> Option<Arc<StoredRecord>>;
    /// All records in receipt order.
    fn all(&self) -> Vec<Arc<StoredRecord>>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn content_hash(record: &MeasurementRecord) -> String {
    let bytes = serde_json::to_vec(record).expect("record serializes");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Default)]
struct Index {
    by_id: HashMap<Uuid, usize>,
    records: Vec<Arc<StoredRecord>>,
}

impl Index {
    fn check(&self, id: &Uuid, hash: &str) -> Result<Option<IngestOutcome>, StoreError> {
        match self.by_id.get(id) {
            Some(&i) if self.records[i].content_hash == hash => Ok(Some(IngestOutcome::Duplicate)),
            Some(_) => Err(StoreError::Conflict(*id)),
            None => Ok(None),
        }
    }

    fn push(&mut self, stored: StoredRecord) {
        self.by_id.insert(stored.record.record_id, self.records.len());
        self.records.push(Arc::new(stored));
    }
}

#[derive(Default)]
pub struct MemoryStore {
    index: RwLock<Index>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl RecordStore for MemoryStore {
    fn ingest(
        &self,
        record: MeasurementRecord,
        received_at: DateTime<Utc>,
    ) -> Result<IngestOutcome, StoreError> {
        let hash = content_hash(&record);
        let mut index = self.index.write().expect("store lock");
        if let Some(outcome) = index.check(&record.record_id, &hash)? {
            return Ok(outcome);
        }
        index.push(StoredRecord {
            received_at,
            offset: 0,
            content_hash: hash,
            record,
        });
        Ok(IngestOutcome::Created)
    }

    fn get(&self, id: &Uuid) -> Option<Arc<StoredRecord>> {
        let index = self.index.read().expect("store lock");
        index.by_id.get(id).map(|&i| index.records[i].clone())
    }

    fn all(&self) -> Vec<Arc<StoredRecord>> {
        self.index.read().expect("store lock").records.clone()
    }

    fn len(&self) -> usize {
        self.index.read().expect("store lock").records.len()
    }
}

pub const LOG_FILE: &str = "records.jsonl";

struct LogInner {
    file: File,
    end: u64,
    index: Index,
}

pub struct LogStore {
    path: PathBuf,
    inner: RwLock<LogInner>,
}

impl LogStore {
    /// Opens (or creates) `dir/records.jsonl`, dropping any torn tail.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;

        let mut index = Index::default();
        let mut good_end = 0usize;
        while good_end < bytes.len() {
            let Some(nl) = bytes[good_end..].iter().position(|&b| b == b'\n') else {
                break;
            };
            let line = &bytes[good_end..good_end + nl];
            let Ok(mut stored) = serde_json::from_slice::<StoredRecord>(line) else {
                break;
            };
            stored.offset = good_end as u64;
            if index.by_id.contains_key(&stored.record.record_id) {
                log::warn!(
                    "log repeats record {}; keeping first copy",
                    stored.record.record_id
                );
            } else {
                index.push(stored);
            }
            good_end += nl + 1;
        }
        if good_end < bytes.len() {
            log::warn!(
                "{}: dropping {} bytes of incomplete trailing data",
                path.display(),
                bytes.len() - good_end
            );
            file.set_len(good_end as u64)?;
            file.sync_all()?;
        }
        file.seek(SeekFrom::Start(good_end as u64))?;
        Ok(Self {
            path,
            inner: RwLock::new(LogInner {
                file,
                end: good_end as u64,
                index,
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl RecordStore for LogStore {
    fn ingest(
        &self,
        record: MeasurementRecord,
        received_at: DateTime<Utc>,
    ) -> Result<IngestOutcome, StoreError> {
        let hash = content_hash(&record);
        let mut inner = self.inner.write().expect("store lock");
        if let Some(outcome) = inner.index.check(&record.record_id, &hash)? {
            return Ok(outcome);
        }
        let mut stored = StoredRecord {
            received_at,
            offset: inner.end,
            content_hash: hash,
            record,
        };
        let mut line = serde_json::to_vec(&stored).expect("stored record serializes");
        line.push(b'\n');
        let start = inner.end;
        if let Err(e) = inner.file.write_all(&line).and_then(|_| inner.file.sync_data()) {
            // Leave no partial line behind for the next append.
            let _ = inner.file.set_len(start);
            let _ = inner.file.seek(SeekFrom::Start(start));
            return Err(e.into());
        }
        inner.end += line.len() as u64;
        stored.offset = start;
        inner.index.push(stored);
        Ok(IngestOutcome::Created)
    }

    fn get(&self, id: &Uuid) -> Option<Arc<StoredRecord>> {
        let inner = self.inner.read().expect("store lock");
        inner.index.by_id.get(id).map(|&i| inner.index.records[i].clone())
    }

    fn all(&self) -> Vec<Arc<StoredRecord>> {
        self.inner.read().expect("store lock").index.records.clone()
    }

    fn len(&self) -> usize {
        self.inner.read().expect("store lock").index.records.len()
    }
}
