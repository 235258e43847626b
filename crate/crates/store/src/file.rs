//! File-backed store.
//!
//! A store is a directory holding two files:
//!
//! * `store.log` — the source of truth. A versioned header followed by
//!   length-prefixed, CRC-32-checked JSON entries, each either a patient
//!   version or a prediction. Every write is appended and `fsync`ed before
//!   it is acknowledged.
//! * `store.idx` — a JSON snapshot of where each patient's latest version
//!   and predictions live in the log, plus how many log bytes it covers.
//!   Replaced atomically (temp file + rename) every few writes and on drop.
//!
//! Opening loads the index, replays any log entries written after it, and
//! truncates a torn final frame left by a crash. A missing, stale or
//! unreadable index is rebuilt from the log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use riskfuse_core::{PatientRecord, RiskScores};
use serde::{Deserialize, Serialize};

use crate::log::{check_header, frame, frame_len, header, read_frame, FORMAT_VERSION, HEADER_LEN};
use crate::{
    monotone_after, paginate, summarize, validate_patient, Page, PatientQuery, PatientSummary, Result, Storage,
    StoreError, StoredPrediction, VersionedPatient,
};

pub const LOG_FILE: &str = "store.log";
pub const INDEX_FILE: &str = "store.idx";
const INDEX_EVERY: u64 = 64;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Entry {
    Patient {
        version: u64,
        updated_at: DateTime<Utc>,
        record: PatientRecord,
    },
    Prediction {
        prediction: StoredPrediction,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PatientEntry {
    version: u64,
    offset: u64,
    predictions: Vec<u64>,
    latest_created: Option<DateTime<Utc>>,
    latest_risks: Option<RiskScores>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Index {
    format_version: u32,
    /// Log bytes reflected in this index.
    log_len: u64,
    patients: BTreeMap<String, PatientEntry>,
    prediction_ids: BTreeSet<String>,
}

impl Index {
    fn empty() -> Self {
        Index {
            format_version: FORMAT_VERSION,
            log_len: HEADER_LEN,
            patients: BTreeMap::new(),
            prediction_ids: BTreeSet::new(),
        }
    }

    fn apply(&mut self, offset: u64, entry: Entry) -> Result<()> {
        match entry {
            Entry::Patient { version, record, .. } => {
                let e = self.patients.entry(record.patient_id).or_insert(PatientEntry {
                    version: 0,
                    offset,
                    predictions: Vec::new(),
                    latest_created: None,
                    latest_risks: None,
                });
                e.version = version;
                e.offset = offset;
            }
            Entry::Prediction { prediction } => {
                let e = self.patients.get_mut(&prediction.patient_id).ok_or_else(|| {
                    StoreError::Corrupt(format!(
                        "prediction {} at byte {offset} references unknown patient {}",
                        prediction.prediction_id, prediction.patient_id
                    ))
                })?;
                e.predictions.push(offset);
                e.latest_created = Some(prediction.created_at);
                e.latest_risks = Some(prediction.risks);
                self.prediction_ids.insert(prediction.prediction_id);
            }
        }
        Ok(())
    }
}

struct Inner {
    dir: PathBuf,
    log: File,
    index: Index,
    writes_since_index: u64,
    /// Set when a failed append could not be rolled back; further writes
    /// are refused so garbage never sits in front of acknowledged data.
    poisoned: bool,
}

pub struct FileStore {
    inner: RwLock<Inner>,
}

fn sync_dir(dir: &Path) -> Result<()> {
    File::open(dir)?.sync_all()?;
    Ok(())
}

fn decode(payload: &[u8], offset: u64) -> Result<Entry> {
    serde_json::from_slice(payload)
        .map_err(|e| StoreError::Corrupt(format!("entry at byte {offset} passed its checksum but is unreadable: {e}")))
}

fn load_index(dir: &Path, log_len: u64) -> Option<Index> {
    let bytes = fs::read(dir.join(INDEX_FILE)).ok()?;
    let index: Index = serde_json::from_slice(&bytes).ok()?;
    (index.format_version == FORMAT_VERSION && index.log_len >= HEADER_LEN && index.log_len <= log_len).then_some(index)
}

impl FileStore {
    /// Opens (creating if needed) the store in `dir`, recovering from any
    /// interrupted write.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let log_path = dir.join(LOG_FILE);
        let log = OpenOptions::new().read(true).append(true).create(true).open(&log_path)?;

        let mut len = log.metadata()?.len();
        if len < HEADER_LEN {
            // Fresh store, or a crash while the header was being written.
            log.set_len(0)?;
            (&log).write_all(&header())?;
            log.sync_all()?;
            sync_dir(&dir)?;
            len = HEADER_LEN;
        } else {
            let mut h = [0u8; HEADER_LEN as usize];
            std::os::unix::fs::FileExt::read_exact_at(&log, &mut h, 0)?;
            check_header(&h)?;
        }

        let loaded = load_index(&dir, len);
        let stale = loaded.is_none();
        let mut index = loaded.unwrap_or_else(Index::empty);

        let mut offset = index.log_len;
        let mut replayed = 0;
        while let Some(payload) = read_frame(&log, offset, len)? {
            index.apply(offset, decode(&payload, offset)?)?;
            offset += frame_len(payload.len());
            replayed += 1;
        }
        if offset < len {
            log.set_len(offset)?;
            log.sync_all()?;
        }
        index.log_len = offset;

        let mut inner = Inner {
            dir,
            log,
            index,
            writes_since_index: 0,
            poisoned: false,
        };
        if stale || replayed > 0 {
            inner.save_index()?;
        }
        Ok(FileStore {
            inner: RwLock::new(inner),
        })
    }

    pub fn dir(&self) -> PathBuf {
        self.read().dir.clone()
    }

    /// Writes the index snapshot now.
    pub fn checkpoint_index(&self) -> Result<()> {
        self.write().save_index()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|p| p.into_inner())
    }
}

impl Inner {
    fn save_index(&mut self) -> Result<()> {
        let tmp = self.dir.join(format!("{INDEX_FILE}.tmp"));
        let bytes = serde_json::to_vec(&self.index).map_err(std::io::Error::from)?;
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(INDEX_FILE))?;
        sync_dir(&self.dir)?;
        self.writes_since_index = 0;
        Ok(())
    }

    /// Appends one entry durably; returns its offset.
    fn append(&mut self, entry: &Entry) -> Result<u64> {
        if self.poisoned {
            return Err(StoreError::Io(std::io::Error::other(
                "store refused write after an earlier unrecoverable write failure",
            )));
        }
        let payload = serde_json::to_vec(entry).map_err(std::io::Error::from)?;
        let offset = self.index.log_len;
        let bytes = frame(&payload);
        let written = (&self.log).write_all(&bytes).and_then(|_| self.log.sync_data());
        if let Err(e) = written {
            if self.log.set_len(offset).and_then(|_| self.log.sync_all()).is_err() {
                self.poisoned = true;
            }
            return Err(e.into());
        }
        self.index.log_len = offset + bytes.len() as u64;
        Ok(offset)
    }

    fn after_write(&mut self) {
        self.writes_since_index += 1;
        if self.writes_since_index >= INDEX_EVERY {
            // The log already holds the write; a failed snapshot only
            // means a longer replay on the next open.
            let _ = self.save_index();
        }
    }

    fn entry_at(&self, offset: u64) -> Result<Entry> {
        let payload = read_frame(&self.log, offset, self.index.log_len)?
            .ok_or_else(|| StoreError::Corrupt(format!("no valid entry at byte {offset}")))?;
        decode(&payload, offset)
    }

    fn patient_at(&self, offset: u64) -> Result<VersionedPatient> {
        match self.entry_at(offset)? {
            Entry::Patient {
                version,
                updated_at,
                record,
            } => Ok(VersionedPatient {
                record,
                version,
                updated_at,
            }),
            Entry::Prediction { .. } => Err(StoreError::Corrupt(format!("expected a patient at byte {offset}"))),
        }
    }

    fn prediction_at(&self, offset: u64) -> Result<StoredPrediction> {
        match self.entry_at(offset)? {
            Entry::Prediction { prediction } => Ok(prediction),
            Entry::Patient { .. } => Err(StoreError::Corrupt(format!("expected a prediction at byte {offset}"))),
        }
    }

    fn patient_entry(&self, patient_id: &str) -> Result<&PatientEntry> {
        self.index.patients.get(patient_id).ok_or_else(|| StoreError::NotFound {
            kind: "patient",
            id: patient_id.to_string(),
        })
    }
}

impl Drop for FileStore {
    fn drop(&mut self) {
        let inner = self.inner.get_mut().unwrap_or_else(|p| p.into_inner());
        if inner.writes_since_index > 0 && !inner.poisoned {
            let _ = inner.save_index();
        }
    }
}

impl Storage for FileStore {
    fn put_patient(&self, record: &PatientRecord) -> Result<u64> {
        validate_patient(record)?;
        let mut inner = self.write();
        let version = inner.index.patients.get(&record.patient_id).map_or(0, |e| e.version) + 1;
        let entry = Entry::Patient {
            version,
            updated_at: Utc::now(),
            record: record.clone(),
        };
        let offset = inner.append(&entry)?;
        inner.index.apply(offset, entry)?;
        inner.after_write();
        Ok(version)
    }

    fn get_patient(&self, patient_id: &str) -> Result<VersionedPatient> {
        let inner = self.read();
        let offset = inner.patient_entry(patient_id)?.offset;
        inner.patient_at(offset)
    }

    fn list_patients(&self, query: &PatientQuery) -> Result<Page<PatientSummary>> {
        let inner = self.read();
        let matching: Vec<(&String, &PatientEntry)> = inner
            .index
            .patients
            .iter()
            .filter(|(_, e)| {
                query.alert.is_none_or(|want| {
                    let alert = e.latest_risks.is_some_and(|r| !query.thresholds.flagged(&r).is_empty());
                    alert == want
                })
            })
            .collect();
        let page = paginate(matching, query);
        let items = page
            .items
            .iter()
            .map(|(_, e)| Ok(summarize(&inner.patient_at(e.offset)?, e.latest_risks.as_ref(), &query.thresholds)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Page {
            items,
            total: page.total,
            limit: page.limit,
            offset: page.offset,
        })
    }

    fn put_prediction(&self, prediction: &StoredPrediction) -> Result<StoredPrediction> {
        if prediction.prediction_id.is_empty() {
            return Err(StoreError::Invalid("prediction_id must be non-empty".into()));
        }
        let mut inner = self.write();
        let last = match inner.index.patients.get(&prediction.patient_id) {
            Some(e) => e.latest_created,
            None => {
                return Err(StoreError::Referential(format!(
                    "prediction {} references unknown patient {}",
                    prediction.prediction_id, prediction.patient_id
                )))
            }
        };
        if inner.index.prediction_ids.contains(&prediction.prediction_id) {
            return Err(StoreError::Invalid(format!(
                "prediction_id {} already stored",
                prediction.prediction_id
            )));
        }
        let mut stored = prediction.clone();
        stored.created_at = monotone_after(last, prediction.created_at);
        let entry = Entry::Prediction {
            prediction: stored.clone(),
        };
        let offset = inner.append(&entry)?;
        inner.index.apply(offset, entry)?;
        inner.after_write();
        Ok(stored)
    }

    fn get_latest_prediction(&self, patient_id: &str) -> Result<StoredPrediction> {
        let inner = self.read();
        let offset = *inner
            .patient_entry(patient_id)?
            .predictions
            .last()
            .ok_or_else(|| StoreError::NotFound {
                kind: "prediction for patient",
                id: patient_id.to_string(),
            })?;
        inner.prediction_at(offset)
    }

    fn prediction_history(&self, patient_id: &str) -> Result<Vec<StoredPrediction>> {
        let inner = self.read();
        let offsets = inner.patient_entry(patient_id)?.predictions.clone();
        offsets.into_iter().map(|o| inner.prediction_at(o)).collect()
    }

    fn latest_predictions(&self) -> Result<Vec<StoredPrediction>> {
        let inner = self.read();
        let offsets: Vec<u64> = inner
            .index
            .patients
            .values()
            .filter_map(|e| e.predictions.last().copied())
            .collect();
        offsets.into_iter().map(|o| inner.prediction_at(o)).collect()
    }
}
