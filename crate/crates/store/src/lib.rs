//! Persistence for patient records (versioned) and prediction history
//! (append-only) behind the [`Storage`] trait.
//!
//! [`FileStore`] is the durable default: a checksummed append-only log plus a
//! sidecar index, see `file.rs` for the on-disk layout. [`MemoryStore`] has
//! the same semantics without durability and backs unit tests.

mod file;
mod log;
mod memory;

use chrono::{DateTime, Utc};
use riskfuse_core::explain::Explanation;
use riskfuse_core::{Disease, HorizonRisks, PatientRecord, RiskScores};
use serde::{Deserialize, Serialize};

pub use file::{FileStore, INDEX_FILE, LOG_FILE};
pub use log::{FORMAT_VERSION, LOG_MAGIC};
pub use memory::MemoryStore;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{kind} {id:?} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("referential integrity: {0}")]
    Referential(String),
    #[error("invalid write: {0}")]
    Invalid(String),
    #[error("store format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("store corrupt: {0}")]
    Corrupt(String),
    #[error("storage I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl StoreError {
    pub fn is_not_found(&self) -> bool {
        matches!(self, StoreError::NotFound { .. })
    }
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPrediction {
    pub prediction_id: String,
    pub patient_id: String,
    pub created_at: DateTime<Utc>,
    /// Digest of the checkpoint that produced it.
    pub model_version: String,
    pub risks: RiskScores,
    pub horizons: HorizonRisks,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<Explanation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionedPatient {
    pub record: PatientRecord,
    pub version: u64,
    pub updated_at: DateTime<Utc>,
}

/// Per-disease probability at or above which a patient is flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlertThresholds {
    pub diabetes: f64,
    pub heart: f64,
    pub hypertension: f64,
}

impl Default for AlertThresholds {
    fn default() -> Self {
        AlertThresholds {
            diabetes: 0.7,
            heart: 0.7,
            hypertension: 0.5,
        }
    }
}

impl AlertThresholds {
    pub fn get(&self, d: Disease) -> f64 {
        match d {
            Disease::Diabetes => self.diabetes,
            Disease::HeartDisease => self.heart,
            Disease::Hypertension => self.hypertension,
        }
    }

    /// Diseases whose risk meets its threshold.
    pub fn flagged(&self, risks: &RiskScores) -> Vec<Disease> {
        Disease::ALL.into_iter().filter(|&d| risks.get(d) >= self.get(d)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub version: u64,
    pub updated_at: DateTime<Utc>,
    pub has_note: bool,
    pub labs_measured: usize,
    pub latest_risks: Option<RiskScores>,
    pub alert: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatientQuery {
    pub limit: usize,
    pub offset: usize,
    /// `Some(true)`: only alerted patients; `Some(false)`: only the rest.
    pub alert: Option<bool>,
    pub thresholds: AlertThresholds,
}

impl Default for PatientQuery {
    fn default() -> Self {
        PatientQuery {
            limit: 50,
            offset: 0,
            alert: None,
            thresholds: AlertThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: usize,
    pub limit: usize,
    pub offset: usize,
}

/// Narrow persistence interface used by the service. Implementations
/// serialize writes internally and allow concurrent readers.
pub trait Storage: Send + Sync {
    /// Upserts and returns the new version (1 for a new patient). Durable
    /// before returning.
    fn put_patient(&self, record: &PatientRecord) -> Result<u64>;

    fn get_patient(&self, patient_id: &str) -> Result<VersionedPatient>;

    /// Ordered by patient id.
    fn list_patients(&self, query: &PatientQuery) -> Result<Page<PatientSummary>>;

    /// Appends to the patient's history and returns the prediction as
    /// stored: `created_at` is nudged forward if needed so each patient's
    /// history is strictly increasing in time.
    fn put_prediction(&self, prediction: &StoredPrediction) -> Result<StoredPrediction>;

    fn get_latest_prediction(&self, patient_id: &str) -> Result<StoredPrediction>;

    /// Oldest first.
    fn prediction_history(&self, patient_id: &str) -> Result<Vec<StoredPrediction>>;

    /// The newest prediction of every patient that has one, by patient id.
    fn latest_predictions(&self) -> Result<Vec<StoredPrediction>>;
}

fn validate_patient(record: &PatientRecord) -> Result<()> {
    record.validate().map_err(|e| StoreError::Invalid(e.to_string()))
}

fn summarize(v: &VersionedPatient, latest: Option<&RiskScores>, thresholds: &AlertThresholds) -> PatientSummary {
    PatientSummary {
        patient_id: v.record.patient_id.clone(),
        version: v.version,
        updated_at: v.updated_at,
        has_note: !v.record.note.trim().is_empty(),
        labs_measured: v.record.labs.measured_count(),
        latest_risks: latest.copied(),
        alert: latest.is_some_and(|r| !thresholds.flagged(r).is_empty()),
    }
}

/// Strictly after `last` (by at least a microsecond) and not before `wanted`.
fn monotone_after(last: Option<DateTime<Utc>>, wanted: DateTime<Utc>) -> DateTime<Utc> {
    match last {
        Some(t) if wanted <= t => t + chrono::Duration::microseconds(1),
        _ => wanted,
    }
}

fn paginate<T>(mut items: Vec<T>, query: &PatientQuery) -> Page<T> {
    let total = items.len();
    let start = query.offset.min(total);
    let end = start.saturating_add(query.limit).min(total);
    let items = items.drain(start..end).collect();
    Page {
        items,
        total,
        limit: query.limit,
        offset: query.offset,
    }
}
