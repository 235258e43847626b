use std::collections::{BTreeMap, HashSet};
use std::sync::RwLock;

use chrono::Utc;
use riskfuse_core::PatientRecord;

use crate::{
    monotone_after, paginate, summarize, validate_patient, Page, PatientQuery, PatientSummary, Result, Storage,
    StoreError, StoredPrediction, VersionedPatient,
};

#[derive(Default)]
struct Inner {
    patients: BTreeMap<String, (VersionedPatient, Vec<StoredPrediction>)>,
    prediction_ids: HashSet<String>,
}

/// Volatile store with the same semantics as [`crate::FileStore`].
#[derive(Default)]
pub struct MemoryStore {
    inner: RwLock<Inner>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|p| p.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|p| p.into_inner())
    }
}

fn not_found(id: &str) -> StoreError {
    StoreError::NotFound {
        kind: "patient",
        id: id.to_string(),
    }
}

impl Storage for MemoryStore {
    fn put_patient(&self, record: &PatientRecord) -> Result<u64> {
        validate_patient(record)?;
        let mut inner = self.write();
        let slot = inner.patients.entry(record.patient_id.clone()).or_insert_with(|| {
            (
                VersionedPatient {
                    record: record.clone(),
                    version: 0,
                    updated_at: Utc::now(),
                },
                Vec::new(),
            )
        });
        slot.0 = VersionedPatient {
            record: record.clone(),
            version: slot.0.version + 1,
            updated_at: Utc::now(),
        };
        Ok(slot.0.version)
    }

    fn get_patient(&self, patient_id: &str) -> Result<VersionedPatient> {
        self.read()
            .patients
            .get(patient_id)
            .map(|(p, _)| p.clone())
            .ok_or_else(|| not_found(patient_id))
    }

    fn list_patients(&self, query: &PatientQuery) -> Result<Page<PatientSummary>> {
        let inner = self.read();
        let all: Vec<PatientSummary> = inner
            .patients
            .values()
            .map(|(p, preds)| summarize(p, preds.last().map(|x| &x.risks), &query.thresholds))
            .filter(|s| query.alert.is_none_or(|want| s.alert == want))
            .collect();
        Ok(paginate(all, query))
    }

    fn put_prediction(&self, prediction: &StoredPrediction) -> Result<StoredPrediction> {
        if prediction.prediction_id.is_empty() {
            return Err(StoreError::Invalid("prediction_id must be non-empty".into()));
        }
        let mut inner = self.write();
        if inner.prediction_ids.contains(&prediction.prediction_id) {
            return Err(StoreError::Invalid(format!(
                "prediction_id {} already stored",
                prediction.prediction_id
            )));
        }
        let Some((_, history)) = inner.patients.get_mut(&prediction.patient_id) else {
            return Err(StoreError::Referential(format!(
                "prediction {} references unknown patient {}",
                prediction.prediction_id, prediction.patient_id
            )));
        };
        let mut stored = prediction.clone();
        stored.created_at = monotone_after(history.last().map(|p| p.created_at), prediction.created_at);
        history.push(stored.clone());
        inner.prediction_ids.insert(stored.prediction_id.clone());
        Ok(stored)
    }

    fn get_latest_prediction(&self, patient_id: &str) -> Result<StoredPrediction> {
        let inner = self.read();
        let (_, history) = inner.patients.get(patient_id).ok_or_else(|| not_found(patient_id))?;
        history.last().cloned().ok_or_else(|| StoreError::NotFound {
            kind: "prediction for patient",
            id: patient_id.to_string(),
        })
    }

    fn prediction_history(&self, patient_id: &str) -> Result<Vec<StoredPrediction>> {
        let inner = self.read();
        let (_, history) = inner.patients.get(patient_id).ok_or_else(|| not_found(patient_id))?;
        Ok(history.clone())
    }

    fn latest_predictions(&self) -> Result<Vec<StoredPrediction>> {
        Ok(self
            .read()
            .patients
            .values()
            .filter_map(|(_, h)| h.last().cloned())
            .collect())
    }
}
