use chrono::{TimeZone, Utc};
use riskfuse_core::{Demographics, HorizonRisks, LabPanel, PatientRecord, RiskScores, Sex};
use riskfuse_store::StoredPrediction;

pub fn patient(id: &str, note: &str) -> PatientRecord {
    let mut labs = LabPanel::empty(20);
    labs.set(0, 101.5).unwrap();
    PatientRecord {
        patient_id: id.to_string(),
        note: note.to_string(),
        labs,
        demo: Demographics { age: 54, sex: Sex::Female },
        labels: None,
        onset_day: None,
    }
}

pub fn prediction(id: &str, patient_id: &str, secs: i64, p_diabetes: f64) -> StoredPrediction {
    StoredPrediction {
        prediction_id: id.to_string(),
        patient_id: patient_id.to_string(),
        created_at: Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap(),
        model_version: "test".into(),
        risks: RiskScores::from_array([p_diabetes, 0.1, 0.1]),
        horizons: HorizonRisks { p_onset_by: [0.1, 0.2, 0.3, 0.4] },
        explanation: None,
    }
}
