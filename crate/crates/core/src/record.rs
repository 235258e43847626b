//! Patient-level domain types shared by the model, the store and the service.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// Onset horizons, in days, for new-onset diabetes risk.
pub const HORIZON_DAYS: [u32; 4] = [90, 180, 270, 360];

pub const MAX_AGE: u8 = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

impl Sex {
    pub fn one_hot(self) -> [f64; 3] {
        match self {
            Sex::Female => [1.0, 0.0, 0.0],
            Sex::Male => [0.0, 1.0, 0.0],
            Sex::Unknown => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    pub age: u8,
    pub sex: Sex,
}

impl Demographics {
    pub fn validate(&self) -> Result<()> {
        if self.age > MAX_AGE {
            return Err(Error::invalid(format!(
                "age {} outside 0..={MAX_AGE}",
                self.age
            )));
        }
        Ok(())
    }
}

/// Fixed-order analyte measurements with a presence mask.
///
/// Serialized as a list of numbers where unmeasured analytes are `null`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabPanel {
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl LabPanel {
    /// A panel of `k` analytes with nothing measured.
    pub fn empty(k: usize) -> Self {
        LabPanel {
            values: vec![0.0; k],
            mask: vec![false; k],
        }
    }

    pub fn from_options(values: &[Option<f64>]) -> Result<Self> {
        let mut panel = LabPanel::empty(values.len());
        for (i, v) in values.iter().enumerate() {
            if let Some(v) = v {
                panel.set(i, *v)?;
            }
        }
        Ok(panel)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.mask[i].then_some(self.values[i])
    }

    pub fn is_measured(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn set(&mut self, i: usize, value: f64) -> Result<()> {
        if i >= self.values.len() {
            return Err(Error::invalid(format!(
                "analyte index {i} out of range for a {}-analyte panel",
                self.values.len()
            )));
        }
        if !value.is_finite() {
            return Err(Error::invalid(format!("analyte {i} has non-finite value {value}")));
        }
        self.values[i] = value;
        self.mask[i] = true;
        Ok(())
    }

    pub fn clear(&mut self, i: usize) {
        self.values[i] = 0.0;
        self.mask[i] = false;
    }

    pub fn measured_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Indices of measured analytes, in catalog order.
    pub fn measured(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
    }

    pub fn to_options(&self) -> Vec<Option<f64>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Overlays every measured entry of `other` onto this panel.
    pub fn merge(&mut self, other: &LabPanel) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::invalid(format!(
                "cannot merge a {}-analyte panel into a {}-analyte panel",
                other.len(),
                self.len()
            )));
        }
        for i in other.measured() {
            self.set(i, other.values[i])?;
        }
        Ok(())
    }
}

impl Serialize for LabPanel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_options().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LabPanel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<Option<f64>>::deserialize(deserializer)?;
        LabPanel::from_options(&values).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Disease {
    Diabetes,
    #[serde(rename = "heart")]
    HeartDisease,
    Hypertension,
}

impl Disease {
    /// Output order of the disease head.
    pub const ALL: [Disease; 3] = [Disease::Diabetes, Disease::HeartDisease, Disease::Hypertension];

    pub fn index(self) -> usize {
        match self {
            Disease::Diabetes => 0,
            Disease::HeartDisease => 1,
            Disease::Hypertension => 2,
        }
    }

    /// Machine key used in URLs, CSV files and configs.
    pub fn key(self) -> &'static str {
        match self {
            Disease::Diabetes => "diabetes",
            Disease::HeartDisease => "heart",
            Disease::Hypertension => "hypertension",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Disease::Diabetes => "Diabetes",
            Disease::HeartDisease => "Heart disease",
            Disease::Hypertension => "Hypertension",
        }
    }
}

impl fmt::Display for Disease {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Disease {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diabetes" => Ok(Disease::Diabetes),
            "heart" | "heart_disease" => Ok(Disease::HeartDisease),
            "hypertension" => Ok(Disease::Hypertension),
            other => Err(Error::invalid(format!("unknown disease '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseLabels {
    pub diabetes: bool,
    pub heart_disease: bool,
    pub hypertension: bool,
}

impl DiseaseLabels {
    pub fn get(&self, disease: Disease) -> bool {
        match disease {
            Disease::Diabetes => self.diabetes,
            Disease::HeartDisease => self.heart_disease,
            Disease::Hypertension => self.hypertension,
        }
    }

    pub fn as_array(&self) -> [bool; 3] {
        [self.diabetes, self.heart_disease, self.hypertension]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub note: String,
    pub labs: LabPanel,
    pub demo: Demographics,
    #[serde(default)]
    pub labels: Option<DiseaseLabels>,
    #[serde(default)]
    pub onset_day: Option<u32>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::invalid("patient_id must be non-empty"));
        }
        self.demo.validate()
    }

    /// True when there is something to predict from.
    pub fn has_inputs(&self) -> bool {
        !self.note.trim().is_empty() || self.labs.measured_count() > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskScores {
    pub p_diabetes: f64,
    pub p_heart: f64,
    pub p_hypertension: f64,
}

impl RiskScores {
    pub fn from_array(p: [f64; 3]) -> Self {
        RiskScores {
            p_diabetes: p[0],
            p_heart: p[1],
            p_hypertension: p[2],
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_diabetes, self.p_heart, self.p_hypertension]
    }

    pub fn get(&self, disease: Disease) -> f64 {
        self.as_array()[disease.index()]
    }
}

/// Cumulative probability of diabetes onset by each of [`HORIZON_DAYS`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonRisks {
    pub p_onset_by: [f64; 4],
}

impl HorizonRisks {
    pub fn get(&self, days: u32) -> Option<f64> {
        HORIZON_DAYS
            .iter()
            .position(|d| *d == days)
            .map(|i| self.p_onset_by[i])
    }

    pub fn is_monotone(&self) -> bool {
        self.p_onset_by.windows(2).all(|w| w[0] <= w[1])
    }
}

#[derive(Serialize, Deserialize)]
struct HorizonDoc {
    #[serde(rename = "90")]
    d90: f64,
    #[serde(rename = "180")]
    d180: f64,
    #[serde(rename = "270")]
    d270: f64,
    #[serde(rename = "360")]
    d360: f64,
}

impl Serialize for HorizonRisks {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let [d90, d180, d270, d360] = self.p_onset_by;
        HorizonDoc {
            d90,
            d180,
            d270,
            d360,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HorizonRisks {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = HorizonDoc::deserialize(deserializer)?;
        Ok(HorizonRisks {
            p_onset_by: [doc.d90, doc.d180, doc.d270, doc.d360],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lab_panel_serializes_masked_as_null() {
        let panel = LabPanel::from_options(&[Some(101.5), None, Some(4.2)]).unwrap();
        let json = serde_json::to_string(&panel).unwrap();
        assert_eq!(json, "[101.5,null,4.2]");
        let back: LabPanel = serde_json::from_str(&json).unwrap();
        assert_eq!(back, panel);
        assert_eq!(back.measured_count(), 2);
    }

    #[test]
    fn lab_panel_rejects_non_finite() {
        let mut panel = LabPanel::empty(2);
        assert!(panel.set(0, f64::NAN).is_err());
        assert!(panel.set(1, f64::INFINITY).is_err());
        assert!(panel.set(2, 1.0).is_err());
    }

    #[test]
    fn merge_overlays_measured_entries() {
        let mut base = LabPanel::from_options(&[Some(1.0), None, Some(3.0)]).unwrap();
        let update = LabPanel::from_options(&[None, Some(2.0), Some(9.0)]).unwrap();
        base.merge(&update).unwrap();
        assert_eq!(base.to_options(), vec![Some(1.0), Some(2.0), Some(9.0)]);
    }

    #[test]
    fn horizon_document_uses_day_keys() {
        let h = HorizonRisks {
            p_onset_by: [0.1, 0.2, 0.3, 0.4],
        };
        let json = serde_json::to_string(&h).unwrap();
        assert_eq!(json, r#"{"90":0.1,"180":0.2,"270":0.3,"360":0.4}"#);
        assert_eq!(h.get(270), Some(0.3));
        assert_eq!(h.get(100), None);
    }

    #[test]
    fn disease_keys_round_trip() {
        for d in Disease::ALL {
            assert_eq!(d.key().parse::<Disease>().unwrap(), d);
        }
        assert!("glucose".parse::<Disease>().is_err());
    }

    #[test]
    fn demographics_age_bound() {
        let d = Demographics {
            age: 121,
            sex: Sex::Male,
        };
        assert!(d.validate().is_err());
    }
}
