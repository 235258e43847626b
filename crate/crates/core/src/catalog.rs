//! The fixed 20-analyte blood panel.
//!
//! Reference means and spreads are typical adult values in conventional US
//! units; `min`/`max` are the physiological clip bounds used by the cohort
//! generator. `shift` is the per-disease displacement of the analyte mean, in
//! standard deviations, at full lab signal (order: diabetes, heart disease,
//! hypertension).

use crate::{Error, Result};

pub const N_ANALYTES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Analyte {
    pub name: &'static str,
    pub unit: &'static str,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub shift: [f64; 3],
}

const fn analyte(
    name: &'static str,
    unit: &'static str,
    mean: f64,
    sd: f64,
    min: f64,
    max: f64,
    shift: [f64; 3],
) -> Analyte {
    Analyte {
        name,
        unit,
        mean,
        sd,
        min,
        max,
        shift,
    }
}

pub const ANALYTES: [Analyte; N_ANALYTES] = [
    analyte("glucose", "mg/dL", 95.0, 12.0, 40.0, 600.0, [1.0, 0.0, 0.0]),
    analyte("hba1c", "%", 5.4, 0.4, 3.5, 16.0, [1.0, 0.0, 0.0]),
    analyte("total_cholesterol", "mg/dL", 190.0, 35.0, 80.0, 400.0, [0.0, 0.5, 0.0]),
    analyte("ldl", "mg/dL", 110.0, 30.0, 30.0, 300.0, [0.0, 1.0, 0.0]),
    analyte("hdl", "mg/dL", 55.0, 14.0, 15.0, 120.0, [0.0, -0.5, 0.0]),
    analyte("triglycerides", "mg/dL", 130.0, 50.0, 30.0, 1000.0, [0.5, 0.0, 0.0]),
    analyte("creatinine", "mg/dL", 0.9, 0.2, 0.3, 10.0, [0.0, 0.0, 0.7]),
    analyte("bun", "mg/dL", 14.0, 4.0, 3.0, 100.0, [0.0, 0.0, 0.3]),
    analyte("egfr", "mL/min/1.73m2", 95.0, 15.0, 5.0, 150.0, [0.0, 0.0, -0.7]),
    analyte("sodium", "mmol/L", 140.0, 2.5, 120.0, 160.0, [0.0, 0.0, 0.8]),
    analyte("potassium", "mmol/L", 4.2, 0.4, 2.5, 7.0, [0.0, 0.0, -0.5]),
    analyte("chloride", "mmol/L", 102.0, 3.0, 85.0, 120.0, [0.0, 0.0, 0.0]),
    analyte("alt", "U/L", 25.0, 10.0, 5.0, 500.0, [0.0, 0.0, 0.0]),
    analyte("ast", "U/L", 24.0, 8.0, 5.0, 500.0, [0.0, 0.0, 0.0]),
    analyte("albumin", "g/dL", 4.3, 0.35, 2.0, 6.0, [0.0, 0.0, 0.0]),
    analyte("hemoglobin", "g/dL", 14.0, 1.5, 6.0, 20.0, [0.0, 0.0, 0.0]),
    analyte("wbc", "10^3/uL", 7.0, 1.8, 1.0, 30.0, [0.0, 0.0, 0.0]),
    analyte("platelets", "10^3/uL", 250.0, 55.0, 20.0, 800.0, [0.0, 0.0, 0.0]),
    analyte("troponin_i", "ng/L", 5.0, 2.5, 0.0, 1000.0, [0.0, 1.0, 0.0]),
    analyte("bnp", "pg/mL", 40.0, 20.0, 0.0, 5000.0, [0.0, 1.0, 0.0]),
];

pub fn index_of(name: &str) -> Option<usize> {
    ANALYTES.iter().position(|a| a.name == name)
}

pub fn name_of(index: usize) -> &'static str {
    ANALYTES.get(index).map(|a| a.name).unwrap_or("analyte")
}

/// Builds a catalog-ordered panel from `(name, value)` pairs. All offending
/// names and values are reported together.
pub fn panel_from_named<'a>(
    entries: impl IntoIterator<Item = (&'a str, f64)>,
) -> Result<crate::LabPanel> {
    let mut panel = crate::LabPanel::empty(N_ANALYTES);
    let mut bad = Vec::new();
    for (name, value) in entries {
        match index_of(name) {
            None => bad.push(format!("{name}: unknown analyte")),
            Some(_) if !value.is_finite() => bad.push(format!("{name}: non-finite value")),
            Some(i) => panel.set(i, value)?,
        }
    }
    if bad.is_empty() {
        Ok(panel)
    } else {
        Err(Error::InvalidInput(bad.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_bounds_sane() {
        for (i, a) in ANALYTES.iter().enumerate() {
            assert_eq!(index_of(a.name), Some(i));
            assert!(a.sd > 0.0 && a.min < a.mean && a.mean < a.max, "{}", a.name);
        }
    }

    #[test]
    fn every_disease_has_lab_signal() {
        for d in 0..3 {
            assert!(ANALYTES.iter().any(|a| a.shift[d] != 0.0));
        }
    }

    #[test]
    fn named_panel_reports_all_offenders() {
        let err = panel_from_named([("glucse", 1.0), ("sodium", f64::NAN), ("hdl", 50.0)])
            .unwrap_err()
            .to_string();
        assert!(err.contains("glucse") && err.contains("sodium"), "{err}");
        let ok = panel_from_named([("hdl", 50.0)]).unwrap();
        assert_eq!(ok.get(4), Some(50.0));
    }
}
