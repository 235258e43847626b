//! Thresholded per-disease and per-horizon precision / recall / F1, modality
//! ablations, and the fixed-width report table.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::loss::horizon_targets;
use crate::model::{forward, Model, ModelInput};
use crate::record::{Disease, PatientRecord, HORIZON_DAYS};
use crate::vocab::EMPTY_ID;
use crate::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Fused,
    TextOnly,
    LabsOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Fused, Ablation::TextOnly, Ablation::LabsOnly];

    pub fn key(self) -> &'static str {
        match self {
            Ablation::Fused => "fused",
            Ablation::TextOnly => "text_only",
            Ablation::LabsOnly => "labs_only",
        }
    }

    /// Masks the other modality at inference. Text-only drops every analyte
    /// (as if none were measured); labs-only replaces the note with the
    /// empty-note token. Demographics are kept in both.
    pub fn apply(self, input: &ModelInput) -> ModelInput {
        let mut out = input.clone();
        match self {
            Ablation::Fused => {}
            Ablation::TextOnly => out.labs.iter_mut().for_each(|v| *v = 0.0),
            Ablation::LabsOnly => out.tokens = vec![EMPTY_ID],
        }
        out
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.key() == s.replace('-', "_"))
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?} (expected fused, text_only or labs_only)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub n: usize,
    pub n_positive: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    /// Set when precision or recall had a zero denominator and was reported as 0.
    pub zero_denominator: bool,
}

impl BinaryMetrics {
    pub fn from_counts(n: usize, tp: usize, fp: usize, fn_: usize, threshold: f64) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        BinaryMetrics {
            n,
            n_positive: tp + fn_,
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            threshold,
            zero_denominator: tp + fp == 0 || tp + fn_ == 0,
        }
    }

    /// Counts over paired `(predicted, actual)` outcomes.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>, threshold: f64) -> Self {
        let (mut n, mut tp, mut fp, mut fn_) = (0, 0, 0, 0);
        for (pred, actual) in pairs {
            n += 1;
            match (pred, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        Self::from_counts(n, tp, fp, fn_, threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseMetrics {
    pub disease: Disease,
    #[serde(flatten)]
    pub metrics: BinaryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub days: u32,
    #[serde(flatten)]
    pub metrics: BinaryMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ablation: Ablation,
    pub model: String,
    pub split: String,
    pub n_records: usize,
    pub threshold: f64,
    pub diseases: Vec<DiseaseMetrics>,
    pub horizons: Vec<HorizonMetrics>,
}

impl MetricsReport {
    pub fn disease(&self, d: Disease) -> &BinaryMetrics {
        &self.diseases[d.index()].metrics
    }
}

/// Thresholded outcome for one record: disease predictions and actuals, plus
/// horizon predictions and targets (targets absent when onset is unknown).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub predicted: [bool; 3],
    pub actual: [bool; 3],
    pub horizon_predicted: [bool; 4],
    pub horizon_actual: Option<[bool; 4]>,
}

pub fn outcome(model: &Model, record: &PatientRecord, threshold: f64, ablation: Ablation) -> Result<Outcome> {
    let labels = record
        .labels
        .ok_or_else(|| Error::invalid(format!("patient {} is unlabeled", record.patient_id)))?;
    let input = ablation.apply(&model.prepare(record)?);
    let pred = forward(&model.params, &input)?;
    let risks = pred.risks.as_array();
    Ok(Outcome {
        predicted: risks.map(|p| p >= threshold),
        actual: labels.as_array(),
        horizon_predicted: pred.horizons.p_onset_by.map(|p| p >= threshold),
        horizon_actual: horizon_targets(&labels, record.onset_day),
    })
}

pub fn summarize(outcomes: &[Outcome], threshold: f64, ablation: Ablation) -> MetricsReport {
    let diseases = Disease::ALL
        .iter()
        .map(|&d| DiseaseMetrics {
            disease: d,
            metrics: BinaryMetrics::from_pairs(
                outcomes.iter().map(|o| (o.predicted[d.index()], o.actual[d.index()])),
                threshold,
            ),
        })
        .collect();
    let horizons = HORIZON_DAYS
        .iter()
        .enumerate()
        .map(|(j, &days)| HorizonMetrics {
            days,
            metrics: BinaryMetrics::from_pairs(
                outcomes
                    .iter()
                    .filter_map(|o| o.horizon_actual.map(|a| (o.horizon_predicted[j], a[j]))),
                threshold,
            ),
        })
        .collect();
    MetricsReport {
        ablation,
        model: String::new(),
        split: String::new(),
        n_records: outcomes.len(),
        threshold,
        diseases,
        horizons,
    }
}

pub fn evaluate(model: &Model, records: &[PatientRecord], threshold: f64, ablation: Ablation) -> Result<MetricsReport> {
    if !model.is_trained() {
        return Err(Error::State("model has not been trained".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!("threshold {threshold} outside [0, 1]")));
    }
    let outcomes = records
        .iter()
        .map(|r| outcome(model, r, threshold, ablation))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(&outcomes, threshold, ablation))
}

/// `7208` → `"7,208"`.
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Row order of the published results table.
pub const TABLE_ORDER: [Disease; 3] = [Disease::Hypertension, Disease::HeartDisease, Disease::Diabetes];

/// Fixed-width table: one block per disease, one row per report (sorted
/// fused, text_only, labs_only). A `*` marks a zero-denominator metric.
pub fn report_table(reports: &[MetricsReport]) -> String {
    let mut sorted: Vec<&MetricsReport> = reports.iter().collect();
    sorted.sort_by_key(|r| r.ablation);

    let label = |d: Disease| {
        let n = sorted.first().map_or(0, |r| r.disease(d).n_positive);
        format!("{} (n={})", d.display_name(), thousands(n))
    };
    let w0 = TABLE_ORDER.iter().map(|&d| label(d).len()).max().unwrap_or(0).max(12);
    let w1 = 10;

    let mut out = String::new();
    let mut flagged = false;
    let _ = writeln!(out, "{:<w0$}  {:<w1$}  {:>9}  {:>6}  {:>5}", "Disease type", "Model", "Precision", "Recall", "F1");
    let _ = writeln!(out, "{}", "-".repeat(w0 + w1 + 32));
    for d in TABLE_ORDER {
        for (i, r) in sorted.iter().enumerate() {
            let m = r.disease(d);
            let mark = if m.zero_denominator { "*" } else { "" };
            flagged |= m.zero_denominator;
            let head = if i == 0 { label(d) } else { String::new() };
            let _ = writeln!(
                out,
                "{:<w0$}  {:<w1$}  {:>9}  {:>6}  {:>5}",
                head,
                r.ablation.key(),
                format!("{:.2}{mark}", m.precision),
                format!("{:.2}", m.recall),
                format!("{:.2}", m.f1),
            );
        }
    }
    if flagged {
        out.push_str("* zero denominator: no predicted or no actual positives; reported as 0\n");
    }
    out
}

pub const CSV_HEADER: &str = "disease,ablation,n_pos,precision,recall,f1,threshold";

/// Machine-readable form: disease rows, then `horizon_<days>` rows.
pub fn report_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut row = |name: &str, a: Ablation, m: &BinaryMetrics| {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{}",
            a.key(),
            m.n_positive,
            m.precision,
            m.recall,
            m.f1,
            m.threshold
        );
    };
    for r in reports {
        for d in &r.diseases {
            row(d.disease.key(), r.ablation, &d.metrics);
        }
        for h in &r.horizons {
            row(&format!("horizon_{}", h.days), r.ablation, &h.metrics);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_counts() {
        let m = BinaryMetrics::from_counts(20, 7, 3, 3, 0.5);
        assert!((m.precision - 0.7).abs() < 1e-12);
        assert!((m.recall - 0.7).abs() < 1e-12);
        assert!((m.f1 - 0.7).abs() < 1e-12);
        assert_eq!(m.n_positive, 10);
        assert!(!m.zero_denominator);
    }

    #[test]
    fn perfect_and_degenerate_predictors() {
        let actual = [true, false, true, true, false];
        let perfect = BinaryMetrics::from_pairs(actual.iter().map(|&a| (a, a)), 0.5);
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let none = BinaryMetrics::from_pairs(actual.iter().map(|&a| (false, a)), 0.5);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(none.zero_denominator);
    }

    #[test]
    fn thousands_separator() {
        assert_eq!(thousands(0), "0");
        assert_eq!(thousands(999), "999");
        assert_eq!(thousands(7208), "7,208");
        assert_eq!(thousands(1_230_000), "1,230,000");
    }

    fn report(ablation: Ablation, p: f64) -> MetricsReport {
        let m = BinaryMetrics {
            n: 10_000,
            n_positive: 7208,
            tp: 1,
            fp: 1,
            fn_: 1,
            precision: p,
            recall: 0.5,
            f1: 0.5,
            threshold: 0.5,
            zero_denominator: false,
        };
        MetricsReport {
            ablation,
            model: String::new(),
            split: String::new(),
            n_records: 10_000,
            threshold: 0.5,
            diseases: Disease::ALL.iter().map(|&d| DiseaseMetrics { disease: d, metrics: m }).collect(),
            horizons: vec![],
        }
    }

    #[test]
    fn table_labels_rounding_and_order() {
        let t = report_table(&[report(Ablation::LabsOnly, 0.1), report(Ablation::Fused, 0.704999)]);
        assert!(t.contains("Diabetes (n=7,208)"), "{t}");
        assert!(t.contains("0.70"));
        assert!(!t.contains("0.71"));
        let lines: Vec<&str> = t.lines().collect();
        let hyp = lines.iter().position(|l| l.starts_with("Hypertension")).unwrap();
        let heart = lines.iter().position(|l| l.starts_with("Heart disease")).unwrap();
        let diab = lines.iter().position(|l| l.starts_with("Diabetes")).unwrap();
        assert!(hyp < heart && heart < diab);
        assert!(lines[diab].contains("fused"));
        assert!(lines[diab + 1].contains("labs_only"));
        assert!(!t.contains('*'));
    }

    #[test]
    fn csv_shape() {
        let csv = report_csv(&[report(Ablation::TextOnly, 0.25)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some("diabetes,text_only,7208,0.25,0.5,0.5,0.5"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("labs-only".parse::<Ablation>().unwrap(), Ablation::LabsOnly);
        assert_eq!("fused".parse::<Ablation>().unwrap(), Ablation::Fused);
        assert!("both".parse::<Ablation>().is_err());
    }

    #[test]
    fn ablation_masks_one_modality() {
        let input = ModelInput {
            tokens: vec![4, 5, 6],
            labs: vec![0.3, -1.0, 1.0, 1.0],
            demo: [0.0, 1.0, 0.0, 0.5],
        };
        assert_eq!(Ablation::Fused.apply(&input), input);
        let t = Ablation::TextOnly.apply(&input);
        assert_eq!(t.tokens, input.tokens);
        assert!(t.labs.iter().all(|v| *v == 0.0));
        let l = Ablation::LabsOnly.apply(&input);
        assert_eq!(l.tokens, vec![EMPTY_ID]);
        assert_eq!(l.labs, input.labs);
    }
}
