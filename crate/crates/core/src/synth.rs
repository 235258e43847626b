//! Deterministic synthetic EHR cohorts with a planted, recoverable signal.
//!
//! Each disease leaves two traces: keyword sentences in the clinical note
//! (drawn with probability `min(1, 2 · signal_strength · modality_split)`)
//! and shifted analyte means (`LAB_SIGNAL_SCALE · signal_strength ·
//! (1 − modality_split)` standard deviations, scaled per analyte by the
//! catalog's shift table). Everything else in a record is label-independent.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::catalog::{ANALYTES, N_ANALYTES};
use crate::record::{Demographics, DiseaseLabels, LabPanel, PatientRecord, Sex};
use crate::{Error, Result};

pub const GENERATOR_VERSION: &str = "riskfuse-synth/1";

/// Lab mean shift, in SDs, at `signal_strength = 1` and `modality_split = 0`.
pub const LAB_SIGNAL_SCALE: f64 = 4.0;

/// Odds ratio linking diabetes and hypertension.
pub const DIABETES_HYPERTENSION_OR: f64 = 2.0;

pub const DIABETES_KEYWORDS: &[&str] = &["polyuria", "polydipsia", "thirst", "hyperglycemia"];
pub const HEART_KEYWORDS: &[&str] = &["angina", "palpitations", "dyspnea", "orthopnea"];
pub const HYPERTENSION_KEYWORDS: &[&str] = &["hypertensive", "epistaxis", "dizziness"];

/// Keyword lists in disease-head order.
pub const DISEASE_KEYWORDS: [&[&str]; 3] = [DIABETES_KEYWORDS, HEART_KEYWORDS, HYPERTENSION_KEYWORDS];

const BENIGN_SENTENCES: &[&str] = &[
    "Patient seen for routine follow up visit.",
    "Vital signs stable and within normal limits.",
    "Reports good appetite and regular sleep.",
    "No acute distress noted on examination.",
    "Medication list reviewed with the patient.",
    "Lungs clear to auscultation bilaterally.",
    "Abdomen soft and non tender.",
    "Family history reviewed today.",
    "Blood work ordered for annual screening.",
    "Patient denies smoking.",
    "Patient reports occasional alcohol use.",
    "Skin warm and dry without rash.",
];

const ACTIVITIES: &[&str] = &["walking", "swimming", "cycling", "light exercise"];
const FOLLOW_UP: &[&str] = &["three", "six", "twelve"];
const PERIODS: &[&str] = &["weeks", "months"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prevalence {
    pub diabetes: f64,
    pub heart: f64,
    pub hypertension: f64,
}

impl Default for Prevalence {
    fn default() -> Self {
        Prevalence {
            diabetes: 0.204,
            heart: 0.2257,
            hypertension: 0.033,
        }
    }
}

impl Prevalence {
    pub fn as_array(&self) -> [f64; 3] {
        [self.diabetes, self.heart, self.hypertension]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub prevalence: Prevalence,
    pub signal_strength: f64,
    /// Fraction of the signal carried by the note (the rest goes to labs).
    pub modality_split: f64,
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_patients: 1000,
            prevalence: Prevalence::default(),
            signal_strength: 0.9,
            modality_split: 0.5,
            mask_rate: 0.15,
            seed: 42,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients < 10 {
            return Err(Error::Config(format!(
                "n_patients must be at least 10, got {}",
                self.n_patients
            )));
        }
        for (name, rate) in ["diabetes", "heart", "hypertension"]
            .iter()
            .zip(self.prevalence.as_array())
        {
            if !(rate > 0.0 && rate < 1.0) {
                return Err(Error::Config(format!("{name} prevalence {rate} outside (0, 1)")));
            }
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("modality_split", self.modality_split),
            ("mask_rate", self.mask_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn keyword_probability(&self) -> f64 {
        (2.0 * self.signal_strength * self.modality_split).min(1.0)
    }

    pub fn lab_shift_scale(&self) -> f64 {
        LAB_SIGNAL_SCALE * self.signal_strength * (1.0 - self.modality_split)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub config: Option<CohortConfig>,
    pub generator_version: String,
    pub records: Vec<PatientRecord>,
}

/// Conditional hypertension rates `(given diabetes, given no diabetes)` that
/// hit the marginal `target` with the configured odds ratio.
fn conditional_rates(p_diabetes: f64, target: f64, odds_ratio: f64) -> (f64, f64) {
    let given_diabetes = |p0: f64| odds_ratio * p0 / (1.0 - p0 + odds_ratio * p0);
    let marginal = |p0: f64| p_diabetes * given_diabetes(p0) + (1.0 - p_diabetes) * p0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if marginal(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p0 = 0.5 * (lo + hi);
    (given_diabetes(p0), p0)
}

/// Marks exactly `round(rate · pool.len())` members of `pool` positive.
fn assign_quota(pool: &[usize], rate: f64, rng: &mut ChaCha8Rng, out: &mut [bool]) {
    let quota = (rate * pool.len() as f64).round() as usize;
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    for &i in &shuffled[..quota.min(shuffled.len())] {
        out[i] = true;
    }
}

fn sample_labels(config: &CohortConfig, rng: &mut ChaCha8Rng) -> Vec<DiseaseLabels> {
    let n = config.n_patients;
    let everyone: Vec<usize> = (0..n).collect();
    let mut diabetes = vec![false; n];
    let mut heart = vec![false; n];
    let mut hypertension = vec![false; n];
    assign_quota(&everyone, config.prevalence.diabetes, rng, &mut diabetes);
    assign_quota(&everyone, config.prevalence.heart, rng, &mut heart);

    let (with_d, without_d) = conditional_rates(
        config.prevalence.diabetes,
        config.prevalence.hypertension,
        DIABETES_HYPERTENSION_OR,
    );
    let (dia, non): (Vec<usize>, Vec<usize>) = everyone.iter().partition(|&&i| diabetes[i]);
    assign_quota(&dia, with_d, rng, &mut hypertension);
    assign_quota(&non, without_d, rng, &mut hypertension);

    (0..n)
        .map(|i| DiseaseLabels {
            diabetes: diabetes[i],
            heart_disease: heart[i],
            hypertension: hypertension[i],
        })
        .collect()
}

fn benign_sentence(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..BENIGN_SENTENCES.len() + 2) {
        i if i < BENIGN_SENTENCES.len() => BENIGN_SENTENCES[i].to_string(),
        i if i == BENIGN_SENTENCES.len() => format!(
            "Advised to continue {} and balanced diet.",
            ACTIVITIES.choose(rng).expect("non-empty")
        ),
        _ => format!(
            "Follow up in {} months.",
            FOLLOW_UP.choose(rng).expect("non-empty")
        ),
    }
}

fn keyword_sentence(keyword: &str, rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..3) {
        0 => format!("Patient complains of {keyword}."),
        1 => format!(
            "{} reported over the past {}.",
            capitalize(keyword),
            PERIODS.choose(rng).expect("non-empty")
        ),
        _ => format!("History notable for {keyword}."),
    }
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn compose_note(labels: &DiseaseLabels, config: &CohortConfig, rng: &mut ChaCha8Rng) -> String {
    let n_benign = rng.random_range(2..=4);
    let mut sentences: Vec<String> = (0..n_benign).map(|_| benign_sentence(rng)).collect();
    let p_keyword = config.keyword_probability();
    for (d, positive) in labels.as_array().into_iter().enumerate() {
        if positive && rng.random_bool(p_keyword) {
            let keyword = DISEASE_KEYWORDS[d].choose(rng).expect("non-empty");
            let at = rng.random_range(0..=sentences.len());
            sentences.insert(at, keyword_sentence(keyword, rng));
        }
    }
    sentences.join(" ")
}

fn sample_labs(labels: &DiseaseLabels, config: &CohortConfig, rng: &mut ChaCha8Rng) -> LabPanel {
    let y = labels.as_array();
    let scale = config.lab_shift_scale();
    let mut panel = LabPanel::empty(N_ANALYTES);
    for (k, a) in ANALYTES.iter().enumerate() {
        let z: f64 = StandardNormal.sample(rng);
        let shift: f64 = (0..3).filter(|d| y[*d]).map(|d| a.shift[d]).sum::<f64>() * scale;
        let value = (a.mean + a.sd * (z + shift)).clamp(a.min, a.max);
        let value = (value * 100.0).round() / 100.0;
        // The mask draw is consumed for every analyte to keep streams aligned.
        let masked = rng.random_bool(config.mask_rate);
        if !masked {
            panel.set(k, value).expect("clipped values are finite");
        }
    }
    panel
}

fn sample_demographics(rng: &mut ChaCha8Rng) -> Demographics {
    let age: f64 = Normal::new(55.0, 15.0).expect("valid normal").sample(rng);
    let sex = match rng.random_range(0..100) {
        0..49 => Sex::Female,
        49..98 => Sex::Male,
        _ => Sex::Unknown,
    };
    Demographics {
        age: age.round().clamp(18.0, 95.0) as u8,
        sex,
    }
}

pub fn patient_id(i: usize, n: usize) -> String {
    let width = (n.saturating_sub(1)).to_string().len().max(3);
    format!("P{i:0width$}")
}

/// Pure function of `config`.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let labels = sample_labels(config, &mut rng);
    let records = labels
        .into_iter()
        .enumerate()
        .map(|(i, labels)| {
            let demo = sample_demographics(&mut rng);
            let note = compose_note(&labels, config, &mut rng);
            let labs = sample_labs(&labels, config, &mut rng);
            let onset_day = labels.diabetes.then(|| rng.random_range(1..=360));
            PatientRecord {
                patient_id: patient_id(i, config.n_patients),
                note,
                labs,
                demo,
                labels: Some(labels),
                onset_day,
            }
        })
        .collect();
    Ok(Cohort {
        config: Some(*config),
        generator_version: GENERATOR_VERSION.to_string(),
        records,
    })
}

/// The diabetes keyword planted in a note, if any.
pub fn planted_keyword(note: &str, disease_index: usize) -> Option<&'static str> {
    let words: Vec<String> = crate::vocab::split_words(note).into_iter().map(|w| w.text).collect();
    DISEASE_KEYWORDS[disease_index]
        .iter()
        .copied()
        .find(|k| words.iter().any(|w| w == k))
}
