//! Training objective: positively weighted binary cross-entropy over the three
//! disease outputs plus plain binary cross-entropy over the four cumulative
//! onset horizons whenever the onset outcome is known.

use serde::{Deserialize, Serialize};

use crate::record::{Disease, DiseaseLabels, HorizonRisks, PatientRecord, RiskScores, HORIZON_DAYS};
use crate::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

/// Multiplier on the positive-class term of each disease's cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub positive: [f64; 3],
}

impl ClassWeights {
    pub fn unit() -> Self {
        ClassWeights { positive: [1.0; 3] }
    }

    /// `negatives / positives` per disease over a labeled cohort.
    pub fn from_records(records: &[PatientRecord]) -> Result<Self> {
        let mut pos = [0usize; 3];
        let mut total = 0usize;
        for r in records {
            let labels = r.labels.ok_or_else(|| {
                Error::invalid(format!("patient {} has no labels", r.patient_id))
            })?;
            total += 1;
            for d in Disease::ALL {
                pos[d.index()] += labels.get(d) as usize;
            }
        }
        let mut positive = [1.0; 3];
        for d in Disease::ALL {
            let p = pos[d.index()];
            if p == 0 || p == total {
                return Err(Error::Config(format!(
                    "cohort has {p} positives out of {total} for {}; need at least one of each class",
                    d.key()
                )));
            }
            positive[d.index()] = (total - p) as f64 / p as f64;
        }
        Ok(ClassWeights { positive })
    }
}

/// Cumulative onset targets, or `None` when the onset outcome is unknown
/// (diabetes-positive without a recorded onset day).
pub fn horizon_targets(labels: &DiseaseLabels, onset_day: Option<u32>) -> Option<[bool; 4]> {
    match onset_day {
        Some(day) => Some(HORIZON_DAYS.map(|h| day <= h)),
        None if !labels.diabetes => Some([false; 4]),
        None => None,
    }
}

/// Cross-entropy on a clamped probability and its derivative in `p`
/// (zero where the clamp is active).
fn bce(p: f64, y: bool, pos_weight: f64) -> (f64, f64) {
    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let clamped = pc != p;
    if y {
        (-pos_weight * pc.ln(), if clamped { 0.0 } else { -pos_weight / pc })
    } else {
        (-(1.0 - pc).ln(), if clamped { 0.0 } else { 1.0 / (1.0 - pc) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LossTerms {
    pub value: f64,
    pub d_risk: [f64; 3],
    pub d_horizon: [f64; 4],
}

pub(crate) fn loss_terms(
    risks: &RiskScores,
    horizons: &HorizonRisks,
    labels: &DiseaseLabels,
    onset_day: Option<u32>,
    weights: &ClassWeights,
) -> LossTerms {
    let mut value = 0.0;
    let mut d_risk = [0.0; 3];
    let mut d_horizon = [0.0; 4];
    let p = risks.as_array();
    let y = labels.as_array();
    for c in 0..3 {
        let (v, g) = bce(p[c], y[c], weights.positive[c]);
        value += v;
        d_risk[c] = g;
    }
    if let Some(targets) = horizon_targets(labels, onset_day) {
        for j in 0..4 {
            let (v, g) = bce(horizons.p_onset_by[j], targets[j], 1.0);
            value += v;
            d_horizon[j] = g;
        }
    }
    LossTerms {
        value,
        d_risk,
        d_horizon,
    }
}

pub fn loss(
    risks: &RiskScores,
    horizons: &HorizonRisks,
    labels: Option<&DiseaseLabels>,
    onset_day: Option<u32>,
    weights: &ClassWeights,
) -> Result<f64> {
    let labels = labels.ok_or_else(|| Error::invalid("loss requires disease labels"))?;
    Ok(loss_terms(risks, horizons, labels, onset_day, weights).value)
}
