//! Central finite-difference verification of the hand-written backward pass.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::loss::ClassWeights;
use crate::model::{forward_backward, loss_value, Example, Model, ModelInput, Target};
use crate::params::{ModelConfig, ModelParams};
use crate::record::{DiseaseLabels, PatientRecord};
use crate::{Error, Result};

pub const FD_STEP: f64 = 1e-4;
pub const MIN_COORDS_PER_TENSOR: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: &'static str,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.name)
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn grad_check(
    params: &ModelParams,
    example: &Example,
    weights: &ClassWeights,
    tolerance: f64,
    seed: u64,
) -> Result<GradReport> {
    grad_check_with(params, example, weights, tolerance, seed, |g| g)
}

/// Like [`grad_check`], but passes the analytic gradient through `adjust`
/// before comparing. Lets callers confirm the checker catches a broken
/// backward pass.
pub fn grad_check_with(
    params: &ModelParams,
    example: &Example,
    weights: &ClassWeights,
    tolerance: f64,
    seed: u64,
    adjust: impl FnOnce(ModelParams) -> ModelParams,
) -> Result<GradReport> {
    if tolerance <= 0.0 {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let (_, grads) = forward_backward(params, &example.input, &example.target, weights)?;
    let grads = adjust(grads);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut tensors = Vec::new();

    for (ti, name) in ModelParams::TENSOR_NAMES.iter().enumerate() {
        let len = params.tensors()[ti].1.len();
        let coords: Vec<usize> = if len <= MIN_COORDS_PER_TENSOR {
            (0..len).collect()
        } else {
            index::sample(&mut rng, len, MIN_COORDS_PER_TENSOR).into_vec()
        };
        let analytic = grads.tensors()[ti].1;
        let mut worst: f64 = 0.0;
        for &flat in &coords {
            let original = params.tensors()[ti].1.as_slice().expect("contiguous")[flat];
            let mut eval = |value: f64| -> Result<f64> {
                probe.tensors_mut()[ti].1.as_slice_mut().expect("contiguous")[flat] = value;
                loss_value(&probe, &example.input, &example.target, weights)
            };
            let plus = eval(original + FD_STEP)?;
            let minus = eval(original - FD_STEP)?;
            eval(original)?;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.as_slice().expect("contiguous")[flat];
            worst = worst.max(relative_error(a, numeric));
        }
        tensors.push(TensorCheck {
            name,
            coords_checked: coords.len(),
            max_rel_error: worst,
            passed: worst < tolerance,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradReport {
        tolerance,
        max_rel_error,
        tensors,
    })
}

/// Gradient check on a real record through a trained model's preprocessing.
pub fn grad_check_record(model: &Model, record: &PatientRecord, tolerance: f64, seed: u64) -> Result<GradReport> {
    let labels = record
        .labels
        .ok_or_else(|| Error::invalid("gradient check needs a labeled record"))?;
    let example = Example {
        input: model.prepare(record)?,
        target: Target {
            labels,
            onset_day: record.onset_day,
        },
    };
    grad_check(&model.params, &example, &ClassWeights::unit(), tolerance, seed)
}

/// Seeded tiny network (d=8, L=4, K=4) with one random labeled example.
pub fn tiny_case(seed: u64) -> (ModelParams, Example, ClassWeights) {
    let config = ModelConfig {
        d_model: 8,
        heads: 2,
        n_analytes: 4,
        max_len: 4,
        vocab_size: 12,
        ff_hidden: 8,
        lab_hidden: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(config, &mut rng).expect("valid tiny config");
    let tokens = (0..4).map(|_| rng.random_range(2..12u32)).collect();
    let mut labs = vec![0.0; 8];
    for k in 0..4 {
        if k == 0 || rng.random_bool(0.75) {
            labs[k] = rng.random_range(-2.0..2.0);
            labs[4 + k] = 1.0;
        }
    }
    let demo = [0.0, 1.0, 0.0, rng.random_range(0.2..0.9)];
    let example = Example {
        input: ModelInput { tokens, labs, demo },
        target: Target {
            labels: DiseaseLabels {
                diabetes: true,
                heart_disease: false,
                hypertension: rng.random_bool(0.5),
            },
            onset_day: Some(rng.random_range(1..=360)),
        },
    };
    (params, example, ClassWeights { positive: [2.5, 1.5, 4.0] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        for seed in 0..3 {
            let (params, example, weights) = tiny_case(seed);
            let report = grad_check(&params, &example, &weights, 1e-4, seed).unwrap();
            assert!(report.passed(), "seed {seed}: {:#?}", report);
            assert_eq!(report.tensors.len(), ModelParams::TENSOR_NAMES.len());
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let (params, example, weights) = tiny_case(11);
        let report = grad_check_with(&params, &example, &weights, 1e-4, 11, |mut g| {
            g.lab_w2.mapv_inplace(|v| v * 2.0);
            g
        })
        .unwrap();
        assert_eq!(report.failing(), vec!["lab_w2"]);
    }

    #[test]
    fn samples_at_least_twenty_coordinates() {
        let (params, example, weights) = tiny_case(5);
        let report = grad_check(&params, &example, &weights, 1e-4, 5).unwrap();
        for t in &report.tensors {
            let len = params.tensor(t.name).unwrap().len();
            assert_eq!(t.coords_checked, len.min(MIN_COORDS_PER_TENSOR), "{}", t.name);
        }
    }

    #[test]
    fn rejects_non_positive_tolerance() {
        let (params, example, weights) = tiny_case(1);
        assert!(grad_check(&params, &example, &weights, 0.0, 1).is_err());
    }
}
