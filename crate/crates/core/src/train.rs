//! Mini-batch Adam training with exact reverse-mode gradients.

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::loss::ClassWeights;
use crate::model::{forward_backward, loss_value, Example, Model, NormStats, Target};
use crate::params::{ModelConfig, ModelParams};
use crate::record::PatientRecord;
use crate::vocab::{Vocabulary, DEFAULT_MAX_LEN, DEFAULT_MAX_VOCAB, DEFAULT_MIN_FREQ};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub d_model: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub lab_hidden: usize,
    pub max_len: usize,
    pub min_token_freq: usize,
    pub max_vocab: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 32,
            learning_rate: 1e-3,
            validation_fraction: 0.1,
            d_model: 64,
            heads: 4,
            ff_hidden: 128,
            lab_hidden: 64,
            max_len: DEFAULT_MAX_LEN,
            min_token_freq: DEFAULT_MIN_FREQ,
            max_vocab: DEFAULT_MAX_VOCAB,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction {} outside [0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Entry 0 is the loss of the initial parameters; entry `e` the running mean
/// training loss over epoch `e` and the validation loss after it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub log: TrainLog,
    pub weights: ClassWeights,
}

struct Adam {
    m: ModelParams,
    v: ModelParams,
    step: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            });
        }
    }
}

pub fn example_for(model: &Model, record: &PatientRecord) -> Result<Example> {
    let labels = record
        .labels
        .ok_or_else(|| Error::invalid(format!("patient {} has no labels", record.patient_id)))?;
    Ok(Example {
        input: model.prepare(record)?,
        target: Target {
            labels,
            onset_day: record.onset_day,
        },
    })
}

fn mean_loss(params: &ModelParams, examples: &[Example], weights: &ClassWeights) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for ex in examples {
        total += loss_value(params, &ex.input, &ex.target, weights)?;
    }
    Ok(Some(total / examples.len() as f64))
}

/// Trains a fresh model. Deterministic in `(cohort, config, seed)`.
pub fn train(cohort: &[PatientRecord], config: &TrainConfig, seed: u64) -> Result<TrainOutput> {
    config.validate()?;
    if cohort.is_empty() {
        return Err(Error::Config("cannot train on an empty cohort".into()));
    }
    ClassWeights::from_records(cohort)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.shuffle(&mut rng);
    let n_val = (config.validation_fraction * cohort.len() as f64).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val.min(cohort.len() - 1));
    let train_records: Vec<PatientRecord> = train_idx.iter().map(|&i| cohort[i].clone()).collect();

    let weights = ClassWeights::from_records(&train_records)?;
    let vocab = Vocabulary::build(
        train_records.iter().map(|r| r.note.as_str()),
        config.min_token_freq,
        config.max_vocab,
    );
    let n_analytes = cohort[0].labs.len();
    let norm = NormStats::fit(&train_records, n_analytes)?;
    let model_config = ModelConfig {
        d_model: config.d_model,
        heads: config.heads,
        n_analytes,
        max_len: config.max_len,
        vocab_size: vocab.len(),
        ff_hidden: config.ff_hidden,
        lab_hidden: config.lab_hidden,
    };
    let params = ModelParams::init(model_config, &mut rng)?;
    let mut model = Model {
        params,
        norm,
        vocab,
        trained_epochs: 0,
    };

    let train_examples = train_records
        .iter()
        .map(|r| example_for(&model, r))
        .collect::<Result<Vec<_>>>()?;
    let val_examples = val_idx
        .iter()
        .map(|&i| example_for(&model, &cohort[i]))
        .collect::<Result<Vec<_>>>()?;

    let mut log = TrainLog::default();
    log.epochs.push(EpochStats {
        epoch: 0,
        train_loss: mean_loss(&model.params, &train_examples, &weights)?.unwrap_or(0.0),
        val_loss: mean_loss(&model.params, &val_examples, &weights)?,
    });

    let mut adam = Adam::new(&model.params);
    let mut batch_order: Vec<usize> = (0..train_examples.len()).collect();
    for epoch in 1..=config.epochs {
        batch_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in batch_order.chunks(config.batch_size) {
            let mut grads = model.params.zeros_like();
            for &i in batch {
                let ex = &train_examples[i];
                let (l, g) = forward_backward(&model.params, &ex.input, &ex.target, &weights)?;
                epoch_loss += l;
                grads.add_scaled(&g, 1.0);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.update(&mut model.params, &grads, config.learning_rate);
        }
        if !model.params.is_finite() {
            return Err(Error::State(format!("parameters diverged in epoch {epoch}")));
        }
        log.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train_examples.len() as f64,
            val_loss: mean_loss(&model.params, &val_examples, &weights)?,
        });
    }
    model.trained_epochs = config.epochs;
    Ok(TrainOutput {
        model,
        log,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_cohort, CohortConfig};

    fn cohort(n: usize) -> Vec<PatientRecord> {
        generate_cohort(&CohortConfig {
            n_patients: n,
            prevalence: crate::synth::Prevalence {
                diabetes: 0.3,
                heart: 0.3,
                hypertension: 0.2,
            },
            ..CohortConfig::default()
        })
        .unwrap()
        .records
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            d_model: 16,
            heads: 2,
            ff_hidden: 16,
            lab_hidden: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let data = cohort(40);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..small_config()
        };
        let trained = train(&data, &cfg, 3).unwrap();
        let untrained = train(&data, &TrainConfig { epochs: 0, ..cfg }, 3).unwrap();
        assert_eq!(trained.model.params, untrained.model.params);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let data = cohort(40);
        let a = train(&data, &small_config(), 9).unwrap();
        let b = train(&data, &small_config(), 9).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn degenerate_cohort_names_the_disease() {
        let mut data = cohort(40);
        for r in &mut data {
            r.labels.as_mut().unwrap().hypertension = false;
        }
        let err = train(&data, &small_config(), 1).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("hypertension")), "{err}");
    }

    #[test]
    fn unlabeled_record_rejected() {
        let mut data = cohort(40);
        data[3].labels = None;
        assert!(train(&data, &small_config(), 1).is_err());
    }

    #[test]
    fn log_has_initial_entry_and_one_per_epoch() {
        let out = train(&cohort(40), &small_config(), 2).unwrap();
        assert_eq!(out.log.epochs.len(), 3);
        assert_eq!(out.model.trained_epochs, 2);
        assert!(out.log.epochs.iter().all(|e| e.val_loss.is_some()));
    }
}
