use proptest::prelude::*;
use riskfuse_core::eval::{evaluate, outcome, report_csv, summarize, Ablation, BinaryMetrics, Outcome};
use riskfuse_core::synth::{generate_cohort, CohortConfig, Prevalence};
use riskfuse_core::train::{train, TrainConfig};
use riskfuse_core::{Disease, Error};

fn outcome_strategy() -> impl Strategy<Value = Outcome> {
    (
        prop::array::uniform3(any::<bool>()),
        prop::array::uniform3(any::<bool>()),
        prop::array::uniform4(any::<bool>()),
        prop::option::of(prop::array::uniform4(any::<bool>())),
    )
        .prop_map(|(predicted, actual, horizon_predicted, horizon_actual)| Outcome {
            predicted,
            actual,
            horizon_predicted,
            horizon_actual,
        })
}

/// Confusion counts tallied the long way, separately from the library.
fn recount(outcomes: &[Outcome], d: usize) -> (usize, usize, usize) {
    let tp = outcomes.iter().filter(|o| o.predicted[d] && o.actual[d]).count();
    let fp = outcomes.iter().filter(|o| o.predicted[d] && !o.actual[d]).count();
    let fn_ = outcomes.iter().filter(|o| !o.predicted[d] && o.actual[d]).count();
    (tp, fp, fn_)
}

proptest! {
    #[test]
    fn metrics_equal_naive_recount(outcomes in prop::collection::vec(outcome_strategy(), 0..200)) {
        let report = summarize(&outcomes, 0.5, Ablation::Fused);
        for d in Disease::ALL {
            let m = report.disease(d);
            let (tp, fp, fn_) = recount(&outcomes, d.index());
            prop_assert_eq!((m.tp, m.fp, m.fn_), (tp, fp, fn_));
            prop_assert_eq!(m.n, outcomes.len());
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            prop_assert!((m.precision - p).abs() < 1e-12);
            prop_assert!((m.recall - r).abs() < 1e-12);
            prop_assert!((m.f1 - f).abs() < 1e-12);
        }
        let with_targets = outcomes.iter().filter(|o| o.horizon_actual.is_some()).count();
        prop_assert!(report.horizons.iter().all(|h| h.metrics.n == with_targets));
    }

    #[test]
    fn metrics_ignore_record_order(mut outcomes in prop::collection::vec(outcome_strategy(), 0..100), seed in any::<u64>()) {
        let before = summarize(&outcomes, 0.5, Ablation::Fused);
        let n = outcomes.len().max(1);
        outcomes.rotate_left(seed as usize % n);
        outcomes.reverse();
        prop_assert_eq!(before, summarize(&outcomes, 0.5, Ablation::Fused));
    }

    #[test]
    fn f1_is_harmonic_mean(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
        let m = BinaryMetrics::from_counts(tp + fp + fn_, tp, fp, fn_, 0.5);
        if m.precision + m.recall > 0.0 {
            prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-12);
        } else {
            prop_assert_eq!(m.f1, 0.0);
        }
    }
}

fn small_cohort(n: usize, seed: u64) -> Vec<riskfuse_core::PatientRecord> {
    generate_cohort(&CohortConfig {
        n_patients: n,
        prevalence: Prevalence {
            diabetes: 0.3,
            heart: 0.3,
            hypertension: 0.2,
        },
        seed,
        ..CohortConfig::default()
    })
    .unwrap()
    .records
}

fn tiny_training() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        batch_size: 10,
        learning_rate: 3e-3,
        validation_fraction: 0.0,
        d_model: 16,
        heads: 2,
        ff_hidden: 16,
        lab_hidden: 16,
        min_token_freq: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn training_loss_decreases_on_fifty_records() {
    let out = train(&small_cohort(50, 3), &tiny_training(), 1).unwrap();
    let losses: Vec<f64> = out.log.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses.last().unwrap() < &(0.5 * losses[0]), "{losses:?}");
}

#[test]
fn evaluation_is_order_invariant_on_a_real_model() {
    let data = small_cohort(60, 4);
    let model = train(&data, &tiny_training(), 2).unwrap().model;
    let mut shuffled = data.clone();
    shuffled.reverse();
    shuffled.rotate_left(17);
    for a in Ablation::ALL {
        let x = evaluate(&model, &data, 0.5, a).unwrap();
        let y = evaluate(&model, &shuffled, 0.5, a).unwrap();
        assert_eq!(x, y);
        // The report agrees with a recount over per-record outcomes.
        let outcomes: Vec<Outcome> = data.iter().map(|r| outcome(&model, r, 0.5, a).unwrap()).collect();
        for d in Disease::ALL {
            let (tp, fp, fn_) = recount(&outcomes, d.index());
            let m = x.disease(d);
            assert_eq!((m.tp, m.fp, m.fn_), (tp, fp, fn_));
        }
    }
    let csv = report_csv(&[evaluate(&model, &data, 0.5, Ablation::Fused).unwrap()]);
    assert_eq!(csv.lines().count(), 1 + 3 + 4);
}

#[test]
fn evaluation_rejects_unlabeled_and_untrained() {
    let mut data = small_cohort(30, 5);
    let out = train(&data, &TrainConfig { epochs: 1, ..tiny_training() }, 3).unwrap();
    data[4].labels = None;
    assert!(matches!(evaluate(&out.model, &data, 0.5, Ablation::Fused), Err(Error::InvalidInput(_))));
    let mut untrained = out.model.clone();
    untrained.trained_epochs = 0;
    assert!(matches!(evaluate(&untrained, &data[..3], 0.5, Ablation::Fused), Err(Error::State(_))));
}
