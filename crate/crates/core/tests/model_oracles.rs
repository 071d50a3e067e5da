//! Gradient, training and evaluation contracts for the model core, checked against
//! independent oracles (central finite differences, a logistic-regression fit, counting).

mod common;

use common::finite_difference_errors;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use repairbench_core::data::{Example, Split};
use repairbench_core::model::{self, evaluate, train, Metric, ModelSpec, ModelState, TrainConfig};
use repairbench_core::seed;

fn example(id: u64, input: Vec<f64>, label: usize) -> Example {
    Example {
        id,
        input,
        label,
        tag: String::new(),
        split: Split::Train,
    }
}

fn random_input(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    for s in 0..3 {
        let model = ModelState::init(ModelSpec::mlp(6, &[5, 4], 3), 100 + s).unwrap();
        let x = random_input(6, 200 + s);
        for (name, err) in finite_difference_errors(&model, &x, (s % 3) as usize) {
            assert!(err <= 1e-4, "{name}: relative error {err:e}");
        }
    }
}

#[test]
fn conv_gradient_matches_finite_differences() {
    for s in 0..2 {
        let model = ModelState::init(ModelSpec::conv(2, 5, 4, &[3, 4], 2), 300 + s).unwrap();
        let x = random_input(2 * 5 * 4, 400 + s);
        for (name, err) in finite_difference_errors(&model, &x, s as usize % 2) {
            assert!(err <= 1e-4, "{name}: relative error {err:e}");
        }
    }
}

#[test]
fn identical_examples_identical_gradients_and_features() {
    let model = ModelState::init(ModelSpec::conv(1, 8, 8, &[8, 16, 32], 2), 1).unwrap();
    let x = random_input(64, 2);
    let a = example(0, x.clone(), 1);
    let b = example(1, x, 1);
    let ga = model.per_example_gradient(&a).unwrap();
    assert_eq!(ga.len(), model.num_params());
    assert_eq!(ga, model.per_example_gradient(&b).unwrap());
    let fa = model.penultimate_features(&a.input).unwrap();
    assert_eq!(fa.len(), 32);
    assert_eq!(fa, model.penultimate_features(&b.input).unwrap());
}

#[test]
fn features_invariant_to_spatial_permutation_of_last_map() {
    // A single conv layer whose kernels only use the centre tap is pointwise, so permuting
    // input pixels permutes the last activation map; its spatial average must not change.
    let spec = ModelSpec::conv(1, 4, 4, &[3], 2);
    let layout = spec.layout();
    let mut values = ModelState::init(spec.clone(), 9).unwrap().params.values;
    let w = layout.slot("conv0.weight").unwrap();
    for (j, v) in values[w.range()].iter_mut().enumerate() {
        if j % 9 != 4 {
            *v = 0.0;
        }
    }
    let model = ModelState::from_values(spec, values, 0).unwrap();
    let x = random_input(16, 5);
    let mut perm: Vec<usize> = (0..16).collect();
    perm.reverse();
    perm.swap(3, 11);
    let xp: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
    let f = model.penultimate_features(&x).unwrap();
    let fp = model.penultimate_features(&xp).unwrap();
    for (a, b) in f.iter().zip(&fp) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn blobs(n: usize, seed: u64, id_offset: u64) -> Vec<Example> {
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let c = if label == 0 { -2.0 } else { 2.0 };
            let x = vec![
                c + 0.5 * rng.sample::<f64, _>(StandardNormal),
                c + 0.5 * rng.sample::<f64, _>(StandardNormal),
            ];
            example(id_offset + i as u64, x, label)
        })
        .collect()
}

/// Plain gradient-descent logistic regression, used only as an oracle.
fn logistic_regression_accuracy(data: &[Example]) -> f64 {
    let mut w = [0.0f64; 3];
    for _ in 0..2000 {
        let mut g = [0.0; 3];
        for e in data {
            let z = w[0] * e.input[0] + w[1] * e.input[1] + w[2];
            let p = 1.0 / (1.0 + (-z).exp());
            let d = p - e.label as f64;
            g[0] += d * e.input[0];
            g[1] += d * e.input[1];
            g[2] += d;
        }
        for k in 0..3 {
            w[k] -= 0.1 * g[k] / data.len() as f64;
        }
    }
    let hits = data
        .iter()
        .filter(|e| ((w[0] * e.input[0] + w[1] * e.input[1] + w[2]) > 0.0) as usize == e.label)
        .count();
    hits as f64 / data.len() as f64
}

#[test]
fn separable_blobs_train_to_high_accuracy() {
    let train_set = blobs(2000, 1, 0);
    let val_set = blobs(60, 2, 10_000);
    assert_eq!(logistic_regression_accuracy(&train_set), 1.0);
    let config = TrainConfig {
        seed: 3,
        ..TrainConfig::default()
    };
    let model = ModelState::init(ModelSpec::mlp(2, &[8], 2), 4).unwrap();
    let out = train(&model, &train_set, &val_set, &config).unwrap();
    let acc = evaluate(&out.model, &train_set, Metric::Accuracy)
        .unwrap()
        .score;
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn training_is_bit_deterministic() {
    let train_set = blobs(64, 5, 0);
    let val_set = blobs(16, 6, 1000);
    let config = TrainConfig {
        learning_rate: 1e-3,
        max_epochs: 15,
        seed: 8,
        ..TrainConfig::default()
    };
    let model = ModelState::init(ModelSpec::mlp(2, &[6, 4], 2), 7).unwrap();
    let a = train(&model, &train_set, &val_set, &config).unwrap();
    let b = train(&model, &train_set, &val_set, &config).unwrap();
    let bits = |m: &ModelState| {
        m.params
            .values
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&a.model), bits(&b.model));
    assert_eq!(a.log, b.log);
}

#[test]
fn early_stopping_respects_patience_and_restores_best() {
    // Validation labels are pure noise, so accuracy plateaus quickly.
    let train_set = blobs(64, 9, 0);
    let mut val_set = blobs(20, 10, 1000);
    for (i, e) in val_set.iter_mut().enumerate() {
        e.label = (i / 3) % 2;
    }
    let config = TrainConfig {
        learning_rate: 1e-2,
        patience: 10,
        max_epochs: 200,
        seed: 1,
        ..TrainConfig::default()
    };
    let model = ModelState::init(ModelSpec::mlp(2, &[4], 2), 2).unwrap();
    let out = train(&model, &train_set, &val_set, &config).unwrap();
    let last = out.log.last().unwrap().epoch;
    assert!(last < 200, "never stopped");
    assert!(
        last - out.best_epoch <= 10,
        "stopped at {last}, best {}",
        out.best_epoch
    );
    let best = &out.log[out.best_epoch - 1];
    let restored = evaluate(&out.model, &val_set, Metric::Accuracy).unwrap();
    assert_eq!(restored.score, best.accuracy);
    assert_eq!(restored.loss, best.loss);
}

#[test]
fn constant_predictor_on_balanced_split_scores_half() {
    let spec = ModelSpec::mlp(2, &[2], 2);
    let mut values = vec![0.0; spec.layout().total_len()];
    let bias = spec.layout().slot("head.bias").unwrap().range();
    values[bias.start] = 1.0;
    let model = ModelState::from_values(spec, values, 0).unwrap();
    let split = blobs(100, 11, 0);
    let ev = evaluate(&model, &split, Metric::Accuracy).unwrap();
    assert_eq!(ev.score, 0.5);
    assert_eq!(ev.correct.iter().filter(|c| **c).count(), 50);
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cross_entropy_is_positive(a in -30.0f64..30.0, b in -30.0f64..30.0, c in -30.0f64..30.0, label in 0usize..3) {
        let l = model::loss(&[vec![a, b, c]], &[label]).unwrap();
        prop_assert!(l > 0.0);
    }

    #[test]
    fn evaluation_flags_are_reproducible(seed in 0u64..1000) {
        let model = ModelState::init(ModelSpec::mlp(2, &[3], 2), seed).unwrap();
        let split = blobs(20, seed, 0);
        let a = evaluate(&model, &split, Metric::Accuracy).unwrap();
        let b = evaluate(&model, &split, Metric::Accuracy).unwrap();
        prop_assert_eq!(a.correct.clone(), b.correct);
        let mean = a.correct.iter().filter(|c| **c).count() as f64 / split.len() as f64;
        prop_assert_eq!(a.score, mean);
    }
}
