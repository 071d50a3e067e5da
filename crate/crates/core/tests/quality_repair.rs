//! Quality scores, the compatibility constraint, Fisher and EWC, and repair evaluation,
//! checked against arithmetic and finite-difference oracles and on the planted benchmark.

mod common;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use repairbench_core::data::Example;
use repairbench_core::model::{evaluate, Metric, TrainConfig};
use repairbench_core::quality::{
    build_matrix, compatibility_finetune, independence, learnability, CompatibilityConfig,
};
use repairbench_core::repair::{
    evaluate_repair, ewc_penalty, ewc_penalty_gradient, fisher_diagonal, read_repair_reports,
    repair, write_repair_reports, RepairPlan, Strategy as Plan, RETENTION_THRESHOLD,
};
use repairbench_core::seed;

#[test]
fn independence_hand_case() {
    let m = vec![
        vec![0.9, 0.2, 0.1],
        vec![0.3, 0.8, 0.3],
        vec![0.0, 0.5, 0.5],
    ];
    assert_eq!(independence(&m, 0).unwrap(), 0.75);
    assert_eq!(learnability(&m, 0), 0.9);
    assert_eq!(learnability(&m, 1), 0.8);
    assert!(independence(&[vec![1.0]], 0).is_err());
}

#[test]
fn independence_extremes() {
    let constant = vec![vec![0.4; 4]; 4];
    let identity: Vec<Vec<f64>> = (0..4)
        .map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect())
        .collect();
    for i in 0..4 {
        assert_eq!(independence(&constant, i).unwrap(), 0.0);
        assert_eq!(independence(&identity, i).unwrap(), 1.0);
    }
}

fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..7).prop_flat_map(|t| prop::collection::vec(prop::collection::vec(0.0f64..=1.0, t), t))
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn independence_ignores_row_shifts(m in matrix_strategy(), c in -1.0f64..1.0, row in 0usize..7) {
        let i = row % m.len();
        let mut shifted = m.clone();
        shifted[i].iter_mut().for_each(|v| *v += c);
        let a = independence(&m, i).unwrap();
        let b = independence(&shifted, i).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        prop_assert!((-1.0..=1.0).contains(&a));
    }

    #[test]
    fn mean_independence_identity(m in matrix_strategy()) {
        let t = m.len();
        let mean_i = (0..t).map(|i| independence(&m, i).unwrap()).sum::<f64>() / t as f64;
        let diag = (0..t).map(|i| m[i][i]).sum::<f64>() / t as f64;
        let off = (0..t)
            .map(|i| (0..t).filter(|&j| j != i).map(|j| m[i][j]).sum::<f64>() / (t - 1) as f64)
            .sum::<f64>()
            / t as f64;
        prop_assert!((mean_i - (diag - off)).abs() < 1e-12);
    }
}

fn short_config() -> CompatibilityConfig {
    CompatibilityConfig {
        train: TrainConfig {
            max_epochs: 30,
            ..TrainConfig::finetune()
        },
        ..CompatibilityConfig::default()
    }
}

#[test]
fn matrix_rows_respect_the_constraint_and_reproduce_bitwise() {
    let s = common::subtyped(0);
    let config = short_config();
    let a = build_matrix(&s.model, &s.partition, &config).unwrap();
    let b = build_matrix(&s.model, &s.partition, &config).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.values.len(), s.partition.eligible_ids().len());
    for (i, log) in a.logs.iter().enumerate() {
        match a.best_epochs[i] {
            Some(e) => {
                let rec = &log[e - 1];
                assert_eq!(rec.epoch, e);
                assert!(
                    rec.eligible && rec.constraint.unwrap() >= config.threshold,
                    "row {i}: {rec:?}"
                );
            }
            None => assert!(a.unrepairable[i]),
        }
        for v in a.values[i].iter().chain([&a.correct[i]]) {
            assert!((0.0..=1.0).contains(v));
        }
    }
}

#[test]
fn unsatisfiable_constraint_returns_the_input_model() {
    let s = common::subtyped(0);
    let (_, f) = s.partition.eligible().next().unwrap();
    // The same input under both labels caps correct-case accuracy at one half.
    let x = s.partition.correct.val[0].clone();
    let twin = Example {
        label: 1 - x.label,
        ..x.clone()
    };
    let out = compatibility_finetune(
        &s.model,
        &f.train,
        &f.val,
        &s.partition.correct.train,
        &[x, twin],
        &short_config(),
    )
    .unwrap();
    assert!(out.unrepairable);
    assert_eq!(out.best_epoch, None);
    assert_eq!(out.model.params.values, s.model.params.values);
    assert!(out.log.iter().all(|r| !r.eligible));
}

#[test]
fn vanishing_threshold_leaves_every_epoch_eligible() {
    let s = common::subtyped(0);
    let (_, f) = s.partition.eligible().next().unwrap();
    let config = CompatibilityConfig {
        threshold: f64::MIN_POSITIVE,
        ..short_config()
    };
    let c = &s.partition.correct;
    let out =
        compatibility_finetune(&s.model, &f.train, &f.val, &c.train, &c.val, &config).unwrap();
    assert!(!out.unrepairable);
    assert!(out.log.iter().all(|r| r.eligible));
    let best = out.best_epoch.unwrap();
    let top = out.log.iter().map(|r| r.accuracy).fold(f64::MIN, f64::max);
    assert_eq!(out.log[best - 1].accuracy, top);
    assert!(out.log[best - 1].accuracy > 0.0);
}

#[test]
fn fisher_of_one_example_is_the_squared_gradient() {
    let s = common::subtyped(0);
    let e = &s.partition.correct.train[0];
    let g = s.model.per_example_gradient(e).unwrap();
    let f = fisher_diagonal(&s.model, std::slice::from_ref(e), "one").unwrap();
    for (v, x) in f.values.iter().zip(&g) {
        assert_eq!(*v, x * x);
    }
    assert_eq!(f.anchor, s.model.params.values);
    let full = fisher_diagonal(&s.model, &s.partition.correct.train, "C_tr").unwrap();
    assert!(full.values.iter().all(|v| *v >= 0.0));
    assert!(full.values.iter().any(|v| *v > 0.0));
    assert!(fisher_diagonal(&s.model, &[], "empty").is_err());
}

#[test]
fn ewc_gradient_matches_finite_differences() {
    let mut rng = seed::rng(9);
    let n = 50;
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let fisher = repairbench_core::repair::FisherDiagonal {
        values: (0..n).map(|_| normal().abs()).collect(),
        anchor: (0..n).map(|_| normal()).collect(),
        source: "synthetic".into(),
    };
    let params: Vec<f64> = (0..n).map(|_| normal()).collect();
    let lambda = 3.7;
    let grad = ewc_penalty_gradient(&params, &fisher, lambda).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let mut p = params.clone();
        p[k] += h;
        let up = ewc_penalty(&p, &fisher, lambda);
        p[k] -= 2.0 * h;
        let down = ewc_penalty(&p, &fisher, lambda);
        worst = worst.max(((up - down) / (2.0 * h) - grad[k]).abs());
    }
    println!("max |analytic - central difference| = {worst:.3e}");
    assert!(worst <= 1e-8);
    let doubled = ewc_penalty_gradient(&params, &fisher, 2.0 * lambda).unwrap();
    assert!(doubled.iter().zip(&grad).all(|(d, g)| *d == 2.0 * g));
    let at_anchor = ewc_penalty_gradient(&fisher.anchor, &fisher, lambda).unwrap();
    assert!(at_anchor.iter().all(|v| *v == 0.0));
    assert!(ewc_penalty_gradient(&params[1..], &fisher, lambda).is_err());
}

fn plan(strategy: Plan, targets: Vec<usize>, lambda: f64) -> RepairPlan {
    let mut p = RepairPlan::new(strategy, targets);
    p.ewc_lambda = lambda;
    p.train = p.train.with_seed(seed::derive_seed(0, "repair", 0));
    p
}

#[test]
fn zero_lambda_follows_the_all_types_trajectory() {
    let s = common::subtyped(0);
    let ids = s.partition.eligible_ids();
    let ewc = repair(
        &s.model,
        &s.partition,
        &plan(Plan::EwcAllTypes, ids.clone(), 0.0),
    )
    .unwrap();
    let plain = repair(&s.model, &s.partition, &plan(Plan::AllTypes, ids, 0.0)).unwrap();
    assert_eq!(ewc.model.params.values, plain.model.params.values);
    assert_eq!(ewc.log, plain.log);
    assert_eq!(ewc.best_epoch, plain.best_epoch);
}

#[test]
fn ewc_distance_shrinks_with_lambda() {
    let s = common::subtyped(0);
    let ids = s.partition.eligible_ids();
    let fisher = fisher_diagonal(&s.model, &s.partition.correct.train, "C_tr").unwrap();
    let anchor = &s.model.params.values;
    let mut weighted = Vec::new();
    for lambda in [0.0, 1.0, 1e2, 1e4, 1e8] {
        let out = repair(
            &s.model,
            &s.partition,
            &plan(Plan::EwcAllTypes, ids.clone(), lambda),
        )
        .unwrap();
        let p = &out.model.params.values;
        let w: f64 = p
            .iter()
            .zip(anchor)
            .zip(&fisher.values)
            .map(|((x, a), f)| f * (x - a) * (x - a))
            .sum();
        let l2: f64 = p
            .iter()
            .zip(anchor)
            .map(|(x, a)| (x - a) * (x - a))
            .sum::<f64>()
            .sqrt();
        let inf = p
            .iter()
            .zip(anchor)
            .map(|(x, a)| (x - a).abs())
            .fold(0.0, f64::max);
        println!("lambda {lambda:e}: Fisher-weighted {w:.3e}, L2 {l2:.4}, max-abs {inf:.2e}, best epoch {}", out.best_epoch);
        weighted.push(w);
        if lambda == 1e8 {
            assert!(inf <= 1e-3, "max-abs deviation {inf}");
        }
    }
    for pair in weighted.windows(2) {
        assert!(pair[1] <= pair[0], "{weighted:?}");
    }
}

#[test]
fn pre_repair_row_and_report_invariants() {
    let s = common::subtyped(0);
    let pre = evaluate_repair(&s.model, &s.partition, "pre_repair").unwrap();
    assert!(pre.type_accuracy.iter().all(|a| *a == 0.0));
    assert_eq!(pre.correct_accuracy, 1.0);
    assert!(pre.retained);
    let ids = s.partition.eligible_ids();
    let out = repair(
        &s.model,
        &s.partition,
        &plan(Plan::AllTypesWithCorrect, ids.clone(), 0.0),
    )
    .unwrap();
    let r = &out.report;
    assert_eq!(r.retained, r.correct_accuracy >= RETENTION_THRESHOLD);
    let hits: f64 = r
        .type_accuracy
        .iter()
        .zip(&r.type_sizes)
        .map(|(a, n)| a * *n as f64)
        .sum::<f64>()
        + r.correct_accuracy * r.correct_size as f64;
    let total = (r.type_sizes.iter().sum::<usize>() + r.correct_size) as f64;
    assert!((r.all_accuracy - hits / total).abs() < 1e-12);
    let pooled = evaluate(&out.model, &s.partition.pooled_test(), Metric::Accuracy).unwrap();
    assert!((r.all_accuracy - pooled.score).abs() < 1e-12);
    let path = s.dir.path().join("reports.json");
    write_repair_reports(&[pre.clone(), r.clone()], &path).unwrap();
    assert_eq!(read_repair_reports(&path).unwrap(), vec![pre, r.clone()]);
}

#[test]
fn plans_are_checked_against_the_partition() {
    let s = common::subtyped(0);
    let ids = s.partition.eligible_ids();
    assert!(repair(
        &s.model,
        &s.partition,
        &plan(Plan::SingleType, ids.clone(), 0.0)
    )
    .is_err());
    assert!(repair(&s.model, &s.partition, &plan(Plan::AllTypes, vec![], 0.0)).is_err());
    assert!(repair(
        &s.model,
        &s.partition,
        &plan(Plan::AllTypes, vec![999], 0.0)
    )
    .is_err());
    assert!(repair(
        &s.model,
        &s.partition,
        &plan(Plan::AllTypes, vec![ids[0], ids[0]], 0.0)
    )
    .is_err());
    assert!(repair(&s.model, &s.partition, &plan(Plan::EwcAllTypes, ids, -1.0)).is_err());
}
