#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use repairbench_core::model::{self, ModelState};
use repairbench_core::pipeline::{
    load_dataset, load_model, read_type_partition, Pipeline, RunConfig, Stage,
};
use repairbench_core::seed;
use repairbench_core::subtyping::Method;
use repairbench_core::{Dataset, FailurePartition};
use tempfile::TempDir;

/// Runs every stage up to and including `last` in a fresh directory.
pub fn staged(config: RunConfig, last: Stage) -> (TempDir, Pipeline) {
    let dir = tempfile::tempdir().unwrap();
    let pipeline = Pipeline::new(config, dir.path()).unwrap();
    for s in Stage::ALL {
        pipeline.run_stage(s).unwrap();
        if s == last {
            break;
        }
    }
    (dir, pipeline)
}

pub fn seeded(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
}

/// Trained model and gradient-clustering partition of the default benchmark.
pub struct Subtyped {
    pub dir: TempDir,
    pub dataset: Dataset,
    pub model: ModelState,
    pub partition: FailurePartition,
}

pub fn subtyped(seed: u64) -> Subtyped {
    let (dir, _) = staged(seeded(seed), Stage::Subtype);
    let dataset = load_dataset(dir.path()).unwrap();
    let model = load_model(dir.path()).unwrap();
    let partition = read_type_partition(dir.path(), Method::GradientClustering, &dataset).unwrap();
    Subtyped {
        dir,
        dataset,
        model,
        partition,
    }
}

pub fn loss_at(model: &ModelState, values: &[f64], input: &[f64], label: usize) -> f64 {
    let m = ModelState::from_values(model.spec.clone(), values.to_vec(), 0).unwrap();
    model::loss(&m.forward(&[input]).unwrap(), &[label]).unwrap()
}

/// Max relative error per tensor between the analytic gradient and central differences.
pub fn finite_difference_errors(
    model: &ModelState,
    input: &[f64],
    label: usize,
) -> Vec<(String, f64)> {
    let h = 1e-5;
    let analytic = model.gradient(input, label).unwrap();
    let mut values = model.params.values.clone();
    model
        .params
        .layout
        .slots
        .iter()
        .map(|slot| {
            let mut worst: f64 = 0.0;
            for i in slot.range() {
                let orig = values[i];
                values[i] = orig + h;
                let up = loss_at(model, &values, input, label);
                values[i] = orig - h;
                let down = loss_at(model, &values, input, label);
                values[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic[i] - numeric).abs() / scale);
            }
            (slot.name.clone(), worst)
        })
        .collect()
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Plain Lloyd from uniformly drawn distinct seeds, written independently of the library.
pub fn oracle_inertia(points: &[Vec<f64>], k: usize, restarts: u64) -> f64 {
    let mut best = f64::INFINITY;
    for r in 0..restarts {
        let mut rng = seed::rng(1_000_000 + r);
        let mut idx: Vec<usize> = (0..points.len()).collect();
        idx.shuffle(&mut rng);
        let mut centroids: Vec<Vec<f64>> = idx[..k].iter().map(|&i| points[i].clone()).collect();
        let mut assign = vec![usize::MAX; points.len()];
        for _ in 0..1000 {
            let next: Vec<usize> = points
                .iter()
                .map(|p| {
                    (0..k)
                        .min_by(|&a, &b| sq(p, &centroids[a]).total_cmp(&sq(p, &centroids[b])))
                        .unwrap()
                })
                .collect();
            if next == assign {
                break;
            }
            assign = next;
            for (c, centroid) in centroids.iter_mut().enumerate() {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .zip(&assign)
                    .filter(|(_, a)| **a == c)
                    .map(|(p, _)| p)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                for d in 0..centroid.len() {
                    centroid[d] = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&assign)
            .map(|(p, &a)| sq(p, &centroids[a]))
            .sum();
        best = best.min(inertia);
    }
    best
}

pub fn blobs(
    centers: &[(f64, f64)],
    per: usize,
    std: f64,
    seed_value: u64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = seed::rng(seed_value);
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (c, &(x, y)) in centers.iter().enumerate() {
        for _ in 0..per {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            points.push(vec![x + std * dx, y + std * dy]);
            labels.push(c);
        }
    }
    (points, labels)
}
