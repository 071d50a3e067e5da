use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans, KMeansResult};
use super::silhouette::silhouette;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_K_RANGE: (usize, usize) = (3, 10);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub silhouette: f64,
    pub inertia: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub silhouette: f64,
    pub sweep: Vec<SweepPoint>,
}

/// Candidate k values: `k_min..=min(k_max, n - 1)`.
pub fn candidate_ks(n: usize, k_min: usize, k_max: usize) -> Vec<usize> {
    let hi = k_max.min(n.saturating_sub(1));
    (k_min..=hi).collect()
}

/// Runs k-means for every candidate k and keeps the highest silhouette (smallest k on ties).
pub fn select_k_and_cluster(
    points: &[Vec<f64>],
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<Selection> {
    if k_min < 2 || k_max < k_min {
        return Err(Error::InvalidConfig(format!(
            "k range [{k_min}, {k_max}] needs 2 <= k_min <= k_max"
        )));
    }
    if points.len() < 2 * k_min {
        return Err(Error::TooFewPoints {
            required: 2 * k_min,
            actual: points.len(),
        });
    }
    let runs: Vec<(usize, KMeansResult, f64)> = candidate_ks(points.len(), k_min, k_max)
        .into_par_iter()
        .map(|k| {
            let run = kmeans(points, k, seed::derive_seed(seed, "select-k", k as u64))?;
            let s = silhouette(points, &run.assignment)?;
            Ok((k, run, s))
        })
        .collect::<Result<_>>()?;
    let sweep = runs
        .iter()
        .map(|(k, run, s)| SweepPoint {
            k: *k,
            silhouette: *s,
            inertia: run.inertia,
        })
        .collect();
    let mut best = 0;
    for (i, (_, _, s)) in runs.iter().enumerate() {
        if *s > runs[best].2 {
            best = i;
        }
    }
    let (k, run, s) = runs
        .into_iter()
        .nth(best)
        .expect("non-empty candidate range");
    Ok(Selection {
        k,
        assignment: run.assignment,
        silhouette: s,
        sweep,
    })
}
