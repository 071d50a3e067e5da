//! Scoring a subtyping: one compatibility-constrained fine-tune per failure type, the
//! resulting cross-type accuracy matrix, Learnability and Independence.

mod render;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use render::{
    quality_table_markdown, read_matrix_csv, write_heatmap_ppm, write_matrix_csv, MatrixColumns,
};

use crate::data::{Example, FailurePartition};
use crate::error::{Error, Result};
use crate::model::{
    evaluate, fit, BatchPlan, EpochRecord, EpochVerdict, Metric, ModelState, TrainConfig,
};
use crate::seed;
use crate::subtyping::Method;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompatibilityConfig {
    /// Minimum accuracy on the correct-case validation slice for a checkpoint to count.
    pub threshold: f64,
    /// Share of every batch drawn from correct training cases.
    pub mix_ratio: f64,
    pub train: TrainConfig,
    pub metric: Metric,
}

impl Default for CompatibilityConfig {
    fn default() -> Self {
        CompatibilityConfig {
            threshold: 0.9,
            mix_ratio: 0.5,
            train: TrainConfig::finetune(),
            metric: Metric::Accuracy,
        }
    }
}

impl CompatibilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "compatibility threshold {} outside (0, 1]",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::InvalidConfig(format!(
                "mix ratio {} outside [0, 1]",
                self.mix_ratio
            )));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone)]
pub struct CompatibilityOutcome {
    pub model: ModelState,
    /// No epoch met the constraint; `model` is the unchanged input.
    pub unrepairable: bool,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochRecord>,
}

/// Fine-tunes on `f_train` mixed with `c_train`, keeping the checkpoint with the best
/// `f_val` accuracy among those whose `c_val` accuracy reaches the threshold.
pub fn compatibility_finetune(
    model: &ModelState,
    f_train: &[Example],
    f_val: &[Example],
    c_train: &[Example],
    c_val: &[Example],
    config: &CompatibilityConfig,
) -> Result<CompatibilityOutcome> {
    config.validate()?;
    for (name, split) in [
        ("failure-type training split", f_train),
        ("failure-type validation split", f_val),
        ("correct training split", c_train),
        ("correct validation split", c_val),
    ] {
        if split.is_empty() {
            return Err(Error::EmptySplit(name.into()));
        }
    }
    let plan = BatchPlan::Mixed {
        primary: f_train,
        secondary: c_train,
        secondary_ratio: config.mix_ratio,
    };
    let out = fit(&model.reset_optimizer(), plan, &config.train, None, |m| {
        let target = evaluate(m, f_val, config.metric)?;
        let retained = evaluate(m, c_val, config.metric)?.score;
        Ok(EpochVerdict {
            accuracy: target.score,
            loss: target.loss,
            constraint: Some(retained),
            eligible: retained >= config.threshold,
        })
    })?;
    Ok(match out.best {
        Some(best) => CompatibilityOutcome {
            model: best,
            unrepairable: false,
            best_epoch: out.best_epoch,
            log: out.log,
        },
        None => CompatibilityOutcome {
            model: model.clone(),
            unrepairable: true,
            best_epoch: None,
            log: out.log,
        },
    })
}

/// Entry `(i, j)` is the accuracy of the model fine-tuned on type `i` over the test split
/// of type `j`; `correct[i]` is its accuracy on the correct-case test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMatrix {
    pub type_ids: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub correct: Vec<f64>,
    pub unrepairable: Vec<bool>,
    pub best_epochs: Vec<Option<usize>>,
    pub logs: Vec<Vec<EpochRecord>>,
}

impl FinetuneMatrix {
    pub fn len(&self) -> usize {
        self.type_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.type_ids.is_empty()
    }

    pub fn diagonal_dominance(&self) -> f64 {
        let t = self.len();
        if t < 2 {
            return 0.0;
        }
        let diag: f64 = (0..t).map(|i| self.values[i][i]).sum::<f64>() / t as f64;
        let off: f64 = (0..t)
            .flat_map(|i| (0..t).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .sum::<f64>()
            / (t * (t - 1)) as f64;
        diag - off
    }
}

/// One compatibility fine-tune per eligible type, each from a clone of `model`.
pub fn build_matrix(
    model: &ModelState,
    partition: &FailurePartition,
    config: &CompatibilityConfig,
) -> Result<FinetuneMatrix> {
    config.validate()?;
    let eligible: Vec<_> = partition.eligible().collect();
    if eligible.len() < 2 {
        return Err(Error::TooFewPoints {
            required: 2,
            actual: eligible.len(),
        });
    }
    let correct = &partition.correct;
    let rows: Vec<(Vec<f64>, f64, CompatibilityOutcome)> = eligible
        .par_iter()
        .map(|(id, splits)| {
            let mut row_config = config.clone();
            row_config.train.seed = seed::derive_seed(config.train.seed, "matrix-row", *id as u64);
            let out = compatibility_finetune(
                model,
                &splits.train,
                &splits.val,
                &correct.train,
                &correct.val,
                &row_config,
            )?;
            let row = eligible
                .iter()
                .map(|(_, s)| evaluate(&out.model, &s.test, config.metric).map(|e| e.score))
                .collect::<Result<Vec<_>>>()?;
            let c = evaluate(&out.model, &correct.test, config.metric)?.score;
            Ok((row, c, out))
        })
        .collect::<Result<_>>()?;
    let mut matrix = FinetuneMatrix {
        type_ids: eligible.iter().map(|(id, _)| *id).collect(),
        values: Vec::new(),
        correct: Vec::new(),
        unrepairable: Vec::new(),
        best_epochs: Vec::new(),
        logs: Vec::new(),
    };
    for (row, c, out) in rows {
        matrix.values.push(row);
        matrix.correct.push(c);
        matrix.unrepairable.push(out.unrepairable);
        matrix.best_epochs.push(out.best_epoch);
        matrix.logs.push(out.log);
    }
    Ok(matrix)
}

/// `L(F_i) = M[i][i]`.
pub fn learnability(values: &[Vec<f64>], i: usize) -> f64 {
    values[i][i]
}

/// `I(F_i) = mean_{j != i} (M[i][i] - M[i][j])`.
pub fn independence(values: &[Vec<f64>], i: usize) -> Result<f64> {
    let t = values.len();
    if t < 2 {
        return Err(Error::TooFewPoints {
            required: 2,
            actual: t,
        });
    }
    let diag = values[i][i];
    let sum: f64 = (0..t)
        .filter(|&j| j != i)
        .map(|j| diag - values[i][j])
        .sum();
    Ok(sum / (t - 1) as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub method: Method,
    pub type_ids: Vec<usize>,
    pub learnability: Vec<f64>,
    pub independence: Vec<f64>,
    pub learnability_mean: f64,
    pub learnability_std: f64,
    pub independence_mean: f64,
    pub independence_std: f64,
    /// Types with too few members to split; not scored.
    pub excluded: Vec<usize>,
    /// Types whose fine-tune never met the compatibility constraint.
    pub unrepairable: Vec<usize>,
    pub provenance: String,
}

/// Per-type scores and their mean and population std. Unrepairable rows already hold the
/// untouched model's accuracies, so they enter with L = 0 and I = 0.
pub fn aggregate(
    method: Method,
    matrix: &FinetuneMatrix,
    excluded: Vec<usize>,
    provenance: impl Into<String>,
) -> Result<QualityReport> {
    let t = matrix.len();
    let learn: Vec<f64> = (0..t).map(|i| learnability(&matrix.values, i)).collect();
    let indep = (0..t)
        .map(|i| independence(&matrix.values, i))
        .collect::<Result<Vec<_>>>()?;
    let (lm, ls) = mean_std(&learn);
    let (im, is) = mean_std(&indep);
    Ok(QualityReport {
        method,
        type_ids: matrix.type_ids.clone(),
        learnability: learn,
        independence: indep,
        learnability_mean: lm,
        learnability_std: ls,
        independence_mean: im,
        independence_std: is,
        excluded,
        unrepairable: matrix
            .type_ids
            .iter()
            .zip(&matrix.unrepairable)
            .filter(|(_, u)| **u)
            .map(|(id, _)| *id)
            .collect(),
        provenance: provenance.into(),
    })
}

/// Report indices ordered by mean Learnability, then mean Independence, both descending;
/// equal pairs keep their input order.
pub fn rank_methods(reports: &[QualityReport]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&reports[a], &reports[b]);
        rb.learnability_mean
            .total_cmp(&ra.learnability_mean)
            .then(rb.independence_mean.total_cmp(&ra.independence_mean))
    });
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independence_hand_values() {
        let m = vec![
            vec![0.9, 0.2, 0.1],
            vec![0.0, 1.0, 0.0],
            vec![0.5, 0.5, 0.5],
        ];
        assert_eq!(independence(&m, 0).unwrap(), 0.75);
        assert_eq!(independence(&m, 1).unwrap(), 1.0);
        assert_eq!(independence(&m, 2).unwrap(), 0.0);
        assert_eq!(learnability(&m, 0), 0.9);
        assert!(independence(&[vec![1.0]], 0).is_err());
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[0.8, 1.0]);
        assert!((m - 0.9).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-15);
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    }

    #[test]
    fn threshold_bounds() {
        let mut c = CompatibilityConfig {
            threshold: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        c.threshold = 0.0;
        assert!(c.validate().is_err());
        c.threshold = 1.5;
        assert!(c.validate().is_err());
    }

    fn report(method: Method, l: f64, i: f64) -> QualityReport {
        QualityReport {
            method,
            type_ids: vec![],
            learnability: vec![],
            independence: vec![],
            learnability_mean: l,
            learnability_std: 0.0,
            independence_mean: i,
            independence_std: 0.0,
            excluded: vec![],
            unrepairable: vec![],
            provenance: String::new(),
        }
    }

    #[test]
    fn ranking_is_stable_on_ties() {
        let r = vec![
            report(Method::Random, 0.4, 0.0),
            report(Method::Fpfn, 0.9, 0.1),
            report(Method::Metadata, 0.9, 0.3),
            report(Method::FeatureClustering, 0.4, 0.0),
        ];
        assert_eq!(rank_methods(&r), vec![2, 1, 0, 3]);
    }
}
