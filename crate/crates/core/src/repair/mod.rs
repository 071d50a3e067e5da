//! Repairing a model on selected failure types: plain and correct-mixed fine-tuning, an
//! elastic weight consolidation variant, and evaluation of what was gained and retained.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Example, FailurePartition};
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{
    evaluate, fit, BatchPlan, EpochRecord, EpochVerdict, Metric, ModelState, TrainConfig,
};

/// Correct-case accuracy a repaired model must keep.
pub const RETENTION_THRESHOLD: f64 = 0.85;
pub const DEFAULT_EWC_LAMBDA: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SingleType,
    SingleTypeWithCorrect,
    AllTypes,
    AllTypesWithCorrect,
    EwcAllTypes,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::SingleType => "single_type",
            Strategy::SingleTypeWithCorrect => "single_type_with_correct",
            Strategy::AllTypes => "all_types",
            Strategy::AllTypesWithCorrect => "all_types_with_correct",
            Strategy::EwcAllTypes => "ewc_all_types",
        }
    }

    pub fn mixes_correct(self) -> bool {
        matches!(
            self,
            Strategy::SingleTypeWithCorrect | Strategy::AllTypesWithCorrect
        )
    }

    pub fn single(self) -> bool {
        matches!(self, Strategy::SingleType | Strategy::SingleTypeWithCorrect)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairPlan {
    pub strategy: Strategy,
    /// Failure type ids to repair; `None` in a config means every eligible type.
    pub targets: Vec<usize>,
    #[serde(default = "default_mix")]
    pub mix_ratio: f64,
    #[serde(default = "default_lambda")]
    pub ewc_lambda: f64,
    #[serde(default = "TrainConfig::finetune")]
    pub train: TrainConfig,
}

fn default_mix() -> f64 {
    0.5
}

fn default_lambda() -> f64 {
    DEFAULT_EWC_LAMBDA
}

impl RepairPlan {
    pub fn new(strategy: Strategy, targets: Vec<usize>) -> Self {
        RepairPlan {
            strategy,
            targets,
            mix_ratio: default_mix(),
            ewc_lambda: default_lambda(),
            train: TrainConfig::finetune(),
        }
    }

    pub fn label(&self) -> String {
        let ids: Vec<String> = self.targets.iter().map(usize::to_string).collect();
        let base = format!("{}[{}]", self.strategy.as_str(), ids.join(","));
        match self.strategy {
            Strategy::EwcAllTypes => format!("{base} λ={}", self.ewc_lambda),
            _ => base,
        }
    }

    pub fn validate(&self, partition: &FailurePartition) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::InvalidConfig(
                "repair plan has no target types".into(),
            ));
        }
        if self.strategy.single() && self.targets.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "{} needs exactly one target type, got {}",
                self.strategy.as_str(),
                self.targets.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.targets {
            if !seen.insert(*t) {
                return Err(Error::InvalidConfig(format!(
                    "target type {t} listed twice"
                )));
            }
            if partition.type_splits(*t).is_none() {
                return Err(Error::InvalidConfig(format!(
                    "target type {t} is not an eligible type of the partition (eligible: {:?})",
                    partition.eligible_ids()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::InvalidConfig(format!(
                "mix ratio {} outside [0, 1]",
                self.mix_ratio
            )));
        }
        if !(self.ewc_lambda >= 0.0 && self.ewc_lambda.is_finite()) {
            return Err(Error::InvalidConfig(
                "ewc lambda must be finite and >= 0".into(),
            ));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagonal {
    pub values: Vec<f64>,
    pub anchor: Vec<f64>,
    pub source: String,
}

/// Mean of squared per-example loss gradients over `split`, evaluated at the current
/// parameters, which become the anchor.
pub fn fisher_diagonal(
    model: &ModelState,
    split: &[Example],
    source: impl Into<String>,
) -> Result<FisherDiagonal> {
    if split.is_empty() {
        return Err(Error::EmptySplit("Fisher source split".into()));
    }
    let grads: Vec<Vec<f64>> = split
        .par_iter()
        .map(|e| model.per_example_gradient(e))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; model.num_params()];
    for g in &grads {
        for (v, x) in values.iter_mut().zip(g) {
            *v += x * x;
        }
    }
    let n = split.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(FisherDiagonal {
        values,
        anchor: model.params.values.clone(),
        source: source.into(),
    })
}

/// `(lambda / 2) * sum_k F_k (theta_k - anchor_k)^2`.
pub fn ewc_penalty(params: &[f64], fisher: &FisherDiagonal, lambda: f64) -> f64 {
    0.5 * lambda
        * params
            .iter()
            .zip(&fisher.anchor)
            .zip(&fisher.values)
            .map(|((p, a), f)| f * (p - a) * (p - a))
            .sum::<f64>()
}

/// `lambda * F ⊙ (theta - anchor)`.
pub fn ewc_penalty_gradient(
    params: &[f64],
    fisher: &FisherDiagonal,
    lambda: f64,
) -> Result<Vec<f64>> {
    if params.len() != fisher.values.len() || fisher.anchor.len() != fisher.values.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", fisher.values.len()),
            actual: format!("{}", params.len()),
        });
    }
    Ok(params
        .iter()
        .zip(&fisher.anchor)
        .zip(&fisher.values)
        .map(|((p, a), f)| lambda * f * (p - a))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub label: String,
    pub type_ids: Vec<usize>,
    pub type_accuracy: Vec<f64>,
    pub type_sizes: Vec<usize>,
    pub correct_accuracy: f64,
    pub correct_size: usize,
    /// Accuracy over the whole pool test set: correct cases plus every type's test split.
    pub all_accuracy: f64,
    pub retained: bool,
}

/// Scores `model` on every eligible type's test split, the correct test split and their union.
pub fn evaluate_repair(
    model: &ModelState,
    partition: &FailurePartition,
    label: impl Into<String>,
) -> Result<RepairReport> {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut type_ids = Vec::new();
    let mut type_accuracy = Vec::new();
    let mut type_sizes = Vec::new();
    for (id, splits) in partition.eligible() {
        let ev = evaluate(model, &splits.test, Metric::Accuracy)?;
        hits += ev.correct.iter().filter(|c| **c).count();
        total += splits.test.len();
        type_ids.push(id);
        type_accuracy.push(ev.score);
        type_sizes.push(splits.test.len());
    }
    let correct = evaluate(model, &partition.correct.test, Metric::Accuracy)?;
    hits += correct.correct.iter().filter(|c| **c).count();
    total += partition.correct.test.len();
    Ok(RepairReport {
        label: label.into(),
        type_ids,
        type_accuracy,
        type_sizes,
        correct_accuracy: correct.score,
        correct_size: partition.correct.test.len(),
        all_accuracy: hits as f64 / total as f64,
        retained: correct.score >= RETENTION_THRESHOLD,
    })
}

#[derive(Debug, Clone)]
pub struct RepairOutcome {
    pub model: ModelState,
    pub report: RepairReport,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Fine-tunes per `plan`, keeping the checkpoint with the highest accuracy on the
/// targeted training failures (lower loss on ties), then evaluates it.
pub fn repair(
    model: &ModelState,
    partition: &FailurePartition,
    plan: &RepairPlan,
) -> Result<RepairOutcome> {
    plan.validate(partition)?;
    let mut targets: Vec<Example> = Vec::new();
    for t in &plan.targets {
        targets.extend(
            partition
                .type_splits(*t)
                .expect("validated")
                .train
                .iter()
                .cloned(),
        );
    }
    if targets.is_empty() {
        return Err(Error::EmptySplit("targeted failure training splits".into()));
    }
    let c_train = &partition.correct.train;
    let batches = if plan.strategy.mixes_correct() {
        BatchPlan::Mixed {
            primary: &targets,
            secondary: c_train,
            secondary_ratio: plan.mix_ratio,
        }
    } else {
        BatchPlan::Plain(&targets)
    };
    let fisher = match plan.strategy {
        Strategy::EwcAllTypes => Some(fisher_diagonal(model, c_train, "C_tr")?),
        _ => None,
    };
    let lambda = plan.ewc_lambda;
    let penalty = fisher.as_ref().map(|f| {
        move |params: &[f64], grad: &mut [f64]| {
            for (((g, p), a), w) in grad.iter_mut().zip(params).zip(&f.anchor).zip(&f.values) {
                *g += lambda * w * (p - a);
            }
        }
    });
    let out = fit(
        &model.reset_optimizer(),
        batches,
        &plan.train,
        penalty.as_ref().map(|p| p as crate::model::Penalty<'_>),
        |m| {
            let ev = evaluate(m, &targets, Metric::Accuracy)?;
            Ok(EpochVerdict {
                accuracy: ev.score,
                loss: ev.loss,
                constraint: None,
                eligible: true,
            })
        },
    )?;
    let best = out.best.expect("every epoch is eligible");
    let report = evaluate_repair(&best, partition, plan.label())?;
    Ok(RepairOutcome {
        model: best,
        report,
        best_epoch: out.best_epoch.expect("every epoch is eligible"),
        log: out.log,
    })
}

pub fn write_repair_reports(reports: &[RepairReport], path: &Path) -> Result<()> {
    fsio::write_json(path, &reports)
}

pub fn read_repair_reports(path: &Path) -> Result<Vec<RepairReport>> {
    fsio::read_json(path)
}

/// One row per report: each type's test accuracy, C^te, All, and the retention verdict.
pub fn repair_table_markdown(reports: &[RepairReport]) -> String {
    let Some(first) = reports.first() else {
        return String::from("_no repair runs_\n");
    };
    let mut out = String::from("| Method |");
    for id in &first.type_ids {
        write!(out, " F{id} |").unwrap();
    }
    out.push_str(" C | All | C ≥ 0.85 |\n|---|");
    for _ in &first.type_ids {
        out.push_str("---|");
    }
    out.push_str("---|---|---|\n");
    for r in reports {
        write!(out, "| {} |", r.label).unwrap();
        for a in &r.type_accuracy {
            write!(out, " {a:.2} |").unwrap();
        }
        writeln!(
            out,
            " {:.2} | {:.2} | {} |",
            r.correct_accuracy,
            r.all_accuracy,
            if r.retained { "yes" } else { "no" }
        )
        .unwrap();
    }
    out
}
