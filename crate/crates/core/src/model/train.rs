use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{argmax, ModelState};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 0.0,
            batch_size: 32,
            max_epochs: 200,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for fine-tuning an already trained model.
    pub fn finetune() -> Self {
        TrainConfig {
            weight_decay: 1e-3,
            ..Self::default()
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        TrainConfig { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.patience > self.max_epochs {
            return bad("patience must not exceed max_epochs");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub score: f64,
    pub loss: f64,
    pub correct: Vec<bool>,
    pub predictions: Vec<usize>,
}

pub fn evaluate(model: &ModelState, split: &[Example], metric: Metric) -> Result<Evaluation> {
    let Metric::Accuracy = metric;
    if split.is_empty() {
        return Err(Error::EmptySplit(
            "cannot evaluate on an empty split".into(),
        ));
    }
    let mut correct = Vec::with_capacity(split.len());
    let mut predictions = Vec::with_capacity(split.len());
    let mut loss = 0.0;
    for ex in split {
        let logits = &model.forward(&[&ex.input])?[0];
        if ex.label >= logits.len() {
            return Err(Error::LabelOutOfRange {
                label: ex.label,
                num_classes: logits.len(),
            });
        }
        let pred = argmax(logits);
        loss += super::network::cross_entropy(logits, ex.label);
        predictions.push(pred);
        correct.push(pred == ex.label);
    }
    let hits = correct.iter().filter(|c| **c).count();
    Ok(Evaluation {
        score: hits as f64 / split.len() as f64,
        loss: loss / split.len() as f64,
        correct,
        predictions,
    })
}

/// How an epoch's mini-batches are drawn.
#[derive(Debug, Clone, Copy)]
pub enum BatchPlan<'a> {
    /// Shuffle once per epoch and chunk.
    Plain(&'a [Example]),
    /// Every batch holds `floor(batch_size * secondary_ratio)` secondary examples, the rest
    /// primary. An epoch is one pass over the primary set; secondary examples are drawn by
    /// cycling through a reshuffled permutation.
    Mixed {
        primary: &'a [Example],
        secondary: &'a [Example],
        secondary_ratio: f64,
    },
}

impl BatchPlan<'_> {
    fn validate(&self) -> Result<()> {
        match self {
            BatchPlan::Plain([]) => Err(Error::EmptySplit("training set".into())),
            BatchPlan::Mixed { primary: [], .. } => {
                Err(Error::EmptySplit("primary training set".into()))
            }
            BatchPlan::Mixed {
                secondary,
                secondary_ratio,
                ..
            } => {
                if !(0.0..=1.0).contains(secondary_ratio) {
                    return Err(Error::InvalidConfig("mix ratio must lie in [0, 1]".into()));
                }
                if *secondary_ratio > 0.0 && secondary.is_empty() {
                    return Err(Error::EmptySplit("secondary training set".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

struct Batcher<'a> {
    plan: BatchPlan<'a>,
    batch_size: usize,
    rng: seed::Rng,
    cycle: Vec<usize>,
    cursor: usize,
}

impl<'a> Batcher<'a> {
    fn new(plan: BatchPlan<'a>, batch_size: usize, seed: u64) -> Self {
        Batcher {
            plan,
            batch_size,
            rng: seed::rng(seed),
            cycle: Vec::new(),
            cursor: 0,
        }
    }

    fn epoch(&mut self) -> Vec<Vec<&'a Example>> {
        match self.plan {
            BatchPlan::Plain(set) => {
                let mut order: Vec<usize> = (0..set.len()).collect();
                order.shuffle(&mut self.rng);
                order
                    .chunks(self.batch_size)
                    .map(|c| c.iter().map(|&i| &set[i]).collect())
                    .collect()
            }
            BatchPlan::Mixed {
                primary,
                secondary,
                secondary_ratio,
            } => {
                let n_secondary = ((self.batch_size as f64 * secondary_ratio).floor() as usize)
                    .min(self.batch_size - 1);
                let n_primary = self.batch_size - n_secondary;
                let mut order: Vec<usize> = (0..primary.len()).collect();
                order.shuffle(&mut self.rng);
                let chunks: Vec<Vec<usize>> = order.chunks(n_primary).map(|c| c.to_vec()).collect();
                chunks
                    .into_iter()
                    .map(|chunk| {
                        let mut batch: Vec<&Example> = chunk.iter().map(|&i| &primary[i]).collect();
                        if n_secondary > 0 {
                            // a short last chunk keeps the same proportion
                            let take = (chunk.len() * n_secondary).div_ceil(n_primary);
                            for _ in 0..take {
                                let idx = self.next_secondary(secondary.len());
                                batch.push(&secondary[idx]);
                            }
                        }
                        batch
                    })
                    .collect()
            }
        }
    }

    fn next_secondary(&mut self, len: usize) -> usize {
        if self.cursor >= self.cycle.len() {
            self.cycle = (0..len).collect();
            self.cycle.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.cycle[self.cursor - 1]
    }
}

/// What the caller reports about a candidate checkpoint after each epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochVerdict {
    /// Monitored accuracy; higher is better.
    pub accuracy: f64,
    /// Monitored loss, used to break accuracy ties.
    pub loss: f64,
    /// Accuracy on a constraint slice, if any.
    pub constraint: Option<f64>,
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub constraint: Option<f64>,
    pub eligible: bool,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub best: Option<ModelState>,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochRecord>,
}

pub type Penalty<'a> = &'a (dyn Fn(&[f64], &mut [f64]) + Sync);

/// Mini-batch Adam loop with best-eligible-checkpoint selection.
///
/// After every epoch `judge` scores the current parameters. A checkpoint replaces the
/// incumbent when it is eligible and has strictly higher accuracy, or equal accuracy and
/// strictly lower loss. Training stops after `patience` epochs without replacement.
/// `penalty` adds an extra gradient term given the current parameters.
pub fn fit(
    model: &ModelState,
    plan: BatchPlan<'_>,
    config: &TrainConfig,
    penalty: Option<Penalty<'_>>,
    mut judge: impl FnMut(&ModelState) -> Result<EpochVerdict>,
) -> Result<FitOutcome> {
    config.validate()?;
    plan.validate()?;
    let mut state = model.clone();
    let mut batcher = Batcher::new(plan, config.batch_size, config.seed);
    let n = state.num_params();
    let mut grad = vec![0.0; n];
    let mut log = Vec::new();
    let mut best: Option<(ModelState, usize, f64, f64)> = None;
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in batcher.epoch() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut batch_loss = 0.0;
            for ex in &batch {
                batch_loss += state.accumulate_gradient(&ex.input, ex.label, &mut grad)?;
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if let Some(p) = penalty {
                p(&state.params.values, &mut grad);
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    last_finite_epoch: epoch - 1,
                });
            }
            state.optimizer.update(
                &mut state.params.values,
                &grad,
                config.learning_rate,
                config.weight_decay,
            );
            loss_sum += batch_loss;
            seen += batch.len();
        }
        if state.params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                last_finite_epoch: epoch - 1,
            });
        }

        let verdict = match judge(&state) {
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Divergence {
                    epoch,
                    last_finite_epoch: epoch - 1,
                })
            }
            other => other?,
        };
        let improved = verdict.eligible
            && match &best {
                None => true,
                Some((_, _, acc, loss)) => {
                    verdict.accuracy > *acc || (verdict.accuracy == *acc && verdict.loss < *loss)
                }
            };
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            accuracy: verdict.accuracy,
            loss: verdict.loss,
            constraint: verdict.constraint,
            eligible: verdict.eligible,
            improved,
        });
        if improved {
            best = Some((state.clone(), epoch, verdict.accuracy, verdict.loss));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    let (best, best_epoch) = match best {
        Some((m, e, _, _)) => (Some(m), Some(e)),
        None => (None, None),
    };
    Ok(FitOutcome {
        best,
        best_epoch,
        log,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

/// Trains on `train`, early-stopping on validation accuracy and restoring the best checkpoint.
pub fn train(
    model: &ModelState,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptySplit("training split".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation split".into()));
    }
    let train_ids: HashSet<u64> = train.iter().map(|e| e.id).collect();
    if let Some(dup) = val.iter().find(|e| train_ids.contains(&e.id)) {
        return Err(Error::InvalidConfig(format!(
            "train and validation splits overlap (example {})",
            dup.id
        )));
    }
    let outcome = fit(model, BatchPlan::Plain(train), config, None, |m| {
        let ev = evaluate(m, val, Metric::Accuracy)?;
        Ok(EpochVerdict {
            accuracy: ev.score,
            loss: ev.loss,
            constraint: None,
            eligible: true,
        })
    })?;
    Ok(TrainOutcome {
        model: outcome.best.expect("every epoch is eligible"),
        best_epoch: outcome.best_epoch.expect("every epoch is eligible"),
        log: outcome.log,
    })
}
