use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{evaluate, Metric, ModelState};
use crate::seed;

/// Types smaller than this are reported but not scored.
pub const MIN_TYPE_SIZE: usize = 10;

/// Correctly classified and misclassified pool examples.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolPartition {
    pub correct: Vec<Example>,
    pub failures: Vec<Example>,
    /// Predicted class of each failure, aligned with `failures`.
    pub predictions: Vec<usize>,
}

impl PoolPartition {
    /// True when the model makes no mistakes on the pool.
    pub fn nothing_to_analyze(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn partition_failures(model: &ModelState, pool: &[Example]) -> Result<PoolPartition> {
    if pool.is_empty() {
        return Err(Error::EmptySplit("evaluation pool".into()));
    }
    let ev = evaluate(model, pool, Metric::Accuracy)?;
    let mut out = PoolPartition {
        correct: Vec::new(),
        failures: Vec::new(),
        predictions: Vec::new(),
    };
    for ((ex, ok), pred) in pool.iter().zip(ev.correct).zip(ev.predictions) {
        if ok {
            out.correct.push(ex.clone());
        } else {
            out.failures.push(ex.clone());
            out.predictions.push(pred);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.4,
            val: 0.1,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        if !(self.train > 0.0 && self.val >= 0.0) || self.train + self.val >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "split fractions train {} + val {} must be positive and sum to less than 1",
                self.train, self.val
            )));
        }
        Ok(())
    }

    fn counts(&self, n: usize) -> (usize, usize) {
        let n_train = ((n as f64) * self.train).round() as usize;
        let n_val = (((n as f64) * self.val).round() as usize).min(n - n_train.min(n));
        (n_train.min(n), n_val)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Splits {
    fn draw(examples: &[Example], fractions: &SplitFractions, seed: u64) -> Self {
        let mut shuffled = examples.to_vec();
        shuffled.sort_by_key(|e| e.id);
        shuffled.shuffle(&mut seed::rng(seed));
        let (n_train, n_val) = fractions.counts(shuffled.len());
        let test = shuffled.split_off(n_train + n_val);
        let val = shuffled.split_off(n_train);
        Splits {
            train: shuffled,
            val,
            test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureType {
    pub id: usize,
    pub size: usize,
    /// `None` when the type is below the minimum size and excluded from scoring.
    pub splits: Option<Splits>,
    /// Members of an excluded type.
    pub excluded: Vec<Example>,
}

/// C and the failure types, each split into train / val / test.
#[derive(Debug, Clone, PartialEq)]
pub struct FailurePartition {
    pub correct: Splits,
    pub types: Vec<FailureType>,
    pub provenance: String,
}

impl FailurePartition {
    pub fn eligible(&self) -> impl Iterator<Item = (usize, &Splits)> {
        self.types
            .iter()
            .filter_map(|t| t.splits.as_ref().map(|s| (t.id, s)))
    }

    pub fn eligible_ids(&self) -> Vec<usize> {
        self.eligible().map(|(id, _)| id).collect()
    }

    pub fn excluded_ids(&self) -> Vec<usize> {
        self.types
            .iter()
            .filter(|t| t.splits.is_none())
            .map(|t| t.id)
            .collect()
    }

    pub fn type_splits(&self, id: usize) -> Option<&Splits> {
        self.types
            .iter()
            .find(|t| t.id == id)
            .and_then(|t| t.splits.as_ref())
    }

    /// C^te together with every eligible F_i^te.
    pub fn pooled_test(&self) -> Vec<Example> {
        let mut all = self.correct.test.clone();
        for (_, s) in self.eligible() {
            all.extend_from_slice(&s.test);
        }
        all
    }

    /// Checks pairwise disjointness of every emitted split.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut check = |set: &[Example], what: String| -> Result<()> {
            for e in set {
                if !seen.insert(e.id) {
                    return Err(Error::InvalidConfig(format!(
                        "example {} appears twice ({what})",
                        e.id
                    )));
                }
            }
            Ok(())
        };
        check(&self.correct.train, "C_tr".into())?;
        check(&self.correct.val, "C_val".into())?;
        check(&self.correct.test, "C_te".into())?;
        for t in &self.types {
            if let Some(s) = &t.splits {
                check(&s.train, format!("F{}_tr", t.id))?;
                check(&s.val, format!("F{}_val", t.id))?;
                check(&s.test, format!("F{}_te", t.id))?;
            }
            check(&t.excluded, format!("F{} excluded", t.id))?;
        }
        Ok(())
    }
}

pub fn split_correct(correct: &[Example], fractions: &SplitFractions, seed: u64) -> Result<Splits> {
    fractions.validate()?;
    Ok(Splits::draw(
        correct,
        fractions,
        seed::derive_seed(seed, "split-correct", 0),
    ))
}

/// Per-type stratified split of the failures. `assignment[n]` is the type of `failures[n]`.
pub fn split_types(
    failures: &[Example],
    assignment: &[usize],
    correct: Splits,
    fractions: &SplitFractions,
    min_type_size: usize,
    seed: u64,
    provenance: impl Into<String>,
) -> Result<FailurePartition> {
    fractions.validate()?;
    if failures.len() != assignment.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} type assignments", failures.len()),
            actual: format!("{}", assignment.len()),
        });
    }
    let mut members: BTreeMap<usize, Vec<Example>> = BTreeMap::new();
    for (ex, &t) in failures.iter().zip(assignment) {
        members.entry(t).or_default().push(ex.clone());
    }
    let types = members
        .into_iter()
        .map(|(id, examples)| {
            let size = examples.len();
            if size < min_type_size {
                FailureType {
                    id,
                    size,
                    splits: None,
                    excluded: examples,
                }
            } else {
                let splits = Splits::draw(
                    &examples,
                    fractions,
                    seed::derive_seed(seed, "split-type", id as u64),
                );
                FailureType {
                    id,
                    size,
                    splits: Some(splits),
                    excluded: Vec::new(),
                }
            }
        })
        .collect();
    let partition = FailurePartition {
        correct,
        types,
        provenance: provenance.into(),
    };
    partition.validate()?;
    Ok(partition)
}

#[derive(Debug, Serialize, Deserialize)]
struct PartitionRow {
    example_id: u64,
    role: String,
    type_id: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PartitionMeta {
    provenance: String,
    types: Vec<(usize, usize, bool)>,
}

/// Writes `<stem>.csv` (example id, role, type id) and a `<stem>.json` sidecar.
pub fn write_partition(partition: &FailurePartition, stem: &Path) -> Result<()> {
    let csv_path = stem.with_extension("csv");
    if let Some(parent) = csv_path.parent() {
        fsio::create_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(&csv_path)?;
    let mut emit = |set: &[Example], role: &str, type_id: Option<usize>| -> Result<()> {
        for e in set {
            w.serialize(PartitionRow {
                example_id: e.id,
                role: role.to_string(),
                type_id,
            })?;
        }
        Ok(())
    };
    emit(&partition.correct.train, "C_tr", None)?;
    emit(&partition.correct.val, "C_val", None)?;
    emit(&partition.correct.test, "C_te", None)?;
    for t in &partition.types {
        match &t.splits {
            Some(s) => {
                emit(&s.train, "F_tr", Some(t.id))?;
                emit(&s.val, "F_val", Some(t.id))?;
                emit(&s.test, "F_te", Some(t.id))?;
            }
            None => emit(&t.excluded, "F_excluded", Some(t.id))?,
        }
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    let meta = PartitionMeta {
        provenance: partition.provenance.clone(),
        types: partition
            .types
            .iter()
            .map(|t| (t.id, t.size, t.splits.is_some()))
            .collect(),
    };
    fsio::write_json(&stem.with_extension("json"), &meta)
}

pub fn read_partition(stem: &Path, examples: &HashMap<u64, &Example>) -> Result<FailurePartition> {
    let csv_path = stem.with_extension("csv");
    let meta: PartitionMeta = fsio::read_json(&stem.with_extension("json"))?;
    let mut correct = Splits::default();
    let mut types: BTreeMap<usize, FailureType> = meta
        .types
        .iter()
        .map(|&(id, size, eligible)| {
            (
                id,
                FailureType {
                    id,
                    size,
                    splits: eligible.then(Splits::default),
                    excluded: Vec::new(),
                },
            )
        })
        .collect();
    let mut reader = csv::Reader::from_path(&csv_path)?;
    for row in reader.deserialize::<PartitionRow>() {
        let row = row?;
        let ex = (*examples.get(&row.example_id).ok_or_else(|| {
            Error::malformed(&csv_path, format!("unknown example id {}", row.example_id))
        })?)
        .clone();
        match row.role.as_str() {
            "C_tr" => correct.train.push(ex),
            "C_val" => correct.val.push(ex),
            "C_te" => correct.test.push(ex),
            role @ ("F_tr" | "F_val" | "F_te" | "F_excluded") => {
                let id = row
                    .type_id
                    .ok_or_else(|| Error::malformed(&csv_path, "failure row without type id"))?;
                let t = types.get_mut(&id).ok_or_else(|| {
                    Error::malformed(&csv_path, format!("type {id} missing from sidecar"))
                })?;
                match (role, t.splits.as_mut()) {
                    ("F_excluded", None) => t.excluded.push(ex),
                    ("F_tr", Some(s)) => s.train.push(ex),
                    ("F_val", Some(s)) => s.val.push(ex),
                    ("F_te", Some(s)) => s.test.push(ex),
                    _ => {
                        return Err(Error::malformed(
                            &csv_path,
                            format!("role {role} inconsistent with type {id}"),
                        ))
                    }
                }
            }
            other => {
                return Err(Error::malformed(
                    &csv_path,
                    format!("unknown role `{other}`"),
                ))
            }
        }
    }
    let partition = FailurePartition {
        correct,
        types: types.into_values().collect(),
        provenance: meta.provenance,
    };
    partition.validate()?;
    Ok(partition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::ModelSpec;

    fn ex(id: u64, label: usize) -> Example {
        Example {
            id,
            input: vec![id as f64, 1.0],
            label,
            tag: format!("g{}", id % 3),
            split: Split::Pool,
        }
    }

    #[test]
    fn fractions_point_four_point_one() {
        let failures: Vec<Example> = (0..100).map(|i| ex(i, 0)).collect();
        let p = split_types(
            &failures,
            &vec![0; 100],
            Splits::default(),
            &SplitFractions::default(),
            MIN_TYPE_SIZE,
            1,
            "test",
        )
        .unwrap();
        let s = p.type_splits(0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (40, 10, 50));
    }

    #[test]
    fn small_types_are_excluded() {
        let failures: Vec<Example> = (0..25).map(|i| ex(i, 0)).collect();
        let assignment: Vec<usize> = (0..25).map(|i| if i < 5 { 1 } else { 0 }).collect();
        let p = split_types(
            &failures,
            &assignment,
            Splits::default(),
            &SplitFractions::default(),
            10,
            1,
            "test",
        )
        .unwrap();
        assert_eq!(p.excluded_ids(), vec![1]);
        assert_eq!(p.eligible_ids(), vec![0]);
        assert_eq!(p.types[1].excluded.len(), 5);
    }

    #[test]
    fn bad_fractions_rejected() {
        let bad = SplitFractions {
            train: 0.7,
            val: 0.3,
        };
        assert!(split_types(&[], &[], Splits::default(), &bad, 10, 0, "x").is_err());
    }

    #[test]
    fn perfect_and_constant_models() {
        // a model whose head has a huge bias towards class 1
        let spec = ModelSpec::mlp(2, &[2], 2);
        let mut values = vec![0.0; spec.layout().total_len()];
        let bias = spec.layout().slot("head.bias").unwrap().range();
        values[bias.start + 1] = 1.0;
        let constant = ModelState::from_values(spec, values, 0).unwrap();
        let pool: Vec<Example> = (0..40).map(|i| ex(i, (i % 2) as usize)).collect();
        let p = partition_failures(&constant, &pool).unwrap();
        assert_eq!(p.failures.len() + p.correct.len(), pool.len());
        assert_eq!(p.failures.len(), 20);
        assert!(p.failures.iter().all(|e| e.label == 0));
        assert!(p.predictions.iter().all(|&y| y == 1));

        let ones: Vec<Example> = pool.iter().filter(|e| e.label == 1).cloned().collect();
        let p = partition_failures(&constant, &ones).unwrap();
        assert!(p.nothing_to_analyze());
        assert_eq!(p.correct.len(), ones.len());
    }

    #[test]
    fn partition_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let all: Vec<Example> = (0..60).map(|i| ex(i, (i % 2) as usize)).collect();
        let correct = split_correct(&all[..20], &SplitFractions::default(), 3).unwrap();
        let assignment: Vec<usize> = (0..40).map(|i| if i < 33 { i % 3 } else { 3 }).collect();
        let p = split_types(
            &all[20..],
            &assignment,
            correct,
            &SplitFractions::default(),
            10,
            3,
            "unit",
        )
        .unwrap();
        let stem = dir.path().join("partition");
        write_partition(&p, &stem).unwrap();
        let by_id: HashMap<u64, &Example> = all.iter().map(|e| (e.id, e)).collect();
        assert_eq!(read_partition(&stem, &by_id).unwrap(), p);
    }
}
