//! Examples and datasets, the planted-subgroup generators, on-disk ingestion, and the
//! correct/failure partition with its per-type splits.

mod io;
mod partition;
mod planted;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

pub use io::{export_dataset, load_external, DatasetHeader};
pub use partition::{
    partition_failures, read_partition, split_correct, split_types, write_partition,
    FailurePartition, FailureType, PoolPartition, SplitFractions, Splits, MIN_TYPE_SIZE,
};
pub use planted::{
    check_recoverability, generate_planted, low_prevalence_share, PlantedConfig, Subgroup,
    SubgroupShape, LOW_PREVALENCE, MIN_LOW_PREVALENCE_SHARE,
};

use crate::error::{Error, Result};
use crate::model::InputShape;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Pool,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Pool => "pool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "pool" => Some(Split::Pool),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    /// Flat input, row-major `C x H x W` for images.
    pub input: Vec<f64>,
    pub label: usize,
    /// Metadata subgroup tag.
    pub tag: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: InputShape,
    pub num_classes: usize,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.examples.is_empty() {
            return Err(Error::EmptyDataset("dataset has no examples".into()));
        }
        let mut ids = HashSet::with_capacity(self.examples.len());
        for ex in &self.examples {
            if !ids.insert(ex.id) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate example id {}",
                    ex.id
                )));
            }
            if ex.label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: ex.label,
                    num_classes: self.num_classes,
                });
            }
            if ex.input.len() != self.shape.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("input {}", self.shape),
                    actual: format!("{} values for example {}", ex.input.len(), ex.id),
                });
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<Example> {
        self.examples
            .iter()
            .filter(|e| e.split == split)
            .cloned()
            .collect()
    }

    pub fn by_id(&self) -> std::collections::HashMap<u64, &Example> {
        self.examples.iter().map(|e| (e.id, e)).collect()
    }
}
