//! Failure analysis and repair for small classifiers.
//!
//! The pipeline: train a model, split its evaluation pool into correct cases and failures,
//! group the failures into types (gradient or feature clustering, or a baseline), score the
//! grouping by fine-tuning one model per type, and repair the model on selected types while
//! checking that previously correct cases stay correct.

pub mod data;
pub mod error;
pub mod fsio;
pub mod model;
pub mod pipeline;
pub mod quality;
pub mod repair;
pub mod seed;
pub mod subtyping;

pub use data::{Dataset, Example, FailurePartition, PlantedConfig, Split};
pub use error::{Error, ErrorKind, Result};
pub use model::{ModelSpec, ModelState, ParameterVector, TrainConfig};
