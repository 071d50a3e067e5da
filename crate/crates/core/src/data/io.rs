//! Dataset directory format:
//!
//! - `header.json`: input shape, class count, row count
//! - `manifest.csv`: `id,offset,label,metadata,split`, one row per example; `offset` indexes
//!   tensors in `tensors.bin`
//! - `tensors.bin`: little-endian f64, row-major, one tensor after another

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::InputShape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub shape: InputShape,
    pub num_classes: usize,
    pub rows: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: u64,
    offset: usize,
    label: usize,
    metadata: String,
    split: String,
}

pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fsio::create_dir(dir)?;
    let header = DatasetHeader {
        shape: dataset.shape,
        num_classes: dataset.num_classes,
        rows: dataset.examples.len(),
    };
    fsio::write_json(&dir.join("header.json"), &header)?;
    let mut writer = csv::Writer::from_path(dir.join("manifest.csv"))?;
    let mut tensors = Vec::with_capacity(dataset.examples.len() * dataset.shape.len());
    for (offset, ex) in dataset.examples.iter().enumerate() {
        writer.serialize(ManifestRow {
            id: ex.id,
            offset,
            label: ex.label,
            metadata: ex.tag.clone(),
            split: ex.split.as_str().to_string(),
        })?;
        tensors.extend_from_slice(&ex.input);
    }
    writer
        .flush()
        .map_err(|e| Error::io("writing manifest.csv", e))?;
    fsio::write_f64s(&dir.join("tensors.bin"), &tensors)
}

/// Loads a dataset from its `manifest.csv`; `header.json` and `tensors.bin` are read from
/// the same directory.
pub fn load_external(manifest: &Path) -> Result<Dataset> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let header: DatasetHeader = fsio::read_json(&dir.join("header.json"))?;
    let mut reader = csv::Reader::from_path(manifest)?;
    let rows: Vec<ManifestRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no rows",
            manifest.display()
        )));
    }
    let width = header.shape.len();
    let tensor_path = dir.join("tensors.bin");
    let values = fsio::read_f64s(&tensor_path)?;
    if width == 0 || values.len() % width != 0 {
        return Err(Error::malformed(
            &tensor_path,
            format!(
                "{} values is not a whole number of {width}-value tensors",
                values.len()
            ),
        ));
    }
    let n_tensors = values.len() / width;
    if n_tensors != rows.len() {
        return Err(Error::LengthMismatch {
            manifest: rows.len(),
            tensors: n_tensors,
        });
    }
    let mut examples = Vec::with_capacity(rows.len());
    for row in rows {
        if row.offset >= n_tensors {
            return Err(Error::malformed(
                manifest,
                format!("offset {} beyond {} tensors", row.offset, n_tensors),
            ));
        }
        let split = Split::parse(&row.split)
            .ok_or_else(|| Error::malformed(manifest, format!("unknown split `{}`", row.split)))?;
        examples.push(Example {
            id: row.id,
            input: values[row.offset * width..(row.offset + 1) * width].to_vec(),
            label: row.label,
            tag: row.metadata,
            split,
        });
    }
    let dataset = Dataset {
        shape: header.shape,
        num_classes: header.num_classes,
        examples,
    };
    dataset.validate()?;
    Ok(dataset)
}
