//! Checkpoints: `<stem>.json` header plus `<stem>.bin` holding parameters, then the Adam
//! first and second moments, as little-endian f64.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AdamState, Layout, ModelSpec, ModelState, ParameterVector};
use crate::error::{Error, Result};
use crate::fsio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub seed: u64,
    pub step: u64,
    pub num_params: usize,
    pub encoding: String,
}

const ENCODING: &str = "f64-le:params,adam_m,adam_v";

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn save_checkpoint(model: &ModelState, stem: &Path) -> Result<()> {
    let (header_path, data_path) = paths(stem);
    let header = CheckpointHeader {
        spec: model.spec.clone(),
        layout: model.params.layout.clone(),
        seed: model.seed,
        step: model.optimizer.step,
        num_params: model.params.len(),
        encoding: ENCODING.to_string(),
    };
    let mut data = Vec::with_capacity(3 * model.params.len());
    data.extend_from_slice(&model.params.values);
    data.extend_from_slice(&model.optimizer.first_moment);
    data.extend_from_slice(&model.optimizer.second_moment);
    fsio::write_json(&header_path, &header)?;
    fsio::write_f64s(&data_path, &data)
}

pub fn load_checkpoint(stem: &Path) -> Result<ModelState> {
    let (header_path, data_path) = paths(stem);
    let header: CheckpointHeader = fsio::read_json(&header_path)?;
    if header.encoding != ENCODING {
        return Err(Error::malformed(
            &header_path,
            format!("unknown encoding `{}`", header.encoding),
        ));
    }
    header.spec.validate()?;
    if header.spec.layout() != header.layout {
        return Err(Error::malformed(
            &header_path,
            "layout does not match the model spec",
        ));
    }
    let n = header.num_params;
    let data = fsio::read_f64s(&data_path)?;
    if data.len() != 3 * n {
        return Err(Error::malformed(
            &data_path,
            format!("expected {} values, found {}", 3 * n, data.len()),
        ));
    }
    let params = ParameterVector::new(data[..n].to_vec(), header.layout)?;
    Ok(ModelState {
        spec: header.spec,
        params,
        optimizer: AdamState {
            first_moment: data[n..2 * n].to_vec(),
            second_moment: data[2 * n..].to_vec(),
            step: header.step,
        },
        seed: header.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = ModelState::init(ModelSpec::conv(1, 4, 4, &[2, 3], 2), 11).unwrap();
        model.optimizer.first_moment[3] = 1.0 / 3.0;
        model.optimizer.second_moment[5] = 1e-300;
        model.optimizer.step = 17;
        let stem = dir.path().join("ckpt");
        save_checkpoint(&model, &stem).unwrap();
        let back = load_checkpoint(&stem).unwrap();
        assert_eq!(back, model);
        assert!(back
            .params
            .values
            .iter()
            .zip(&model.params.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_data_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = ModelState::init(ModelSpec::mlp(3, &[2], 2), 1).unwrap();
        let stem = dir.path().join("m");
        save_checkpoint(&model, &stem).unwrap();
        fsio::write_f64s(&stem.with_extension("bin"), &[0.0; 4]).unwrap();
        assert!(load_checkpoint(&stem).is_err());
    }
}
