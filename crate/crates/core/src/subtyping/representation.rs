use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Feature,
    Gradient,
    /// Output of a projection or embedding stage.
    Derived,
}

/// One real vector per example, all the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub space: Space,
    pub ids: Vec<u64>,
    pub vectors: Vec<Vec<f64>>,
    pub provenance: String,
}

impl Representation {
    pub fn new(
        space: Space,
        ids: Vec<u64>,
        vectors: Vec<Vec<f64>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} vectors", ids.len()),
                actual: format!("{}", vectors.len()),
            });
        }
        let dim = vectors.first().map_or(0, Vec::len);
        for (id, v) in ids.iter().zip(&vectors) {
            if v.len() != dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("vectors of length {dim}"),
                    actual: format!("length {} for example {id}", v.len()),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: format!("representation of example {id}"),
                });
            }
        }
        Ok(Representation {
            space,
            ids,
            vectors,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Subtracts the column means.
    pub fn centered(&self) -> Representation {
        let mean = column_means(&self.vectors);
        let vectors = self
            .vectors
            .iter()
            .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
            .collect();
        Representation {
            space: self.space,
            ids: self.ids.clone(),
            vectors,
            provenance: self.provenance.clone(),
        }
    }
}

pub(crate) fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let dim = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    let n = rows.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Per-example loss gradients or spatially averaged penultimate features of `failures`.
pub fn extract_representations(
    model: &ModelState,
    failures: &[Example],
    space: Space,
) -> Result<Representation> {
    if failures.is_empty() {
        return Err(Error::EmptySplit("no failures to represent".into()));
    }
    let vectors: Vec<Vec<f64>> = failures
        .par_iter()
        .map(|ex| match space {
            Space::Gradient => model.per_example_gradient(ex),
            Space::Feature => model.penultimate_features(&ex.input),
            Space::Derived => Err(Error::InvalidConfig(
                "cannot extract a derived representation".into(),
            )),
        })
        .collect::<Result<_>>()?;
    let provenance = format!(
        "{} space of {}-parameter model (seed {}, step {})",
        match space {
            Space::Gradient => "gradient",
            _ => "feature",
        },
        model.num_params(),
        model.seed,
        model.optimizer.step
    );
    Representation::new(
        space,
        failures.iter().map(|e| e.id).collect(),
        vectors,
        provenance,
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct RepresentationRow {
    example_id: u64,
    row: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RepresentationMeta {
    space: Space,
    rows: usize,
    dim: usize,
    provenance: String,
}

/// Writes `<stem>.csv` (example id, row index), `<stem>.bin` (row-major f64 matrix) and a
/// `<stem>.json` sidecar. The csv/bin pair is also what external embedding tools exchange.
pub fn write_representation(rep: &Representation, stem: &Path) -> Result<()> {
    let csv_path = stem.with_extension("csv");
    if let Some(parent) = csv_path.parent() {
        fsio::create_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(&csv_path)?;
    for (row, id) in rep.ids.iter().enumerate() {
        w.serialize(RepresentationRow {
            example_id: *id,
            row,
        })?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    let flat: Vec<f64> = rep.vectors.iter().flatten().copied().collect();
    fsio::write_f64s(&stem.with_extension("bin"), &flat)?;
    fsio::write_json(
        &stem.with_extension("json"),
        &RepresentationMeta {
            space: rep.space,
            rows: rep.len(),
            dim: rep.dim(),
            provenance: rep.provenance.clone(),
        },
    )
}

/// Reads a representation; the sidecar is optional (external tools need not write one).
pub fn read_representation(stem: &Path) -> Result<Representation> {
    let csv_path = stem.with_extension("csv");
    let mut reader = csv::Reader::from_path(&csv_path)?;
    let rows: Vec<RepresentationRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} has no rows",
            csv_path.display()
        )));
    }
    let bin_path = stem.with_extension("bin");
    let flat = fsio::read_f64s(&bin_path)?;
    if flat.len() % rows.len() != 0 {
        return Err(Error::LengthMismatch {
            manifest: rows.len(),
            tensors: flat.len(),
        });
    }
    let dim = flat.len() / rows.len();
    let meta_path = stem.with_extension("json");
    let (space, provenance) = if meta_path.exists() {
        let meta: RepresentationMeta = fsio::read_json(&meta_path)?;
        (meta.space, meta.provenance)
    } else {
        (
            Space::Derived,
            format!("external file {}", csv_path.display()),
        )
    };
    let mut ids = Vec::with_capacity(rows.len());
    let mut vectors = Vec::with_capacity(rows.len());
    for r in rows {
        if r.row * dim >= flat.len() {
            return Err(Error::malformed(
                &csv_path,
                format!("row index {} out of range", r.row),
            ));
        }
        ids.push(r.example_id);
        vectors.push(flat[r.row * dim..(r.row + 1) * dim].to_vec());
    }
    Representation::new(space, ids, vectors, provenance)
}

/// Reorders `rep` to follow `ids`; every id must be present exactly once.
pub(crate) fn align(rep: &Representation, ids: &[u64]) -> Result<Representation> {
    let index: HashMap<u64, usize> = rep.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    if index.len() != rep.ids.len() || ids.len() != rep.ids.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} distinct example ids", ids.len()),
            actual: format!("{} rows", rep.ids.len()),
        });
    }
    let vectors = ids
        .iter()
        .map(|id| {
            index
                .get(id)
                .map(|&i| rep.vectors[i].clone())
                .ok_or_else(|| {
                    Error::InvalidConfig(format!("example {id} missing from representation"))
                })
        })
        .collect::<Result<_>>()?;
    Representation::new(rep.space, ids.to_vec(), vectors, rep.provenance.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_and_sidecar_optional() {
        let dir = tempfile::tempdir().unwrap();
        let rep = Representation::new(
            Space::Gradient,
            vec![4, 9, 1],
            vec![vec![1.0, 2.0], vec![-0.5, 1e-300], vec![3.0, 4.0]],
            "unit",
        )
        .unwrap();
        let stem = dir.path().join("rep");
        write_representation(&rep, &stem).unwrap();
        assert_eq!(read_representation(&stem).unwrap(), rep);
        std::fs::remove_file(stem.with_extension("json")).unwrap();
        let bare = read_representation(&stem).unwrap();
        assert_eq!(bare.vectors, rep.vectors);
        assert_eq!(bare.space, Space::Derived);
    }

    #[test]
    fn ragged_vectors_rejected() {
        assert!(Representation::new(
            Space::Feature,
            vec![0, 1],
            vec![vec![1.0], vec![1.0, 2.0]],
            ""
        )
        .is_err());
    }

    #[test]
    fn align_reorders() {
        let rep = Representation::new(Space::Derived, vec![1, 2], vec![vec![1.0], vec![2.0]], "")
            .unwrap();
        let a = align(&rep, &[2, 1]).unwrap();
        assert_eq!(a.vectors, vec![vec![2.0], vec![1.0]]);
        assert!(align(&rep, &[2, 3]).is_err());
    }
}
