use std::path::PathBuf;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::representation::{align, column_means, read_representation};
use super::{Representation, Space};
use crate::error::{Error, Result};

pub const DEFAULT_EMBED_DIM: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum EmbedMethod {
    Pca,
    /// Vectors written by an out-of-process tool in the representation file format.
    External {
        path: PathBuf,
    },
}

/// Reduces `rep` to `out_dim` dimensions. PCA is deterministic; `seed` is recorded only.
pub fn embed(
    rep: &Representation,
    method: &EmbedMethod,
    out_dim: usize,
    seed: u64,
) -> Result<Representation> {
    if out_dim == 0 {
        return Err(Error::InvalidConfig(
            "embedding dimension must be >= 1".into(),
        ));
    }
    if rep.len() <= out_dim {
        return Err(Error::TooFewPoints {
            required: out_dim + 1,
            actual: rep.len(),
        });
    }
    match method {
        EmbedMethod::Pca => pca(rep, out_dim, seed),
        EmbedMethod::External { path } => {
            let external = read_representation(path)?;
            let mut aligned = align(&external, &rep.ids)?;
            aligned.space = Space::Derived;
            aligned.provenance =
                format!("{} | external embedding {}", rep.provenance, path.display());
            Ok(aligned)
        }
    }
}

/// Projects onto the leading principal directions. Each direction's sign is fixed so that
/// its largest-magnitude loading (first such index on ties) is positive.
pub fn pca(rep: &Representation, out_dim: usize, seed: u64) -> Result<Representation> {
    let n = rep.len();
    let d = rep.dim();
    if n == 0 || d == 0 {
        return Err(Error::EmptySplit("nothing to embed".into()));
    }
    let mean = column_means(&rep.vectors);
    let x = DMatrix::from_fn(n, d, |i, j| rep.vectors[i][j] - mean[j]);
    let (values, directions) = principal_directions(&x);
    let scale = values.first().copied().unwrap_or(0.0).max(0.0);
    let tol = scale * 1e-10 * (n.max(d) as f64);
    let rank = values.iter().take_while(|v| **v > tol && **v > 0.0).count();
    if rank == 0 {
        return Err(Error::Degenerate(
            "all representation vectors are identical".into(),
        ));
    }
    let keep = rank.min(out_dim);
    let mut provenance = format!("{} | pca {d}->{keep}", rep.provenance);
    if keep < out_dim {
        provenance.push_str(&format!(
            " (rank {rank} < {out_dim}; emitted all available components)"
        ));
    }
    let _ = seed;
    let vectors = (0..n)
        .map(|i| {
            (0..keep)
                .map(|c| (0..d).map(|j| x[(i, j)] * directions[c][j]).sum())
                .collect()
        })
        .collect();
    Representation::new(Space::Derived, rep.ids.clone(), vectors, provenance)
}

/// Eigenvalues (descending) of the scatter matrix and the unit directions, sign-canonicalised.
fn principal_directions(x: &DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (n, d) = x.shape();
    let mut pairs: Vec<(f64, Vec<f64>)> = if d <= n {
        let eig = SymmetricEigen::new(x.transpose() * x);
        (0..d)
            .map(|c| {
                (
                    eig.eigenvalues[c],
                    eig.eigenvectors.column(c).iter().copied().collect(),
                )
            })
            .collect()
    } else {
        // Wide data: work with the n x n Gram matrix and map back through X^T.
        let eig = SymmetricEigen::new(x * x.transpose());
        (0..n)
            .map(|c| {
                let v = x.transpose() * eig.eigenvectors.column(c);
                let norm = v.norm();
                let dir = if norm > 0.0 { v / norm } else { v };
                (eig.eigenvalues[c], dir.iter().copied().collect())
            })
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, dir) in &mut pairs {
        let mut lead = 0;
        for (j, v) in dir.iter().enumerate() {
            if v.abs() > dir[lead].abs() {
                lead = j;
            }
        }
        if dir[lead] < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
    }
    pairs.into_iter().unzip()
}
