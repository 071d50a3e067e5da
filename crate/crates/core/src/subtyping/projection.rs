use rand::Rng;
use rand_distr::StandardNormal;

use super::{Representation, Space};
use crate::error::{Error, Result};
use crate::seed;

/// Dense `target x input` matrix of i.i.d. standard normals, fixed by `(seed, input, target)`.
pub fn gaussian_matrix(input_dim: usize, target_dim: usize, seed: u64) -> Vec<f64> {
    let tag = format!("gaussian-projection:{input_dim}x{target_dim}");
    let mut rng = seed::rng(seed::derive_seed(seed, &tag, 0));
    (0..input_dim * target_dim)
        .map(|_| rng.sample(StandardNormal))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub representation: Representation,
    /// Set when the target dimension exceeded the input and the data passed through.
    pub warning: Option<String>,
}

/// `y = G x / sqrt(d)` with `G` drawn by [`gaussian_matrix`].
pub fn random_project(rep: &Representation, target_dim: usize, seed: u64) -> Result<Projected> {
    if target_dim == 0 {
        return Err(Error::InvalidConfig(
            "projection dimension must be >= 1".into(),
        ));
    }
    let input_dim = rep.dim();
    if target_dim > input_dim {
        return Ok(Projected {
            representation: rep.clone(),
            warning: Some(format!(
                "projection dimension {target_dim} exceeds input dimension {input_dim}; passing through"
            )),
        });
    }
    let g = gaussian_matrix(input_dim, target_dim, seed);
    let scale = 1.0 / (target_dim as f64).sqrt();
    let vectors = rep
        .vectors
        .iter()
        .map(|x| {
            (0..target_dim)
                .map(|r| {
                    let row = &g[r * input_dim..(r + 1) * input_dim];
                    scale * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect()
        })
        .collect();
    let provenance = format!(
        "{} | gaussian projection {input_dim}->{target_dim} (seed {seed})",
        rep.provenance
    );
    Ok(Projected {
        representation: Representation::new(Space::Derived, rep.ids.clone(), vectors, provenance)?,
        warning: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(vectors: Vec<Vec<f64>>) -> Representation {
        let ids = (0..vectors.len() as u64).collect();
        Representation::new(Space::Gradient, ids, vectors, "t").unwrap()
    }

    #[test]
    fn zero_maps_to_zero_and_projection_is_linear() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).cos()).collect();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let p = random_project(&rep(vec![vec![0.0; 40], x, y, sum]), 8, 3)
            .unwrap()
            .representation;
        assert!(p.vectors[0].iter().all(|v| *v == 0.0));
        for k in 0..8 {
            let lhs = p.vectors[3][k];
            let rhs = p.vectors[1][k] + p.vectors[2][k];
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn oversized_target_passes_through_with_warning() {
        let r = rep(vec![vec![1.0, 2.0]]);
        let p = random_project(&r, 5, 0).unwrap();
        assert!(p.warning.is_some());
        assert_eq!(p.representation.vectors, r.vectors);
    }

    #[test]
    fn deterministic_per_seed() {
        let r = rep(vec![(0..30).map(|i| i as f64).collect()]);
        let a = random_project(&r, 4, 9).unwrap().representation;
        let b = random_project(&r, 4, 9).unwrap().representation;
        let c = random_project(&r, 4, 10).unwrap().representation;
        assert_eq!(a, b);
        assert_ne!(a.vectors, c.vectors);
    }
}
