use crate::error::{Error, Result};

/// Mean Euclidean silhouette. Points in singleton clusters contribute 0.
pub fn silhouette(points: &[Vec<f64>], assignment: &[usize]) -> Result<f64> {
    if points.len() != assignment.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} assignments", points.len()),
            actual: format!("{}", assignment.len()),
        });
    }
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &c in assignment {
        sizes[c] += 1;
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidConfig(
            "silhouette needs every cluster non-empty".into(),
        ));
    }
    if k < 2 {
        return Err(Error::InvalidConfig(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let n = points.len();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[assignment[j]] += dist(&points[i], &points[j]);
            }
        }
        let own = assignment[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    super::kmeans::sq_dist(a, b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_and_gaps_rejected() {
        assert!(silhouette(&[vec![0.0], vec![1.0]], &[0, 0]).is_err());
        assert!(silhouette(&[vec![0.0], vec![1.0]], &[0, 2]).is_err());
    }

    #[test]
    fn singletons_contribute_zero() {
        let s = silhouette(&[vec![0.0], vec![0.1], vec![50.0]], &[0, 0, 1]).unwrap();
        // Two clustered points score nearly 1 each; the singleton adds 0.
        assert!(s > 0.6 && s < 2.0 / 3.0);
    }
}
