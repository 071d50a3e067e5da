use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub ari: f64,
    pub nmi: f64,
}

/// Maps arbitrary labels to dense indices in first-seen order.
pub fn encode<T: Ord + Clone>(labels: &[T]) -> Vec<usize> {
    let mut index = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = index.len();
            *index.entry(l.clone()).or_insert(next)
        })
        .collect()
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, rows, cols)
}

fn pairs(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let (table, rows, cols) = contingency(a, b);
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.iter().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.iter().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // Both partitions trivial (all singletons or one block): identical iff they agree.
        return if index == expected { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / n) * (c / n).ln())
        .sum()
}

/// Mutual information normalised by the arithmetic mean of the two entropies.
pub fn normalized_mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let (table, rows, cols) = contingency(a, b);
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0.0 {
                mi += (c / n) * ((c * n) / (rows[i] * cols[j])).ln();
            }
        }
    }
    let h = 0.5 * (entropy(&rows, n) + entropy(&cols, n));
    if h == 0.0 {
        1.0
    } else {
        (mi / h).clamp(0.0, 1.0)
    }
}

pub fn agreement(assignment: &[usize], reference: &[String]) -> Result<Agreement> {
    if assignment.len() != reference.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} reference tags", assignment.len()),
            actual: format!("{}", reference.len()),
        });
    }
    if assignment.is_empty() {
        return Err(Error::EmptySplit("agreement over no examples".into()));
    }
    let a = encode(assignment);
    let b = encode(reference);
    Ok(Agreement {
        ari: adjusted_rand_index(&a, &b),
        nmi: normalized_mutual_information(&a, &b),
    })
}
