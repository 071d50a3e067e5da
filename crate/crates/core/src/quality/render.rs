use std::fmt::Write as _;
use std::path::Path;

use super::{rank_methods, FinetuneMatrix, QualityReport};
use crate::error::{Error, Result};
use crate::fsio;

/// Rows `M_<i>`, columns `F_te_<j>` then `C_te`; values in shortest round-trip form.
pub fn write_matrix_csv(matrix: &FinetuneMatrix, path: &Path) -> Result<()> {
    let mut out = String::from("model");
    for id in &matrix.type_ids {
        write!(out, ",F_te_{id}").unwrap();
    }
    out.push_str(",C_te\n");
    for ((id, row), c) in matrix
        .type_ids
        .iter()
        .zip(&matrix.values)
        .zip(&matrix.correct)
    {
        write!(out, "M_{id}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        writeln!(out, ",{c}").unwrap();
    }
    fsio::write_text(path, &out)
}

/// Type ids, values and correct column as read back from a matrix CSV.
pub type MatrixColumns = (Vec<usize>, Vec<Vec<f64>>, Vec<f64>);

pub fn read_matrix_csv(path: &Path) -> Result<MatrixColumns> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    let t = header.len().saturating_sub(2);
    let bad = |reason: String| Error::malformed(path, reason);
    let mut ids = Vec::with_capacity(t);
    let mut values = Vec::with_capacity(t);
    let mut correct = Vec::with_capacity(t);
    for record in reader.records() {
        let record = record?;
        if record.len() != t + 2 {
            return Err(bad(format!(
                "row has {} fields, expected {}",
                record.len(),
                t + 2
            )));
        }
        let id = record[0]
            .strip_prefix("M_")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("bad row label {:?}", &record[0])))?;
        let nums = record
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| bad(format!("bad number {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        ids.push(id);
        correct.push(nums[t]);
        values.push(nums[..t].to_vec());
    }
    Ok((ids, values, correct))
}

/// Binary PPM, one `cell`-pixel square per entry (grey level `round(255 * value)`), with the
/// correct-case column appended after a one-cell gap.
pub fn write_heatmap_ppm(matrix: &FinetuneMatrix, path: &Path, cell: usize) -> Result<()> {
    let t = matrix.len();
    let cell = cell.max(1);
    let cols = t + 2;
    let (w, h) = (cols * cell, t * cell);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        let i = y / cell;
        for x in 0..w {
            let j = x / cell;
            let (r, g, b) = if j < t {
                grey(matrix.values[i][j])
            } else if j == t {
                (255, 255, 255)
            } else {
                grey(matrix.correct[i])
            };
            bytes.extend_from_slice(&[r, g, b]);
        }
    }
    fsio::write_bytes(path, &bytes)
}

fn grey(v: f64) -> (u8, u8, u8) {
    let g = (255.0 * v.clamp(0.0, 1.0)).round() as u8;
    (g, g, g)
}

fn mark(text: String, rank: Option<usize>) -> String {
    match rank {
        Some(0) => format!("**{text}**"),
        Some(1) => format!("_{text}_"),
        _ => text,
    }
}

/// Position of `value` among the distinct values of `all`, descending.
fn place(all: &[f64], value: f64) -> Option<usize> {
    let mut distinct: Vec<f64> = all.to_vec();
    distinct.sort_by(|a, b| b.total_cmp(a));
    distinct.dedup();
    distinct.iter().position(|v| *v == value)
}

/// Methods ranked by Learnability then Independence, `mean±std` per cell; best in bold,
/// second best in italics.
pub fn quality_table_markdown(reports: &[QualityReport]) -> String {
    let ls: Vec<f64> = reports
        .iter()
        .map(|r| round2(r.learnability_mean))
        .collect();
    let is: Vec<f64> = reports
        .iter()
        .map(|r| round2(r.independence_mean))
        .collect();
    let mut out = String::from(
        "| Method | Types | Learnability | Independence | Flags |\n|---|---|---|---|---|\n",
    );
    for i in rank_methods(reports) {
        let r = &reports[i];
        let mut flags = Vec::new();
        if !r.excluded.is_empty() {
            flags.push(format!("excluded {:?}", r.excluded));
        }
        if !r.unrepairable.is_empty() {
            flags.push(format!("unrepairable {:?}", r.unrepairable));
        }
        writeln!(
            out,
            "| {} | {} | {} | {} | {} |",
            r.method.label(),
            r.type_ids.len(),
            mark(
                format!("{:.2}±{:.2}", r.learnability_mean, r.learnability_std),
                place(&ls, ls[i])
            ),
            mark(
                format!("{:.2}±{:.2}", r.independence_mean, r.independence_std),
                place(&is, is[i])
            ),
            flags.join("; "),
        )
        .unwrap();
    }
    out
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}
