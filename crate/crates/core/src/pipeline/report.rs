use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stages::{
    load_dataset, read_agreements, read_matrix, read_pool_summary, read_quality,
    read_repair_method, read_repair_runs, read_score_status, read_train_log, MethodAgreement,
    PoolSummary, ScoreStatus,
};
use super::{Manifest, Stage};
use crate::error::Result;
use crate::fsio;
use crate::quality::{quality_table_markdown, write_heatmap_ppm, QualityReport};
use crate::repair::{repair_table_markdown, RepairReport};
use crate::subtyping::{read_representation, read_subtyping, Method};

const HEATMAP_CELL: usize = 24;

/// Structured twin of `report.md`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub completed: Vec<String>,
    pub missing: Vec<String>,
    pub pool: Option<PoolSummary>,
    pub train_val_accuracy: Option<f64>,
    pub agreement: Vec<MethodAgreement>,
    pub quality: Vec<QualityReport>,
    pub not_scored: Vec<ScoreStatus>,
    pub repair_method: Option<Method>,
    pub repair: Vec<RepairReport>,
}

/// Renders `report/` from the completed stages of `run_dir`. The output depends only on the
/// run directory's contents, so it is byte-identical for identical runs.
pub fn emit_report(run_dir: &Path) -> Result<ReportSummary> {
    let manifest = Manifest::load(run_dir)?;
    let done = |s: Stage| manifest.hash(s).is_some();
    let (completed, missing): (Vec<Stage>, Vec<Stage>) = Stage::ALL[..Stage::ALL.len() - 1]
        .iter()
        .copied()
        .partition(|s| done(*s));
    let out = run_dir.join("report");
    fsio::create_dir(&out)?;

    let pool = if done(Stage::Partition) {
        Some(read_pool_summary(run_dir)?)
    } else {
        None
    };
    let train_val_accuracy = if done(Stage::Train) {
        Some(read_train_log(run_dir)?.val_accuracy)
    } else {
        None
    };
    let agreement = if done(Stage::Subtype) {
        read_agreements(run_dir)?
    } else {
        Vec::new()
    };

    let mut quality = Vec::new();
    let mut not_scored = Vec::new();
    if done(Stage::ScoreTypes) {
        for status in read_score_status(run_dir)? {
            if status.scored {
                let matrix = read_matrix(run_dir, status.method)?;
                let path = out
                    .join("heatmaps")
                    .join(format!("{}.ppm", status.method.as_str()));
                write_heatmap_ppm(&matrix, &path, HEATMAP_CELL)?;
                quality.push(read_quality(run_dir, status.method)?);
            } else {
                not_scored.push(status);
            }
        }
    }

    let (repair_method, repair) = if done(Stage::Repair) {
        (
            Some(read_repair_method(run_dir)?),
            read_repair_runs(run_dir)?.0,
        )
    } else {
        (None, Vec::new())
    };

    if done(Stage::Subtype) {
        write_scatter(run_dir, &out, &agreement)?;
    }

    let summary = ReportSummary {
        completed: completed.iter().map(|s| s.to_string()).collect(),
        missing: missing.iter().map(|s| s.to_string()).collect(),
        pool,
        train_val_accuracy,
        agreement,
        quality,
        not_scored,
        repair_method,
        repair,
    };
    let quality_md = quality_section(&summary);
    let repair_md = repair_section(&summary);
    fsio::write_text(&out.join("quality.md"), &quality_md)?;
    fsio::write_text(&out.join("repair.md"), &repair_md)?;
    fsio::write_text(
        &out.join("report.md"),
        &render(&summary, &quality_md, &repair_md),
    )?;
    fsio::write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One CSV per clustering method: the first two embedding coordinates of every failure with
/// its type under that method and its metadata tag.
fn write_scatter(run_dir: &Path, out: &Path, agreement: &[MethodAgreement]) -> Result<()> {
    let dataset = load_dataset(run_dir)?;
    let by_id = dataset.by_id();
    let subtype_dir = run_dir.join("subtype");
    for a in agreement {
        let embedding = subtype_dir.join(format!("{}-embedding", a.method.as_str()));
        if !embedding.with_extension("csv").is_file() {
            continue;
        }
        let rep = read_representation(&embedding)?;
        let subtyping = read_subtyping(&subtype_dir.join(a.method.as_str()))?;
        let types = subtyping.assignment();
        let mut text = String::from("example_id,x,y,type_id,tag\n");
        for (id, v) in rep.ids.iter().zip(&rep.vectors) {
            let x = v.first().copied().unwrap_or(0.0);
            let y = v.get(1).copied().unwrap_or(0.0);
            let tag = by_id.get(id).map_or("", |e| e.tag.as_str());
            writeln!(text, "{id},{x},{y},{},{tag}", types[id]).unwrap();
        }
        fsio::write_text(
            &out.join("scatter")
                .join(format!("{}.csv", a.method.as_str())),
            &text,
        )?;
    }
    Ok(())
}

fn gap(stage: Stage) -> String {
    format!("_Not available: stage `{stage}` has not been run._\n")
}

fn quality_section(s: &ReportSummary) -> String {
    let mut md = String::from("## Failure type quality\n\n");
    if !s.completed.iter().any(|c| c == Stage::ScoreTypes.as_str()) {
        md.push_str(&gap(Stage::ScoreTypes));
        return md;
    }
    if s.quality.is_empty() {
        md.push_str("_No subtyping had two or more scorable types._\n");
    } else {
        md.push_str(&quality_table_markdown(&s.quality));
    }
    for n in &s.not_scored {
        writeln!(
            md,
            "\n{} was not scored: {}.",
            n.method.label(),
            n.reason.as_deref().unwrap_or("")
        )
        .unwrap();
    }
    if !s.quality.is_empty() {
        md.push_str("\nFine-tuning matrices (row: model fine-tuned on a type; columns: each type's test split, then the correct cases):\n\n");
        for q in &s.quality {
            writeln!(
                md,
                "- {}: `heatmaps/{}.ppm`",
                q.method.label(),
                q.method.as_str()
            )
            .unwrap();
        }
    }
    md
}

fn repair_section(s: &ReportSummary) -> String {
    let mut md = String::from("## Repair\n\n");
    match s.repair_method {
        None => md.push_str(&gap(Stage::Repair)),
        Some(m) => {
            writeln!(md, "Failure types from {}.\n", m.label()).unwrap();
            md.push_str(&repair_table_markdown(&s.repair));
        }
    }
    md
}

fn render(s: &ReportSummary, quality_md: &str, repair_md: &str) -> String {
    let mut md =
        String::from("# Failure analysis report\n\n## Stages\n\n| Stage | Status |\n|---|---|\n");
    for stage in &Stage::ALL[..Stage::ALL.len() - 1] {
        let status = if s.completed.iter().any(|c| c == stage.as_str()) {
            "complete"
        } else {
            "missing"
        };
        writeln!(md, "| {stage} | {status} |").unwrap();
    }
    md.push_str("\n## Model and pool\n\n");
    match (&s.train_val_accuracy, &s.pool) {
        (None, _) => md.push_str(&gap(Stage::Train)),
        (Some(acc), None) => {
            writeln!(md, "Validation accuracy {acc:.4}.\n").unwrap();
            md.push_str(&gap(Stage::Partition));
        }
        (Some(acc), Some(p)) => {
            writeln!(
                md,
                "Validation accuracy {acc:.4}. Pool of {} examples: {} correct, {} failures ({:.1}%).",
                p.pool,
                p.correct,
                p.failures,
                100.0 * p.failures as f64 / p.pool as f64
            )
            .unwrap();
        }
    }
    md.push_str("\n## Failure types\n\n");
    if s.agreement.is_empty() {
        md.push_str(&gap(Stage::Subtype));
    } else {
        md.push_str("| Method | k | Sizes | ARI vs tags | NMI vs tags |\n|---|---|---|---|---|\n");
        for a in &s.agreement {
            let sizes: Vec<String> = a.sizes.iter().map(usize::to_string).collect();
            let flag = if a.degenerate { " (degenerate)" } else { "" };
            writeln!(
                md,
                "| {}{flag} | {} | {} | {:.3} | {:.3} |",
                a.method.label(),
                a.k,
                sizes.join(" / "),
                a.ari,
                a.nmi
            )
            .unwrap();
        }
        md.push_str("\nEmbedding scatter exports (x, y, type, tag) are under `scatter/`.\n");
    }
    md.push('\n');
    md.push_str(quality_md);
    md.push('\n');
    md.push_str(repair_md);
    if !s.missing.is_empty() {
        md.push_str("\n## Gaps\n\n");
        for m in &s.missing {
            writeln!(md, "- stage `{m}` has not been run").unwrap();
        }
    }
    md
}
