//! Stage ordering, caching, configuration mismatch, isolation and report rendering over a
//! run directory.

mod common;

use std::collections::BTreeMap;
use std::path::Path;

use repairbench_core::pipeline::{
    emit_report, read_matrix, Manifest, Pipeline, RunConfig, Stage, StageStatus,
};
use repairbench_core::subtyping::Method;
use repairbench_core::Error;

/// Relative path → bytes for every file under `dir`.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn under(snap: &BTreeMap<String, Vec<u8>>, prefix: &str) -> BTreeMap<String, Vec<u8>> {
    snap.iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

#[test]
fn stages_refuse_to_run_before_their_inputs() {
    let (dir, p) = common::staged(common::seeded(0), Stage::Partition);
    match p.run_stage(Stage::ScoreTypes) {
        Err(Error::MissingStage { stage, required }) => {
            assert_eq!(stage, "score-types");
            assert_eq!(required, "subtype");
        }
        other => panic!("expected a missing-stage error, got {other:?}"),
    }
    assert!(!dir.path().join("score-types").exists());
    let fresh = tempfile::tempdir().unwrap();
    let p = Pipeline::new(RunConfig::default(), fresh.path()).unwrap();
    assert!(matches!(
        p.run_stage(Stage::Train),
        Err(Error::MissingStage { .. })
    ));
}

#[test]
fn full_runs_are_cached_and_byte_identical() {
    let (a, pa) = common::staged(common::seeded(0), Stage::Report);
    let (b, _) = common::staged(common::seeded(0), Stage::Report);
    let first = snapshot(a.path());
    assert_eq!(first, snapshot(b.path()));
    assert!(first.contains_key("report/report.md"));
    assert!(first.contains_key("report/summary.json"));

    let runs = pa.run_all().unwrap();
    for r in &runs {
        assert_eq!(r.cached, r.stage != Stage::Report, "{:?}", r.stage);
    }
    assert_eq!(first, snapshot(a.path()));
    assert!(pa
        .status()
        .unwrap()
        .iter()
        .all(|(_, s)| *s == StageStatus::Complete));
}

#[test]
fn changed_sections_are_refused_until_cleared() {
    let (dir, _) = common::staged(common::seeded(0), Stage::Subtype);
    let mut config = common::seeded(0);
    config.subtyping.k_max = 6;
    let p = Pipeline::new(config, dir.path()).unwrap();
    match p.run_stage(Stage::Subtype) {
        Err(Error::ConfigMismatch { stage, dir: d, .. }) => {
            assert_eq!(stage, "subtype");
            assert_eq!(d, dir.path().join("subtype"));
        }
        other => panic!("expected a mismatch, got {other:?}"),
    }
    let status: BTreeMap<Stage, StageStatus> = p.status().unwrap().into_iter().collect();
    assert_eq!(status[&Stage::Partition], StageStatus::Complete);
    assert_eq!(status[&Stage::Subtype], StageStatus::Stale);
    assert!(p.run_stage(Stage::Repair).is_err());

    // A different seed invalidates everything from the first stage on.
    let reseeded = Pipeline::new(common::seeded(1), dir.path()).unwrap();
    match reseeded.run_stage(Stage::Subtype) {
        Err(Error::ConfigMismatch { stage, .. }) => assert_eq!(stage, "gen-data"),
        other => panic!("expected a mismatch, got {other:?}"),
    }

    let before = snapshot(dir.path());
    p.clear_stage(Stage::Subtype).unwrap();
    assert!(!dir.path().join("subtype").exists());
    let run = p.run_stage(Stage::Subtype).unwrap();
    assert!(!run.cached);
    let after = snapshot(dir.path());
    for stage in ["gen-data/", "train/", "partition/"] {
        assert_eq!(
            under(&before, stage),
            under(&after, stage),
            "{stage} changed"
        );
    }
    let manifest = Manifest::load(dir.path()).unwrap();
    assert_eq!(
        manifest.hash(Stage::Subtype).unwrap(),
        p.stage_hash(Stage::Subtype).unwrap()
    );
}

#[test]
fn unrelated_sections_keep_upstream_hashes() {
    let base = Pipeline::new(common::seeded(0), tempfile::tempdir().unwrap().keep()).unwrap();
    let mut config = common::seeded(0);
    config.repair.ewc_lambda = 5.0;
    config.quality.threshold = 0.8;
    let changed = Pipeline::new(config, tempfile::tempdir().unwrap().keep()).unwrap();
    for s in [
        Stage::GenData,
        Stage::Train,
        Stage::Partition,
        Stage::Subtype,
    ] {
        assert_eq!(base.stage_hash(s).unwrap(), changed.stage_hash(s).unwrap());
    }
    for s in [Stage::ScoreTypes, Stage::Repair, Stage::Report] {
        assert_ne!(base.stage_hash(s).unwrap(), changed.stage_hash(s).unwrap());
    }
    std::fs::remove_dir_all(base.run_dir()).unwrap();
    std::fs::remove_dir_all(changed.run_dir()).unwrap();
}

#[test]
fn partial_runs_render_with_gaps() {
    let (dir, p) = common::staged(common::seeded(0), Stage::Subtype);
    let summary = emit_report(dir.path()).unwrap();
    assert_eq!(summary.missing, vec!["score-types", "repair"]);
    let md = std::fs::read_to_string(dir.path().join("report/report.md")).unwrap();
    assert!(md.contains("_Not available: stage `score-types` has not been run._"));
    assert!(md.contains("_Not available: stage `repair` has not been run._"));
    assert!(md.contains("| Gradient clustering"), "{md}");

    // Scatter exports cover every failure once.
    let failures = summary.pool.as_ref().unwrap().failures;
    for m in [Method::FeatureClustering, Method::GradientClustering] {
        let text = std::fs::read_to_string(
            dir.path()
                .join(format!("report/scatter/{}.csv", m.as_str())),
        )
        .unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("example_id,x,y,type_id,tag"));
        assert_eq!(lines.count(), failures);
    }

    let early = tempfile::tempdir().unwrap();
    let q = Pipeline::new(p.config().clone(), early.path()).unwrap();
    q.run_stage(Stage::GenData).unwrap();
    let run = q.run_stage(Stage::Report).unwrap();
    assert!(!run.cached);
    let md = std::fs::read_to_string(early.path().join("report/report.md")).unwrap();
    assert!(md.contains("_Not available: stage `train` has not been run._"));
    assert!(md.contains("_Not available: stage `subtype` has not been run._"));
}

#[test]
fn heatmap_pixels_encode_the_matrix() {
    let (dir, _) = common::staged(common::seeded(0), Stage::Report);
    let matrix = read_matrix(dir.path(), Method::GradientClustering).unwrap();
    let bytes = std::fs::read(dir.path().join("report/heatmaps/gradient_clustering.ppm")).unwrap();
    let t = matrix.len();
    let cell = 24;
    let (w, h) = ((t + 2) * cell, t * cell);
    let header = format!("P6\n{w} {h}\n255\n");
    assert!(bytes.starts_with(header.as_bytes()));
    let pixels = &bytes[header.len()..];
    assert_eq!(pixels.len(), w * h * 3);
    let at = |x: usize, y: usize| pixels[3 * (y * w + x)];
    for i in 0..t {
        for j in 0..t {
            let expect = (255.0 * matrix.values[i][j]).round() as u8;
            assert_eq!(at(j * cell + cell / 2, i * cell + cell / 2), expect);
        }
        assert_eq!(at(t * cell + 1, i * cell), 255);
        assert_eq!(
            at((t + 1) * cell + 3, i * cell + 5),
            (255.0 * matrix.correct[i]).round() as u8
        );
    }
}
