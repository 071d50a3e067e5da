//! The staged pipeline over a run directory: generate data, train, partition the pool,
//! subtype the failures, score each subtyping, repair, and report.
//!
//! Every stage writes into its own subdirectory and is recorded in `manifest.json` under a
//! hash of the config sections it reads plus its upstream stage's hash. A rerun with the
//! same hash is a cache hit; a different hash is refused until the stale outputs are removed.

mod config;
mod report;
mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    DatasetSection, DatasetSource, ModelSection, PartitionSection, PlanSpec, Preset, RepairSection,
    RunConfig, SubtypingSection,
};
pub use report::{emit_report, ReportSummary};
pub use stages::{
    load_dataset, load_model, load_pool, read_agreements, read_matrix, read_quality,
    read_repair_runs, read_type_partition, MethodAgreement, RepairRun, ScoreStatus,
};

use crate::error::{Error, Result};
use crate::fsio;
use config::section_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    Train,
    Partition,
    Subtype,
    ScoreTypes,
    Repair,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::Train,
        Stage::Partition,
        Stage::Subtype,
        Stage::ScoreTypes,
        Stage::Repair,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Partition => "partition",
            Stage::Subtype => "subtype",
            Stage::ScoreTypes => "score-types",
            Stage::Repair => "repair",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s)
    }

    /// The stage whose outputs this one reads. The report reads whatever exists.
    pub fn requires(self) -> Option<Stage> {
        match self {
            Stage::GenData | Stage::Report => None,
            Stage::Train => Some(Stage::GenData),
            Stage::Partition => Some(Stage::Train),
            Stage::Subtype => Some(Stage::Partition),
            Stage::ScoreTypes | Stage::Repair => Some(Stage::Subtype),
        }
    }

    pub fn explain(self) -> &'static str {
        match self {
            Stage::GenData => {
                "Generates the planted benchmark (or ingests an external manifest) and writes it as \
                 gen-data/dataset/{header.json,manifest.csv,tensors.bin}. Reads: seed, [dataset]."
            }
            Stage::Train => {
                "Trains the classifier on the train split with early stopping on validation accuracy \
                 and writes train/model.{json,bin} and train/log.json. Reads: [model]."
            }
            Stage::Partition => {
                "Splits the pool into correct cases and failures, then splits the correct cases into \
                 C_tr/C_val/C_te. Writes partition/pool.csv and partition/summary.json. Reads: [partition]."
            }
            Stage::Subtype => {
                "Groups the failures with every configured method (random, fpfn, metadata, feature and \
                 gradient clustering), splits each type into F_tr/F_val/F_te and scores agreement with \
                 the metadata tags. Writes subtype/<method>.{csv,json}, subtype/<method>-partition.*, \
                 embeddings for clustering methods and subtype/agreement.json. Reads: [subtyping]."
            }
            Stage::ScoreTypes => {
                "For each subtyping, fine-tunes one model per type under the compatibility constraint \
                 and writes the accuracy matrix (score-types/<method>-matrix.{csv,json}) and the \
                 Learnability/Independence report (score-types/<method>-quality.json). Reads: [quality]."
            }
            Stage::Repair => {
                "Runs the configured repair plans on the types of one subtyping and writes \
                 repair/reports.json (per-type, correct-case and overall test accuracy) and \
                 repair/runs.json (training logs). Reads: [repair]."
            }
            Stage::Report => {
                "Renders report/report.md, report/summary.json, heatmaps and embedding scatter exports \
                 from whatever stages are complete, listing the missing ones."
            }
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub hash: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Manifest> {
        let path = run_dir.join(MANIFEST_FILE);
        if path.is_file() {
            fsio::read_json(&path)
        } else {
            Ok(Manifest::default())
        }
    }

    fn save(&self, run_dir: &Path) -> Result<()> {
        let tmp = run_dir.join(format!("{MANIFEST_FILE}.tmp"));
        fsio::write_json(&tmp, self)?;
        std::fs::rename(&tmp, run_dir.join(MANIFEST_FILE))
            .map_err(|e| Error::io("updating manifest", e))
    }

    pub fn hash(&self, stage: Stage) -> Option<&str> {
        self.stages.get(stage.as_str()).map(|r| r.hash.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Missing,
    Complete,
    /// Recorded under a different configuration.
    Stale,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRun {
    pub stage: Stage,
    pub cached: bool,
}

pub struct Pipeline {
    config: RunConfig,
    dir: PathBuf,
}

impl Pipeline {
    pub fn new(config: RunConfig, run_dir: impl Into<PathBuf>) -> Result<Pipeline> {
        config.validate()?;
        let dir = run_dir.into();
        fsio::create_dir(&dir)?;
        Ok(Pipeline { config, dir })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn run_dir(&self) -> &Path {
        &self.dir
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.as_str())
    }

    /// Cache key of `stage` under the current configuration.
    pub fn stage_hash(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        Ok(match stage {
            Stage::GenData => section_hash("gen-data", &external_digest(c)?, &(c.seed, &c.dataset)),
            Stage::Train => section_hash("train", &self.stage_hash(Stage::GenData)?, &c.model),
            Stage::Partition => {
                section_hash("partition", &self.stage_hash(Stage::Train)?, &c.partition)
            }
            Stage::Subtype => {
                section_hash("subtype", &self.stage_hash(Stage::Partition)?, &c.subtyping)
            }
            Stage::ScoreTypes => {
                section_hash("score-types", &self.stage_hash(Stage::Subtype)?, &c.quality)
            }
            Stage::Repair => section_hash("repair", &self.stage_hash(Stage::Subtype)?, &c.repair),
            Stage::Report => {
                let upstream = [
                    self.stage_hash(Stage::ScoreTypes)?,
                    self.stage_hash(Stage::Repair)?,
                ]
                .join(":");
                section_hash("report", &upstream, &())
            }
        })
    }

    pub fn status(&self) -> Result<Vec<(Stage, StageStatus)>> {
        let manifest = Manifest::load(&self.dir)?;
        Stage::ALL
            .into_iter()
            .map(|s| {
                let status = match manifest.hash(s) {
                    None => StageStatus::Missing,
                    Some(h) if h == self.stage_hash(s)? => StageStatus::Complete,
                    Some(_) => StageStatus::Stale,
                };
                Ok((s, status))
            })
            .collect()
    }

    /// Runs `stage` unless it is already complete under the current configuration. The
    /// report is re-rendered on every call.
    pub fn run_stage(&self, stage: Stage) -> Result<StageRun> {
        let mut manifest = Manifest::load(&self.dir)?;
        if let Some(req) = stage.requires() {
            if manifest.hash(req).is_none() {
                return Err(Error::MissingStage {
                    stage: stage.to_string(),
                    required: req.to_string(),
                });
            }
            if let Some(err) = self.earliest_stale(&manifest, req)? {
                return Err(err);
            }
        }
        let hash = self.stage_hash(stage)?;
        if stage != Stage::Report {
            if let Some(recorded) = manifest.hash(stage) {
                if recorded == hash {
                    return Ok(StageRun {
                        stage,
                        cached: true,
                    });
                }
                return Err(Error::ConfigMismatch {
                    stage: stage.to_string(),
                    recorded: recorded.to_string(),
                    current: hash,
                    dir: self.stage_dir(stage),
                });
            }
        }
        let out = self.stage_dir(stage);
        if out.exists() {
            // Leftovers of an interrupted run or a previous report.
            std::fs::remove_dir_all(&out)
                .map_err(|e| Error::io(format!("clearing {}", out.display()), e))?;
        }
        fsio::create_dir(&out)?;
        match stage {
            Stage::GenData => stages::gen_data(&self.config, &out)?,
            Stage::Train => stages::train_model(&self.config, &self.dir, &out)?,
            Stage::Partition => stages::partition(&self.config, &self.dir, &out)?,
            Stage::Subtype => stages::subtype(&self.config, &self.dir, &out)?,
            Stage::ScoreTypes => stages::score_types(&self.config, &self.dir, &out)?,
            Stage::Repair => stages::repair(&self.config, &self.dir, &out)?,
            Stage::Report => {
                emit_report(&self.dir)?;
            }
        }
        manifest
            .stages
            .insert(stage.as_str().to_string(), StageRecord { hash });
        manifest.save(&self.dir)?;
        Ok(StageRun {
            stage,
            cached: false,
        })
    }

    /// Mismatch error for the first recorded stage on the chain ending at `last` whose hash
    /// differs from the current configuration's.
    fn earliest_stale(&self, manifest: &Manifest, last: Stage) -> Result<Option<Error>> {
        let mut chain = vec![last];
        while let Some(r) = chain.last().and_then(|s| s.requires()) {
            chain.push(r);
        }
        for &s in chain.iter().rev() {
            let current = self.stage_hash(s)?;
            if let Some(recorded) = manifest.hash(s) {
                if recorded != current {
                    return Ok(Some(Error::ConfigMismatch {
                        stage: s.to_string(),
                        recorded: recorded.to_string(),
                        current,
                        dir: self.stage_dir(s),
                    }));
                }
            }
        }
        Ok(None)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<Vec<StageRun>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    /// Deletes the outputs and manifest entry of `stage`; upstream stages are untouched.
    pub fn clear_stage(&self, stage: Stage) -> Result<()> {
        let mut manifest = Manifest::load(&self.dir)?;
        manifest.stages.remove(stage.as_str());
        manifest.save(&self.dir)?;
        let out = self.stage_dir(stage);
        if out.exists() {
            std::fs::remove_dir_all(&out)
                .map_err(|e| Error::io(format!("removing {}", out.display()), e))?;
        }
        Ok(())
    }
}

/// Digest of an external dataset's files, so edits to them invalidate the cache.
fn external_digest(config: &RunConfig) -> Result<String> {
    let Some(manifest) = &config.dataset.manifest else {
        return Ok(String::new());
    };
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut h = Sha256::new();
    for path in [
        manifest.clone(),
        dir.join("header.json"),
        dir.join("tensors.bin"),
    ] {
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
