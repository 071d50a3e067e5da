use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSource, ModelSection, RepairSection, RunConfig};
use crate::data::{
    export_dataset, generate_planted, load_external, partition_failures, read_partition,
    split_correct, split_types, write_partition, Dataset, Example, FailurePartition, Split, Splits,
};
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{
    evaluate, load_checkpoint, save_checkpoint, train, EpochRecord, InputShape, Metric, ModelKind,
    ModelSpec, ModelState,
};
use crate::quality::{aggregate, build_matrix, write_matrix_csv, FinetuneMatrix, QualityReport};
use crate::repair::{evaluate_repair, repair as run_repair, RepairPlan, RepairReport, Strategy};
use crate::seed::derive_seed;
use crate::subtyping::{
    agreement, baseline_fpfn, baseline_metadata, baseline_random, cluster_failures,
    write_representation, write_subtyping, Method, Space, Subtyping,
};

fn method_index(m: Method) -> u64 {
    Method::ALL
        .iter()
        .position(|x| *x == m)
        .expect("every method is listed") as u64
}

pub(crate) fn gen_data(config: &RunConfig, out: &Path) -> Result<()> {
    let seed = derive_seed(config.seed, "gen-data", 0);
    let dataset = match config.dataset.source(seed)? {
        DatasetSource::Planted(planted) => {
            fsio::write_json(&out.join("planted.json"), &planted)?;
            generate_planted(&planted)?
        }
        DatasetSource::External(manifest) => load_external(&manifest)?,
    };
    export_dataset(&dataset, &out.join("dataset"))
}

pub fn load_dataset(run_dir: &Path) -> Result<Dataset> {
    load_external(
        &run_dir
            .join("gen-data")
            .join("dataset")
            .join("manifest.csv"),
    )
}

fn model_spec(section: &ModelSection, dataset: &Dataset) -> Result<ModelSpec> {
    let shape = dataset.shape;
    let kind = section.kind.unwrap_or(match shape {
        InputShape::Flat(_) => ModelKind::Mlp,
        InputShape::Image { .. } => ModelKind::Conv,
    });
    let spec = match (kind, shape) {
        (ModelKind::Mlp, _) => {
            let mut spec = ModelSpec::mlp(shape.len(), &section.widths, dataset.num_classes);
            spec.input = shape;
            spec
        }
        (
            ModelKind::Conv,
            InputShape::Image {
                channels,
                height,
                width,
            },
        ) => ModelSpec::conv(
            channels,
            height,
            width,
            &section.widths,
            dataset.num_classes,
        ),
        (ModelKind::Conv, InputShape::Flat(_)) => {
            return Err(Error::InvalidConfig(
                "a conv model needs image-shaped inputs".into(),
            ))
        }
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub log: Vec<EpochRecord>,
}

pub(crate) fn train_model(config: &RunConfig, run_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(run_dir)?;
    let spec = model_spec(&config.model, &dataset)?;
    let init = ModelState::init(spec, derive_seed(config.seed, "train-init", 0))?;
    let train_config = config
        .model
        .train
        .with_seed(derive_seed(config.seed, "train", 0));
    let val = dataset.split(Split::Val);
    let outcome = train(&init, &dataset.split(Split::Train), &val, &train_config)?;
    save_checkpoint(&outcome.model, &out.join("model"))?;
    let val_accuracy = evaluate(&outcome.model, &val, Metric::Accuracy)?.score;
    fsio::write_json(
        &out.join("log.json"),
        &TrainLog {
            best_epoch: outcome.best_epoch,
            val_accuracy,
            log: outcome.log,
        },
    )
}

pub fn load_model(run_dir: &Path) -> Result<ModelState> {
    load_checkpoint(&run_dir.join("train").join("model"))
}

#[derive(Debug, Serialize, Deserialize)]
struct PoolRow {
    example_id: u64,
    role: String,
    prediction: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub pool: usize,
    pub correct: usize,
    pub failures: usize,
}

pub(crate) fn partition(config: &RunConfig, run_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(run_dir)?;
    let model = load_model(run_dir)?;
    let pool = dataset.split(Split::Pool);
    let parts = partition_failures(&model, &pool)?;
    let correct = split_correct(
        &parts.correct,
        &config.partition.fractions,
        derive_seed(config.seed, "partition", 0),
    )?;
    let path = out.join("pool.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for (role, set) in [
        ("C_tr", &correct.train),
        ("C_val", &correct.val),
        ("C_te", &correct.test),
    ] {
        for e in set {
            w.serialize(PoolRow {
                example_id: e.id,
                role: role.into(),
                prediction: e.label,
            })?;
        }
    }
    for (e, &p) in parts.failures.iter().zip(&parts.predictions) {
        w.serialize(PoolRow {
            example_id: e.id,
            role: "F".into(),
            prediction: p,
        })?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    fsio::write_json(
        &out.join("summary.json"),
        &PoolSummary {
            pool: pool.len(),
            correct: parts.correct.len(),
            failures: parts.failures.len(),
        },
    )
}

/// Correct-case splits and the failures, in the order the partition stage wrote them.
pub fn load_pool(run_dir: &Path, dataset: &Dataset) -> Result<(Splits, Vec<Example>)> {
    let path = run_dir.join("partition").join("pool.csv");
    let by_id = dataset.by_id();
    let mut correct = Splits::default();
    let mut failures = Vec::new();
    let mut reader = csv::Reader::from_path(&path)?;
    for row in reader.deserialize() {
        let row: PoolRow = row?;
        let ex = (*by_id.get(&row.example_id).ok_or_else(|| {
            Error::malformed(&path, format!("unknown example {}", row.example_id))
        })?)
        .clone();
        match row.role.as_str() {
            "C_tr" => correct.train.push(ex),
            "C_val" => correct.val.push(ex),
            "C_te" => correct.test.push(ex),
            "F" => failures.push(ex),
            other => return Err(Error::malformed(&path, format!("unknown role {other:?}"))),
        }
    }
    Ok((correct, failures))
}

/// How well a subtyping matches the metadata tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAgreement {
    pub method: Method,
    pub k: usize,
    pub sizes: Vec<usize>,
    pub degenerate: bool,
    pub ari: f64,
    pub nmi: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClusteringLog {
    sweep: Vec<crate::subtyping::SweepPoint>,
    warnings: Vec<String>,
}

fn stem(dir: &Path, method: Method, suffix: &str) -> PathBuf {
    dir.join(format!("{}{suffix}", method.as_str()))
}

pub(crate) fn subtype(config: &RunConfig, run_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(run_dir)?;
    let model = load_model(run_dir)?;
    let (correct, failures) = load_pool(run_dir, &dataset)?;
    if failures.is_empty() {
        return Err(Error::Degenerate(
            "the model makes no mistakes on the pool; there is nothing to subtype".into(),
        ));
    }
    let section = &config.subtyping;
    let clustering = section.clustering();
    let seed_for = |m: Method| derive_seed(config.seed, "subtype", method_index(m));
    let mut done: Vec<(Method, Subtyping)> = Vec::new();
    for (method, space) in [
        (Method::GradientClustering, Space::Gradient),
        (Method::FeatureClustering, Space::Feature),
    ] {
        if !section.methods.contains(&method) {
            continue;
        }
        let c = cluster_failures(&model, &failures, space, &clustering, seed_for(method))?;
        write_representation(&c.embedded, &stem(out, method, "-embedding"))?;
        fsio::write_json(
            &stem(out, method, "-sweep").with_extension("json"),
            &ClusteringLog {
                sweep: c.sweep,
                warnings: c.warnings,
            },
        )?;
        done.push((method, c.subtyping));
    }
    let clustered_k = |done: &[(Method, Subtyping)], m: Method| {
        done.iter().find(|(x, _)| *x == m).map(|(_, s)| s.k)
    };
    for &method in &section.methods {
        let s = match method {
            Method::GradientClustering | Method::FeatureClustering => continue,
            Method::Random => {
                let k = section
                    .random_k
                    .or_else(|| clustered_k(&done, Method::GradientClustering))
                    .or_else(|| clustered_k(&done, Method::FeatureClustering))
                    .unwrap_or(section.k_min);
                baseline_random(&failures, k, seed_for(method))?
            }
            Method::Fpfn => baseline_fpfn(&failures, dataset.num_classes)?,
            Method::Metadata => baseline_metadata(&failures)?,
        };
        done.push((method, s));
    }
    let tags: Vec<String> = failures.iter().map(|e| e.tag.clone()).collect();
    let mut agreements = Vec::new();
    for &method in &section.methods {
        let s = &done
            .iter()
            .find(|(m, _)| *m == method)
            .expect("every method ran")
            .1;
        write_subtyping(s, &stem(out, method, ""))?;
        let types = s.types_for(&failures)?;
        let partition = split_types(
            &failures,
            &types,
            correct.clone(),
            &config.partition.fractions,
            config.partition.min_type_size,
            derive_seed(config.seed, "split-types", method_index(method)),
            format!("{} subtyping, k={}", method.label(), s.k),
        )?;
        write_partition(&partition, &stem(out, method, "-partition"))?;
        let a = agreement(&types, &tags)?;
        agreements.push(MethodAgreement {
            method,
            k: s.k,
            sizes: s.sizes(),
            degenerate: s.degenerate,
            ari: a.ari,
            nmi: a.nmi,
        });
    }
    fsio::write_json(&out.join("agreement.json"), &agreements)
}

pub fn read_agreements(run_dir: &Path) -> Result<Vec<MethodAgreement>> {
    fsio::read_json(&run_dir.join("subtype").join("agreement.json"))
}

pub fn read_type_partition(
    run_dir: &Path,
    method: Method,
    dataset: &Dataset,
) -> Result<FailurePartition> {
    let stem = stem(&run_dir.join("subtype"), method, "-partition");
    if !stem.with_extension("json").is_file() {
        return Err(Error::InvalidConfig(format!(
            "no {} subtyping in {}",
            method.as_str(),
            run_dir.display()
        )));
    }
    read_partition(&stem, &dataset.by_id())
}

/// Whether a subtyping was scored, and why not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStatus {
    pub method: Method,
    pub scored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

pub(crate) fn score_types(config: &RunConfig, run_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(run_dir)?;
    let model = load_model(run_dir)?;
    let mut statuses = Vec::new();
    for &method in &config.subtyping.methods {
        let partition = read_type_partition(run_dir, method, &dataset)?;
        let eligible = partition.eligible_ids().len();
        if eligible < 2 {
            statuses.push(ScoreStatus {
                method,
                scored: false,
                reason: Some(format!(
                    "{eligible} type(s) with at least {} members; scoring needs 2",
                    config.partition.min_type_size
                )),
            });
            continue;
        }
        let mut quality = config.quality.clone();
        quality.train.seed = derive_seed(config.seed, "score-types", method_index(method));
        let matrix = build_matrix(&model, &partition, &quality)?;
        write_matrix_csv(&matrix, &stem(out, method, "-matrix").with_extension("csv"))?;
        fsio::write_json(
            &stem(out, method, "-matrix").with_extension("json"),
            &matrix,
        )?;
        let t = &quality.train;
        let provenance = format!(
            "{}; compatibility threshold {} on C_val, correct mix {}; fine-tune lr {} wd {} batch {} \
             max epochs {} patience {}",
            partition.provenance,
            quality.threshold,
            quality.mix_ratio,
            t.learning_rate,
            t.weight_decay,
            t.batch_size,
            t.max_epochs,
            t.patience
        );
        let report = aggregate(method, &matrix, partition.excluded_ids(), provenance)?;
        fsio::write_json(
            &stem(out, method, "-quality").with_extension("json"),
            &report,
        )?;
        statuses.push(ScoreStatus {
            method,
            scored: true,
            reason: None,
        });
    }
    fsio::write_json(&out.join("status.json"), &statuses)
}

pub fn read_matrix(run_dir: &Path, method: Method) -> Result<FinetuneMatrix> {
    fsio::read_json(&stem(&run_dir.join("score-types"), method, "-matrix").with_extension("json"))
}

pub fn read_quality(run_dir: &Path, method: Method) -> Result<QualityReport> {
    fsio::read_json(&stem(&run_dir.join("score-types"), method, "-quality").with_extension("json"))
}

pub(crate) fn read_score_status(run_dir: &Path) -> Result<Vec<ScoreStatus>> {
    fsio::read_json(&run_dir.join("score-types").join("status.json"))
}

/// Expands plan specs against the eligible types. Every plan shares one training seed so
/// that strategies are compared on the same batch order.
pub(crate) fn resolve_plans(
    section: &RepairSection,
    eligible: &[usize],
    seed: u64,
) -> Vec<RepairPlan> {
    let mut plans = Vec::new();
    for spec in &section.plans {
        let targets = spec.targets.clone().unwrap_or_else(|| eligible.to_vec());
        let groups: Vec<Vec<usize>> = if spec.strategy.single() {
            targets.into_iter().map(|t| vec![t]).collect()
        } else {
            vec![targets]
        };
        for group in groups {
            let mut plan = RepairPlan::new(spec.strategy, group);
            plan.mix_ratio = section.mix_ratio;
            plan.ewc_lambda = spec.ewc_lambda.unwrap_or(section.ewc_lambda);
            plan.train = section.train.with_seed(seed);
            plans.push(plan);
        }
    }
    plans
}

/// One repair run as recorded in `repair/runs.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRun {
    pub label: String,
    pub strategy: Strategy,
    pub targets: Vec<usize>,
    pub ewc_lambda: Option<f64>,
    pub best_epoch: usize,
    pub log: Vec<EpochRecord>,
}

pub(crate) fn repair(config: &RunConfig, run_dir: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(run_dir)?;
    let model = load_model(run_dir)?;
    let method = config.repair.method;
    let partition = read_type_partition(run_dir, method, &dataset)?;
    let eligible = partition.eligible_ids();
    if eligible.is_empty() {
        return Err(Error::Degenerate(format!(
            "{} produced no type with at least {} members; there is nothing to repair",
            method.label(),
            config.partition.min_type_size
        )));
    }
    let plans = resolve_plans(
        &config.repair,
        &eligible,
        derive_seed(config.seed, "repair", 0),
    );
    for p in &plans {
        p.validate(&partition)?;
    }
    let outcomes = plans
        .par_iter()
        .map(|p| run_repair(&model, &partition, p))
        .collect::<Result<Vec<_>>>()?;
    let mut reports = vec![evaluate_repair(&model, &partition, "pre_repair")?];
    let mut runs = Vec::new();
    for (plan, o) in plans.iter().zip(outcomes) {
        reports.push(o.report);
        runs.push(RepairRun {
            label: plan.label(),
            strategy: plan.strategy,
            targets: plan.targets.clone(),
            ewc_lambda: (plan.strategy == Strategy::EwcAllTypes).then_some(plan.ewc_lambda),
            best_epoch: o.best_epoch,
            log: o.log,
        });
    }
    crate::repair::write_repair_reports(&reports, &out.join("reports.json"))?;
    fsio::write_json(&out.join("runs.json"), &runs)?;
    fsio::write_json(&out.join("method.json"), &method)
}

/// Repair reports (the first row is the unrepaired model) and the per-plan training logs.
pub fn read_repair_runs(run_dir: &Path) -> Result<(Vec<RepairReport>, Vec<RepairRun>)> {
    let dir = run_dir.join("repair");
    Ok((
        crate::repair::read_repair_reports(&dir.join("reports.json"))?,
        fsio::read_json(&dir.join("runs.json"))?,
    ))
}

pub(crate) fn read_repair_method(run_dir: &Path) -> Result<Method> {
    fsio::read_json(&run_dir.join("repair").join("method.json"))
}

pub(crate) fn read_pool_summary(run_dir: &Path) -> Result<PoolSummary> {
    fsio::read_json(&run_dir.join("partition").join("summary.json"))
}

pub(crate) fn read_train_log(run_dir: &Path) -> Result<TrainLog> {
    fsio::read_json(&run_dir.join("train").join("log.json"))
}
