//! Failure-type discovery: representations, random projection, embedding, k-means with
//! silhouette-based k selection, reference baselines and agreement with planted tags.

mod agreement;
mod embed;
mod kmeans;
mod projection;
mod representation;
mod select;
mod silhouette;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use agreement::{
    adjusted_rand_index, agreement, encode, normalized_mutual_information, Agreement,
};
pub use embed::{embed, pca, EmbedMethod, DEFAULT_EMBED_DIM};
pub use kmeans::{kmeans, kmeans_with_restarts, KMeansResult, MAX_ITERATIONS, RESTARTS};
pub use projection::{gaussian_matrix, random_project, Projected};
pub use representation::{
    extract_representations, read_representation, write_representation, Representation, Space,
};
pub use select::{candidate_ks, select_k_and_cluster, Selection, SweepPoint, DEFAULT_K_RANGE};
pub use silhouette::silhouette;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::ModelState;
use crate::seed;

pub const DEFAULT_PROJECTION_CAP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Random,
    Fpfn,
    Metadata,
    FeatureClustering,
    GradientClustering,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Random,
        Method::Fpfn,
        Method::Metadata,
        Method::FeatureClustering,
        Method::GradientClustering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::Fpfn => "fpfn",
            Method::Metadata => "metadata",
            Method::FeatureClustering => "feature_clustering",
            Method::GradientClustering => "gradient_clustering",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Random => "Random",
            Method::Fpfn => "FP/FN",
            Method::Metadata => "Metadata",
            Method::FeatureClustering => "Feature clustering",
            Method::GradientClustering => "Gradient clustering",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown subtyping method {s:?}")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A total assignment of failures to types `0..k`, none of them empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Subtyping {
    pub method: Method,
    pub ids: Vec<u64>,
    pub types: Vec<usize>,
    pub k: usize,
    /// Set when a baseline collapsed to fewer types than it nominally produces.
    pub degenerate: bool,
    pub provenance: String,
}

impl Subtyping {
    pub fn new(
        method: Method,
        ids: Vec<u64>,
        types: Vec<usize>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if ids.len() != types.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} type ids", ids.len()),
                actual: format!("{}", types.len()),
            });
        }
        if ids.is_empty() {
            return Err(Error::EmptySplit(
                "subtyping of an empty failure set".into(),
            ));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidConfig(format!(
                "example {dup} assigned twice"
            )));
        }
        let k = types.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; k];
        for &t in &types {
            sizes[t] += 1;
        }
        if let Some(t) = sizes.iter().position(|s| *s == 0) {
            return Err(Error::InvalidConfig(format!(
                "failure type {t} of {k} is empty"
            )));
        }
        Ok(Subtyping {
            method,
            ids,
            types,
            k,
            degenerate: false,
            provenance: provenance.into(),
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &t in &self.types {
            sizes[t] += 1;
        }
        sizes
    }

    pub fn assignment(&self) -> HashMap<u64, usize> {
        self.ids
            .iter()
            .copied()
            .zip(self.types.iter().copied())
            .collect()
    }

    /// Types of `failures` in their order; every failure must be covered.
    pub fn types_for(&self, failures: &[Example]) -> Result<Vec<usize>> {
        if failures.len() != self.ids.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("subtyping over {} failures", failures.len()),
                actual: format!("{} assigned", self.ids.len()),
            });
        }
        let map = self.assignment();
        failures
            .iter()
            .map(|e| {
                map.get(&e.id)
                    .copied()
                    .ok_or_else(|| Error::InvalidConfig(format!("failure {} has no type", e.id)))
            })
            .collect()
    }
}

/// Uniform random types; afterwards any empty type takes a random member of the currently
/// largest type, so all `k` types are non-empty.
pub fn baseline_random(failures: &[Example], k: usize, seed: u64) -> Result<Subtyping> {
    if failures.is_empty() {
        return Err(Error::EmptySplit("no failures to subtype".into()));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("random baseline needs k >= 1".into()));
    }
    let k = k.min(failures.len());
    let mut rng = seed::rng(seed::derive_seed(seed, "baseline-random", k as u64));
    let mut types: Vec<usize> = failures.iter().map(|_| rng.random_range(0..k)).collect();
    loop {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &t) in types.iter().enumerate() {
            members[t].push(i);
        }
        let Some(empty) = members.iter().position(Vec::is_empty) else {
            break;
        };
        let largest = (0..k)
            .max_by_key(|&t| (members[t].len(), std::cmp::Reverse(t)))
            .unwrap();
        let donor = *members[largest].choose(&mut rng).unwrap();
        types[donor] = empty;
    }
    let ids = failures.iter().map(|e| e.id).collect();
    Subtyping::new(
        Method::Random,
        ids,
        types,
        format!("random k={k} seed={seed}"),
    )
}

/// Type 0 = false positives (label 0 predicted 1), type 1 = false negatives. Collapses to a
/// single flagged type when one side is empty.
pub fn baseline_fpfn(failures: &[Example], num_classes: usize) -> Result<Subtyping> {
    if num_classes != 2 {
        return Err(Error::InvalidConfig(format!(
            "FP/FN baseline needs a binary task, got {num_classes} classes"
        )));
    }
    if failures.is_empty() {
        return Err(Error::EmptySplit("no failures to subtype".into()));
    }
    for e in failures {
        if e.label >= 2 {
            return Err(Error::LabelOutOfRange {
                label: e.label,
                num_classes,
            });
        }
    }
    let raw: Vec<usize> = failures.iter().map(|e| e.label).collect();
    let both = raw.contains(&0) && raw.contains(&1);
    let types = if both { raw } else { vec![0; failures.len()] };
    let mut s = Subtyping::new(
        Method::Fpfn,
        failures.iter().map(|e| e.id).collect(),
        types,
        if both {
            "fp/fn"
        } else {
            "fp/fn (one side empty)"
        },
    )?;
    s.degenerate = !both;
    Ok(s)
}

/// One type per metadata tag present among the failures, ordered lexicographically.
pub fn baseline_metadata(failures: &[Example]) -> Result<Subtyping> {
    if failures.is_empty() {
        return Err(Error::EmptySplit("no failures to subtype".into()));
    }
    let tags: BTreeSet<&str> = failures.iter().map(|e| e.tag.as_str()).collect();
    let index: HashMap<&str, usize> = tags.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let types = failures.iter().map(|e| index[e.tag.as_str()]).collect();
    let names: Vec<&str> = tags.into_iter().collect();
    Subtyping::new(
        Method::Metadata,
        failures.iter().map(|e| e.id).collect(),
        types,
        format!("metadata tags [{}]", names.join(", ")),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringConfig {
    pub k_min: usize,
    pub k_max: usize,
    /// Random projection target; `None` means `min(256, input dim)`.
    pub projection_dim: Option<usize>,
    pub embedding: EmbedMethod,
    pub embed_dim: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            k_min: DEFAULT_K_RANGE.0,
            k_max: DEFAULT_K_RANGE.1,
            projection_dim: None,
            embedding: EmbedMethod::Pca,
            embed_dim: DEFAULT_EMBED_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub subtyping: Subtyping,
    pub embedded: Representation,
    pub sweep: Vec<SweepPoint>,
    pub warnings: Vec<String>,
}

/// Centre, project, embed, then pick k by silhouette.
pub fn cluster_representation(
    rep: &Representation,
    config: &ClusteringConfig,
    seed: u64,
) -> Result<Clustering> {
    let method = match rep.space {
        Space::Gradient => Method::GradientClustering,
        Space::Feature => Method::FeatureClustering,
        Space::Derived => {
            return Err(Error::InvalidConfig(
                "clustering needs a feature or gradient representation".into(),
            ))
        }
    };
    let mut warnings = Vec::new();
    let d = config
        .projection_dim
        .unwrap_or_else(|| DEFAULT_PROJECTION_CAP.min(rep.dim()));
    let projected = random_project(&rep.centered(), d, seed::derive_seed(seed, "projection", 0))?;
    warnings.extend(projected.warning);
    let embedded = embed(
        &projected.representation,
        &config.embedding,
        config.embed_dim,
        seed::derive_seed(seed, "embed", 0),
    )?;
    let selection = select_k_and_cluster(&embedded.vectors, config.k_min, config.k_max, seed)?;
    let provenance = format!(
        "{} | k={} silhouette={:.6}",
        embedded.provenance, selection.k, selection.silhouette
    );
    let subtyping = Subtyping::new(method, rep.ids.clone(), selection.assignment, provenance)?;
    Ok(Clustering {
        subtyping,
        embedded,
        sweep: selection.sweep,
        warnings,
    })
}

pub fn cluster_failures(
    model: &ModelState,
    failures: &[Example],
    space: Space,
    config: &ClusteringConfig,
    seed: u64,
) -> Result<Clustering> {
    let rep = extract_representations(model, failures, space)?;
    cluster_representation(&rep, config, seed)
}

#[derive(Debug, Serialize, Deserialize)]
struct SubtypingRow {
    example_id: u64,
    type_id: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubtypingMeta {
    method: Method,
    k: usize,
    degenerate: bool,
    provenance: String,
}

/// `<stem>.csv` (example id, type id) plus a `<stem>.json` provenance record.
pub fn write_subtyping(subtyping: &Subtyping, stem: &Path) -> Result<()> {
    let csv_path = stem.with_extension("csv");
    if let Some(parent) = csv_path.parent() {
        fsio::create_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(&csv_path)?;
    for (&example_id, &type_id) in subtyping.ids.iter().zip(&subtyping.types) {
        w.serialize(SubtypingRow {
            example_id,
            type_id,
        })?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    fsio::write_json(
        &stem.with_extension("json"),
        &SubtypingMeta {
            method: subtyping.method,
            k: subtyping.k,
            degenerate: subtyping.degenerate,
            provenance: subtyping.provenance.clone(),
        },
    )
}

pub fn read_subtyping(stem: &Path) -> Result<Subtyping> {
    let meta: SubtypingMeta = fsio::read_json(&stem.with_extension("json"))?;
    let mut reader = csv::Reader::from_path(stem.with_extension("csv"))?;
    let rows: Vec<SubtypingRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    let (ids, types) = rows.into_iter().map(|r| (r.example_id, r.type_id)).unzip();
    let mut s = Subtyping::new(meta.method, ids, types, meta.provenance)?;
    if s.k != meta.k {
        return Err(Error::malformed(
            stem.with_extension("json"),
            format!("records k={} but the assignment has {} types", meta.k, s.k),
        ));
    }
    s.degenerate = meta.degenerate;
    Ok(s)
}
