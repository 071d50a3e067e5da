use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PlantedConfig, SplitFractions, MIN_TYPE_SIZE};
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::{ModelKind, TrainConfig};
use crate::quality::CompatibilityConfig;
use crate::repair::{Strategy, DEFAULT_EWC_LAMBDA};
use crate::subtyping::{ClusteringConfig, EmbedMethod, Method, DEFAULT_EMBED_DIM, DEFAULT_K_RANGE};

/// Everything a run needs. Each section feeds the cache key of the stages that read it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub subtyping: SubtypingSection,
    #[serde(default)]
    pub quality: CompatibilityConfig,
    #[serde(default)]
    pub repair: RepairSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Gaussian,
    SeparableGaussian,
    Texture,
}

impl Preset {
    pub fn build(self, seed: u64) -> PlantedConfig {
        match self {
            Preset::Gaussian => PlantedConfig::default_gaussian(seed),
            Preset::SeparableGaussian => PlantedConfig::separable_gaussian(seed),
            Preset::Texture => PlantedConfig::default_texture(seed),
        }
    }
}

/// Exactly one source: a named preset, an inline planted generator, or an external manifest.
/// With none given the Gaussian preset is used. A planted generator's own seed is replaced
/// by one derived from the run seed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted: Option<PlantedConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

pub enum DatasetSource {
    Planted(PlantedConfig),
    External(PathBuf),
}

impl DatasetSection {
    pub fn source(&self, seed: u64) -> Result<DatasetSource> {
        match (&self.preset, &self.planted, &self.manifest) {
            (None, None, None) => Ok(DatasetSource::Planted(Preset::Gaussian.build(seed))),
            (Some(p), None, None) => Ok(DatasetSource::Planted(p.build(seed))),
            (None, Some(c), None) => {
                Ok(DatasetSource::Planted(PlantedConfig { seed, ..c.clone() }))
            }
            (None, None, Some(m)) => Ok(DatasetSource::External(m.clone())),
            _ => Err(Error::InvalidConfig(
                "dataset: give exactly one of `preset`, `planted` or `manifest`".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `None` picks an MLP for flat inputs and a conv net for images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ModelKind>,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_widths() -> Vec<usize> {
    vec![32, 32]
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: None,
            widths: default_widths(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    #[serde(default)]
    pub fractions: SplitFractions,
    #[serde(default = "default_min_type_size")]
    pub min_type_size: usize,
}

fn default_min_type_size() -> usize {
    MIN_TYPE_SIZE
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            fractions: SplitFractions::default(),
            min_type_size: MIN_TYPE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtypingSection {
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_k_min")]
    pub k_min: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projection_dim: Option<usize>,
    #[serde(default = "default_embedding")]
    pub embedding: EmbedMethod,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Number of random types; `None` copies k from gradient clustering, then feature
    /// clustering, then falls back to `k_min`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_k: Option<usize>,
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_k_min() -> usize {
    DEFAULT_K_RANGE.0
}

fn default_k_max() -> usize {
    DEFAULT_K_RANGE.1
}

fn default_embedding() -> EmbedMethod {
    EmbedMethod::Pca
}

fn default_embed_dim() -> usize {
    DEFAULT_EMBED_DIM
}

impl Default for SubtypingSection {
    fn default() -> Self {
        SubtypingSection {
            methods: all_methods(),
            k_min: default_k_min(),
            k_max: default_k_max(),
            projection_dim: None,
            embedding: default_embedding(),
            embed_dim: default_embed_dim(),
            random_k: None,
        }
    }
}

impl SubtypingSection {
    pub fn clustering(&self) -> ClusteringConfig {
        ClusteringConfig {
            k_min: self.k_min,
            k_max: self.k_max,
            projection_dim: self.projection_dim,
            embedding: self.embedding.clone(),
            embed_dim: self.embed_dim,
        }
    }
}

/// One configured repair run. Without `targets` a single-type strategy expands to one plan
/// per eligible type and a union strategy targets every eligible type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ewc_lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepairSection {
    /// Subtyping whose types are repaired.
    #[serde(default = "default_repair_method")]
    pub method: Method,
    #[serde(default = "default_plans")]
    pub plans: Vec<PlanSpec>,
    #[serde(default = "default_mix")]
    pub mix_ratio: f64,
    #[serde(default = "default_lambda")]
    pub ewc_lambda: f64,
    #[serde(default = "TrainConfig::finetune")]
    pub train: TrainConfig,
}

fn default_repair_method() -> Method {
    Method::GradientClustering
}

fn default_plans() -> Vec<PlanSpec> {
    [
        Strategy::SingleType,
        Strategy::SingleTypeWithCorrect,
        Strategy::AllTypes,
        Strategy::AllTypesWithCorrect,
        Strategy::EwcAllTypes,
    ]
    .into_iter()
    .map(|strategy| PlanSpec {
        strategy,
        targets: None,
        ewc_lambda: None,
    })
    .collect()
}

fn default_mix() -> f64 {
    0.5
}

fn default_lambda() -> f64 {
    DEFAULT_EWC_LAMBDA
}

impl Default for RepairSection {
    fn default() -> Self {
        RepairSection {
            method: default_repair_method(),
            plans: default_plans(),
            mix_ratio: default_mix(),
            ewc_lambda: default_lambda(),
            train: TrainConfig::finetune(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Parses `path`; a relative dataset manifest is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsio::read_text(path)?;
        let mut config = Self::from_toml(&text)?;
        if let Some(m) = &config.dataset.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.dataset.manifest = Some(base.join(m));
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        match self.dataset.source(self.seed)? {
            DatasetSource::Planted(p) => p.validate()?,
            DatasetSource::External(m) => {
                if !m.is_file() {
                    return bad(format!("dataset manifest {} does not exist", m.display()));
                }
            }
        }
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            return bad("model.widths must be non-empty and positive".into());
        }
        self.model.train.validate()?;
        self.partition.fractions.validate()?;
        if self.partition.min_type_size < 3 {
            return bad("partition.min_type_size must be >= 3 so every split is non-empty".into());
        }
        let s = &self.subtyping;
        if s.methods.is_empty() {
            return bad("subtyping.methods is empty".into());
        }
        let mut seen = HashSet::new();
        if let Some(m) = s.methods.iter().find(|m| !seen.insert(**m)) {
            return bad(format!("subtyping method {m} listed twice"));
        }
        if s.k_min < 2 || s.k_min > s.k_max {
            return bad(format!(
                "subtyping k range [{}, {}] is invalid",
                s.k_min, s.k_max
            ));
        }
        if s.embed_dim == 0 || s.projection_dim == Some(0) || s.random_k == Some(0) {
            return bad("subtyping dimensions and random_k must be positive".into());
        }
        if let EmbedMethod::External { path } = &s.embedding {
            if !path.with_extension("csv").is_file() {
                return bad(format!(
                    "external embedding {} does not exist",
                    path.display()
                ));
            }
        }
        self.quality.validate()?;
        let r = &self.repair;
        if !s.methods.contains(&r.method) {
            return bad(format!(
                "repair.method {} is not among subtyping.methods",
                r.method
            ));
        }
        if !(0.0..=1.0).contains(&r.mix_ratio) {
            return bad(format!("repair.mix_ratio {} outside [0, 1]", r.mix_ratio));
        }
        let lambdas =
            std::iter::once(r.ewc_lambda).chain(r.plans.iter().filter_map(|p| p.ewc_lambda));
        for l in lambdas {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("ewc lambda {l} must be finite and >= 0"));
            }
        }
        for p in &r.plans {
            if p.ewc_lambda.is_some() && p.strategy != Strategy::EwcAllTypes {
                return bad(format!(
                    "ewc_lambda given for non-EWC strategy {}",
                    p.strategy.as_str()
                ));
            }
            if matches!(&p.targets, Some(t) if t.is_empty()) {
                return bad(format!(
                    "repair plan {} has an empty target list",
                    p.strategy.as_str()
                ));
            }
        }
        r.train.validate()
    }
}

/// Hex SHA-256 over a tag, the upstream key and the JSON form of a config section.
pub(crate) fn section_hash<T: Serialize>(tag: &str, upstream: &str, section: &T) -> String {
    let json = serde_json::to_string(section).expect("config sections serialize");
    let mut h = Sha256::new();
    for part in [tag, upstream, json.as_str()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}
