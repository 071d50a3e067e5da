//! Synthetic benchmarks with planted failure subgroups.
//!
//! Each class is a mixture of subgroups. Subgroups with (near) zero training prevalence are
//! absent from the training and validation splits but present in the evaluation pool, which
//! makes them ground-truth failure types for a model trained on the rest.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Split};
use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::seed;

/// Training prevalence below which a subgroup counts as a planted failure mode.
pub const LOW_PREVALENCE: f64 = 0.05;

/// Minimum share of pool failures that must come from low-prevalence subgroups.
pub const MIN_LOW_PREVALENCE_SHARE: f64 = 0.7;

const TEXTURE_SIZE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SubgroupShape {
    /// Isotropic Gaussian; `mean` is zero-padded to the benchmark dimension.
    Gaussian { mean: Vec<f64>, std: f64 },
    /// 8x8 sinusoidal grating with random phase plus pixel noise.
    Texture {
        /// Cycles across the patch.
        frequency: f64,
        /// Grating direction in radians.
        orientation: f64,
        brightness: f64,
        contrast: f64,
        noise_std: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subgroup {
    pub tag: String,
    pub class: usize,
    /// Within-class weight in the train and validation splits.
    pub train_prevalence: f64,
    /// Within-class weight in the evaluation pool.
    #[serde(default = "one")]
    pub pool_prevalence: f64,
    pub shape: SubgroupShape,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedConfig {
    /// Input dimension of the Gaussian variant; ignored for textures.
    #[serde(default)]
    pub dim: usize,
    pub subgroups: Vec<Subgroup>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_pool: usize,
    #[serde(default)]
    pub seed: u64,
}

impl PlantedConfig {
    pub const NUM_CLASSES: usize = 2;

    /// Flat 16-D benchmark.
    ///
    /// Common subgroups sit at `x0 = -3` (class 0) and `x0 = +3` (class 1). The four rare
    /// subgroups sit close to the boundary on the side of the opposite label (`x0 = +-1`)
    /// and are pushed out along their own axis (`x2` or `x3`). Rare subgroups sharing an axis
    /// have opposite labels, so repairing one pulls the boundary against the other.
    pub fn default_gaussian(seed: u64) -> Self {
        Self::gaussian_with_offset(seed, 6.0)
    }

    /// The default geometry with the rare subgroups pushed further out (`8` instead of `6`),
    /// which makes their gradients more distinct.
    pub fn separable_gaussian(seed: u64) -> Self {
        Self::gaussian_with_offset(seed, 8.0)
    }

    fn gaussian_with_offset(seed: u64, offset: f64) -> Self {
        let g = |tag: &str, class: usize, prev: f64, mean: Vec<f64>| Subgroup {
            tag: tag.to_string(),
            class,
            train_prevalence: prev,
            pool_prevalence: 1.0,
            shape: SubgroupShape::Gaussian { mean, std: 0.6 },
        };
        PlantedConfig {
            dim: 16,
            subgroups: vec![
                g("c0-common-up", 0, 0.5, vec![-3.0, 1.5]),
                g("c0-common-down", 0, 0.5, vec![-3.0, -1.5]),
                g("c0-rare-x2", 0, 0.0, vec![1.0, 0.0, offset]),
                g("c0-rare-x3", 0, 0.0, vec![1.0, 0.0, 0.0, offset]),
                g("c1-common-up", 1, 0.5, vec![3.0, 1.5]),
                g("c1-common-down", 1, 0.5, vec![3.0, -1.5]),
                g("c1-rare-x2", 1, 0.0, vec![-1.0, 0.0, offset]),
                g("c1-rare-x3", 1, 0.0, vec![-1.0, 0.0, 0.0, offset]),
            ],
            n_train: 2000,
            n_val: 400,
            n_pool: 1600,
            seed,
        }
    }

    /// 8x8 grating benchmark for the convolutional path.
    pub fn default_texture(seed: u64) -> Self {
        let t = |tag: &str,
                 class: usize,
                 prev: f64,
                 frequency: f64,
                 orientation: f64,
                 brightness: f64| Subgroup {
            tag: tag.to_string(),
            class,
            train_prevalence: prev,
            pool_prevalence: 1.0,
            shape: SubgroupShape::Texture {
                frequency,
                orientation,
                brightness,
                contrast: 1.0,
                noise_std: 0.2,
            },
        };
        PlantedConfig {
            dim: 0,
            subgroups: vec![
                t("c0-horizontal", 0, 1.0, 2.0, PI / 2.0, 0.0),
                t("c0-rare-bright", 0, 0.0, 2.0, 0.0, 1.5),
                t("c1-vertical", 1, 1.0, 2.0, 0.0, 0.0),
                t("c1-rare-bright", 1, 0.0, 2.0, PI / 2.0, 1.5),
            ],
            n_train: 1200,
            n_val: 300,
            n_pool: 1000,
            seed,
        }
    }

    fn is_texture(&self) -> bool {
        matches!(
            self.subgroups.first().map(|s| &s.shape),
            Some(SubgroupShape::Texture { .. })
        )
    }

    pub fn input_shape(&self) -> InputShape {
        if self.is_texture() {
            InputShape::Image {
                channels: 1,
                height: TEXTURE_SIZE,
                width: TEXTURE_SIZE,
            }
        } else {
            InputShape::Flat(self.dim)
        }
    }

    pub fn is_low_prevalence(&self, tag: &str) -> bool {
        self.subgroups
            .iter()
            .any(|s| s.tag == tag && s.train_prevalence < LOW_PREVALENCE)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.subgroups.is_empty() {
            return bad("planted config has no subgroups".into());
        }
        let texture = self.is_texture();
        let mut tags = std::collections::HashSet::new();
        for s in &self.subgroups {
            if !tags.insert(s.tag.as_str()) {
                return bad(format!("duplicate subgroup tag `{}`", s.tag));
            }
            if s.class >= Self::NUM_CLASSES {
                return bad(format!(
                    "subgroup `{}` has class {} (binary task)",
                    s.tag, s.class
                ));
            }
            if !(0.0..=1.0).contains(&s.train_prevalence)
                || s.pool_prevalence.is_nan()
                || s.pool_prevalence < 0.0
            {
                return bad(format!("subgroup `{}` has an invalid prevalence", s.tag));
            }
            match &s.shape {
                SubgroupShape::Gaussian { mean, std } => {
                    if texture {
                        return bad("cannot mix gaussian and texture subgroups".into());
                    }
                    if !(std.is_finite() && *std > 0.0) {
                        return Err(Error::Degenerate(format!(
                            "subgroup `{}` has a degenerate covariance (std {std})",
                            s.tag
                        )));
                    }
                    if mean.len() > self.dim || mean.iter().any(|m| !m.is_finite()) {
                        return bad(format!(
                            "subgroup `{}` mean does not fit dimension {}",
                            s.tag, self.dim
                        ));
                    }
                }
                SubgroupShape::Texture { noise_std, .. } => {
                    if !texture {
                        return bad("cannot mix gaussian and texture subgroups".into());
                    }
                    if !(noise_std.is_finite() && *noise_std > 0.0) {
                        return Err(Error::Degenerate(format!(
                            "subgroup `{}` has a degenerate covariance (noise {noise_std})",
                            s.tag
                        )));
                    }
                }
            }
        }
        if !texture && self.dim == 0 {
            return bad("gaussian benchmark needs dim >= 1".into());
        }
        for class in 0..Self::NUM_CLASSES {
            let members: Vec<&Subgroup> =
                self.subgroups.iter().filter(|s| s.class == class).collect();
            if members.len() < 2 {
                return bad(format!("class {class} needs at least two subgroups"));
            }
            let train_sum: f64 = members.iter().map(|s| s.train_prevalence).sum();
            if (train_sum - 1.0).abs() > 1e-6 {
                return bad(format!(
                    "class {class} training prevalences sum to {train_sum}, not 1"
                ));
            }
            if members.iter().map(|s| s.pool_prevalence).sum::<f64>() <= 0.0 {
                return bad(format!("class {class} has zero pool prevalence"));
            }
        }
        if !self
            .subgroups
            .iter()
            .any(|s| s.train_prevalence < LOW_PREVALENCE)
        {
            return bad("no subgroup has low training prevalence; nothing is planted".into());
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_pool == 0 {
            return bad("every split needs at least one example".into());
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `n` items over `weights`; ties go to the earlier index.
fn allocate(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn sample(shape: &SubgroupShape, dim: usize, rng: &mut seed::Rng) -> Vec<f64> {
    match shape {
        SubgroupShape::Gaussian { mean, std } => (0..dim)
            .map(|d| {
                let z: f64 = rng.sample(StandardNormal);
                mean.get(d).copied().unwrap_or(0.0) + std * z
            })
            .collect(),
        SubgroupShape::Texture {
            frequency,
            orientation,
            brightness,
            contrast,
            noise_std,
        } => {
            let phase = rng.random_range(0.0..2.0 * PI);
            let (s, c) = orientation.sin_cos();
            let n = TEXTURE_SIZE as f64;
            let mut img = Vec::with_capacity(TEXTURE_SIZE * TEXTURE_SIZE);
            for y in 0..TEXTURE_SIZE {
                for x in 0..TEXTURE_SIZE {
                    let u = x as f64 * c + y as f64 * s;
                    let z: f64 = rng.sample(StandardNormal);
                    img.push(
                        brightness
                            + contrast * (2.0 * PI * frequency * u / n + phase).sin()
                            + noise_std * z,
                    );
                }
            }
            img
        }
    }
}

pub fn generate_planted(config: &PlantedConfig) -> Result<Dataset> {
    config.validate()?;
    let shape = config.input_shape();
    let dim = shape.len();
    let mut rng = seed::rng(config.seed);
    let mut examples = Vec::with_capacity(config.n_train + config.n_val + config.n_pool);
    for (split, n) in [
        (Split::Train, config.n_train),
        (Split::Val, config.n_val),
        (Split::Pool, config.n_pool),
    ] {
        let class_counts = allocate(n, &[1.0; PlantedConfig::NUM_CLASSES]);
        let mut drawn = Vec::with_capacity(n);
        for (class, &n_class) in class_counts.iter().enumerate() {
            let members: Vec<&Subgroup> = config
                .subgroups
                .iter()
                .filter(|s| s.class == class)
                .collect();
            let weights: Vec<f64> = members
                .iter()
                .map(|s| match split {
                    Split::Pool => s.pool_prevalence,
                    _ => s.train_prevalence,
                })
                .collect();
            for (sub, count) in members.iter().zip(allocate(n_class, &weights)) {
                for _ in 0..count {
                    drawn.push((sample(&sub.shape, dim, &mut rng), class, sub.tag.clone()));
                }
            }
        }
        drawn.shuffle(&mut rng);
        for (input, label, tag) in drawn {
            examples.push(Example {
                id: examples.len() as u64,
                input,
                label,
                tag,
                split,
            });
        }
    }
    let dataset = Dataset {
        shape,
        num_classes: PlantedConfig::NUM_CLASSES,
        examples,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Fraction of `failures` whose tag is a low-prevalence subgroup.
pub fn low_prevalence_share(config: &PlantedConfig, failures: &[Example]) -> f64 {
    if failures.is_empty() {
        return 0.0;
    }
    let planted = failures
        .iter()
        .filter(|e| config.is_low_prevalence(&e.tag))
        .count();
    planted as f64 / failures.len() as f64
}

/// Rejects a benchmark whose failures are not concentrated in the planted subgroups.
pub fn check_recoverability(config: &PlantedConfig, failures: &[Example]) -> Result<f64> {
    let share = low_prevalence_share(config, failures);
    if share < MIN_LOW_PREVALENCE_SHARE {
        return Err(Error::InvalidConfig(format!(
            "benchmark is non-discriminative: only {:.1}% of {} pool failures come from \
             low-prevalence subgroups (need {:.0}%)",
            100.0 * share,
            failures.len(),
            100.0 * MIN_LOW_PREVALENCE_SHARE
        )));
    }
    Ok(share)
}
