//! Seeded drifting-domain generator.
//!
//! Source items are drawn from `C` unit-variance isotropic Gaussians whose
//! means sit on the first `C` coordinate axes at distance `class_separation`
//! from each other (random unit directions when `C > d`), all translated by
//! a shared offset of norm `common_offset` along the all-ones direction.
//! The offset leaves pairwise separation alone but makes cosine scores
//! sensitive to where the cloud sits, which is what drift then disturbs.
//!
//! Each target domain re-draws items from the same mixture and pushes them
//! through one seeded transform whose magnitude is linear in severity.
//! Domains of the same kind share structure: per kind a base parameter vector
//! `b` is drawn once, and each domain mixes it with fresh draws `f` as
//! `u = rho * b + (1 - rho) * f` (`rho = kind_correlation`). For rotations,
//! `round(rho * d / 2)` of the base planes are kept and the remaining
//! coordinates are re-paired at random.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`),
//! one stream id per purpose: stream 0 for class means, 1 for the source set,
//! `2 + 2j` for domain `j`'s transform parameters, `3 + 2j` for its samples,
//! and `1_000_000 + s` for the base parameters of kind `s` (index into
//! `TransformKind::ALL`). Normal variates use `rand_distr::StandardNormal`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::stream::{assemble_stream, DomainStream};
use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::model::EmbeddingDataset;

pub const MAX_ROTATION_DEGREES: f64 = 45.0;
pub const MAX_NOISE_STD: f64 = 1.0;
pub const MAX_MEAN_SHIFT: f64 = 2.0;
pub const MAX_SCALE_FACTOR: f64 = 3.0;
pub const MAX_SEVERITY: u8 = 5;
const KIND_BASE_STREAM: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Rotation,
    AdditiveNoise,
    MeanShift,
    PerDimScale,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] = [
        TransformKind::Rotation,
        TransformKind::AdditiveNoise,
        TransformKind::MeanShift,
        TransformKind::PerDimScale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Rotation => "rotation",
            TransformKind::AdditiveNoise => "additive_noise",
            TransformKind::MeanShift => "mean_shift",
            TransformKind::PerDimScale => "per_dim_scale",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSuiteConfig {
    pub classes: usize,
    pub dim: usize,
    pub class_separation: f64,
    pub samples_per_domain: usize,
    pub n_domains: usize,
    pub severity: u8,
    pub seed: u64,
    pub transform_kinds: Vec<TransformKind>,
    pub batch_size: usize,
    /// Norm of the translation shared by every class mean.
    pub common_offset: f64,
    /// Weight of the per-kind base parameters, in `[0, 1]`.
    pub kind_correlation: f64,
}

impl Default for SyntheticSuiteConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            class_separation: 6.0,
            samples_per_domain: 2000,
            n_domains: 15,
            severity: MAX_SEVERITY,
            seed: 0,
            transform_kinds: TransformKind::ALL.to_vec(),
            batch_size: 64,
            common_offset: 12.0,
            kind_correlation: 0.8,
        }
    }
}

impl SyntheticSuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synthetic suite needs at least 2 classes"));
        }
        if self.dim < 2 {
            return Err(Error::config("synthetic suite needs dimension at least 2"));
        }
        if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
            return Err(Error::config("class_separation must be finite and positive"));
        }
        if self.samples_per_domain < self.classes {
            return Err(Error::config("samples_per_domain must cover every class at least once"));
        }
        if self.n_domains == 0 {
            return Err(Error::config("n_domains must be at least 1"));
        }
        if self.severity > MAX_SEVERITY {
            return Err(Error::config(format!("severity must be in 0..={MAX_SEVERITY}")));
        }
        if self.transform_kinds.is_empty() {
            return Err(Error::config("transform_kinds must not be empty"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.common_offset >= 0.0) || !self.common_offset.is_finite() {
            return Err(Error::config("common_offset must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.kind_correlation) {
            return Err(Error::config("kind_correlation must be in [0, 1]"));
        }
        Ok(())
    }

    /// Named suites: `reference` (well separated), `ssl-like` (source
    /// accuracy near 60%) and `tiny` (fast smoke runs).
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let base = Self {
            seed,
            ..Self::default()
        };
        Ok(match name {
            "reference" => base,
            "ssl-like" => Self {
                class_separation: 2.5,
                ..base
            },
            "tiny" => Self {
                classes: 6,
                dim: 8,
                samples_per_domain: 96,
                n_domains: 4,
                batch_size: 16,
                ..base
            },
            other => {
                return Err(Error::config(format!(
                    "unknown synthetic preset `{other}` (reference, ssl-like, tiny)"
                )))
            }
        })
    }

    fn magnitude(&self) -> f64 {
        f64::from(self.severity) / f64::from(MAX_SEVERITY)
    }
}

/// One domain's corruption, fully determined by its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Transform {
    /// Rotation by `angle` radians in each listed coordinate plane.
    Rotation { planes: Vec<(usize, usize)>, angle: f64 },
    /// Independent Gaussian noise added to every coordinate.
    AdditiveNoise { std: f64 },
    /// Constant offset added to every item.
    MeanShift { shift: Vec<f64> },
    /// Per-coordinate multiplicative factor.
    PerDimScale { factors: Vec<f64> },
}

/// Parameters shared by every domain of one kind.
struct KindBase {
    planes: Vec<(usize, usize)>,
    unit: Vec<f64>,
}

impl KindBase {
    fn draw<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let mut coords: Vec<usize> = (0..dim).collect();
        coords.shuffle(rng);
        Self {
            planes: coords.chunks_exact(2).map(|p| (p[0], p[1])).collect(),
            unit: (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        }
    }
}

impl Transform {
    fn sample<R: Rng>(kind: TransformKind, base: &KindBase, magnitude: f64, rho: f64, rng: &mut R) -> Self {
        let mut mixed = || -> Vec<f64> {
            base.unit
                .iter()
                .map(|&b| rho * b + (1.0 - rho) * rng.random_range(-1.0..=1.0))
                .collect()
        };
        match kind {
            TransformKind::Rotation => {
                let keep = (rho * base.planes.len() as f64).round() as usize;
                let mut pairs = base.planes.clone();
                pairs.shuffle(rng);
                let mut rest: Vec<usize> = pairs[keep..].iter().flat_map(|&(a, b)| [a, b]).collect();
                rest.shuffle(rng);
                pairs.truncate(keep);
                pairs.extend(rest.chunks_exact(2).map(|p| (p[0], p[1])));
                pairs.sort_unstable();
                Transform::Rotation {
                    planes: pairs,
                    angle: MAX_ROTATION_DEGREES.to_radians() * magnitude,
                }
            }
            TransformKind::AdditiveNoise => Transform::AdditiveNoise {
                std: MAX_NOISE_STD * magnitude,
            },
            TransformKind::MeanShift => Transform::MeanShift {
                shift: mixed().into_iter().map(|u| MAX_MEAN_SHIFT * magnitude * u).collect(),
            },
            TransformKind::PerDimScale => Transform::PerDimScale {
                factors: mixed().into_iter().map(|u| MAX_SCALE_FACTOR.powf(magnitude * u)).collect(),
            },
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            Transform::Rotation { angle, .. } => *angle == 0.0,
            Transform::AdditiveNoise { std } => *std == 0.0,
            Transform::MeanShift { shift } => shift.iter().all(|&v| v == 0.0),
            Transform::PerDimScale { factors } => factors.iter().all(|&v| v == 1.0),
        }
    }

    /// Applies the transform to one item in place; `rng` feeds additive noise.
    pub fn apply<R: Rng>(&self, x: &mut [f64], rng: &mut R) {
        match self {
            Transform::Rotation { planes, angle } => {
                if *angle == 0.0 {
                    return;
                }
                let (s, c) = angle.sin_cos();
                for &(i, j) in planes {
                    let (a, b) = (x[i], x[j]);
                    x[i] = c * a - s * b;
                    x[j] = s * a + c * b;
                }
            }
            Transform::AdditiveNoise { std } => {
                if *std == 0.0 {
                    return;
                }
                for v in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += std * z;
                }
            }
            Transform::MeanShift { shift } => {
                for (v, s) in x.iter_mut().zip(shift) {
                    *v += s;
                }
            }
            Transform::PerDimScale { factors } => {
                for (v, f) in x.iter_mut().zip(factors) {
                    *v *= f;
                }
            }
        }
    }
}

/// A generated target domain before batching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomain {
    pub name: String,
    pub transform: Transform,
    pub data: EmbeddingDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSuite {
    pub source: EmbeddingDataset,
    pub class_means: DenseMatrix,
    pub domains: Vec<SyntheticDomain>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn class_means(cfg: &SyntheticSuiteConfig) -> DenseMatrix {
    let radius = cfg.class_separation / std::f64::consts::SQRT_2;
    let mut means = DenseMatrix::zeros(cfg.classes, cfg.dim);
    if cfg.classes <= cfg.dim {
        for c in 0..cfg.classes {
            means.set(c, c, radius);
        }
    } else {
        let mut rng = rng_for(cfg.seed, 0);
        for c in 0..cfg.classes {
            let row: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (k, v) in row.iter().enumerate() {
                means.set(c, k, radius * v / norm);
            }
        }
    }
    let shift = cfg.common_offset / (cfg.dim as f64).sqrt();
    means.values_mut().iter_mut().for_each(|v| *v += shift);
    means
}

/// Balanced labels (counts differ by at most one), shuffled.
fn balanced_labels<R: Rng>(n: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn draw_items<R: Rng>(
    means: &DenseMatrix,
    n: usize,
    transform: Option<&Transform>,
    rng: &mut R,
) -> Result<EmbeddingDataset> {
    let (classes, dim) = means.shape();
    let labels = balanced_labels(n, classes, rng);
    let mut feats = DenseMatrix::zeros(n, dim);
    for (i, &l) in labels.iter().enumerate() {
        let row = feats.row_mut(i);
        for (k, v) in row.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *v = means.get(l, k) + z;
        }
        if let Some(t) = transform {
            t.apply(row, rng);
        }
    }
    EmbeddingDataset::new(classes, feats, labels)
}

/// Source set plus every target domain, unbatched.
pub fn generate_suite_datasets(cfg: &SyntheticSuiteConfig) -> Result<SyntheticSuite> {
    cfg.validate()?;
    let means = class_means(cfg);
    let source = draw_items(&means, cfg.samples_per_domain, None, &mut rng_for(cfg.seed, 1))?;
    let bases: Vec<KindBase> = (0..TransformKind::ALL.len())
        .map(|s| KindBase::draw(cfg.dim, &mut rng_for(cfg.seed, KIND_BASE_STREAM + s as u64)))
        .collect();
    let mut per_kind = vec![0usize; TransformKind::ALL.len()];
    let mut domains = Vec::with_capacity(cfg.n_domains);
    for j in 0..cfg.n_domains {
        let kind = cfg.transform_kinds[j % cfg.transform_kinds.len()];
        let slot = TransformKind::ALL.iter().position(|&k| k == kind).unwrap_or(0);
        per_kind[slot] += 1;
        let mut param_rng = rng_for(cfg.seed, 2 + 2 * j as u64);
        let transform = Transform::sample(kind, &bases[slot], cfg.magnitude(), cfg.kind_correlation, &mut param_rng);
        let mut sample_rng = rng_for(cfg.seed, 3 + 2 * j as u64);
        let data = draw_items(&means, cfg.samples_per_domain, Some(&transform), &mut sample_rng)?;
        domains.push(SyntheticDomain {
            name: format!("{}-{}", kind.name(), per_kind[slot]),
            transform,
            data,
        });
    }
    Ok(SyntheticSuite {
        source,
        class_means: means,
        domains,
    })
}

/// Source set and the batched target stream.
pub fn generate_synthetic_suite(cfg: &SyntheticSuiteConfig) -> Result<(EmbeddingDataset, DomainStream)> {
    let suite = generate_suite_datasets(cfg)?;
    let named: Vec<(String, EmbeddingDataset)> =
        suite.domains.into_iter().map(|d| (d.name, d.data)).collect();
    let stream = assemble_stream(&named, cfg.batch_size, cfg.seed)?;
    Ok((suite.source, stream))
}
