//! Prototype classifiers, affine feature adapters and the SSL/target model pair.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{hex, DenseMatrix, Parameter, Tape, Var};

pub const DEFAULT_LOGIT_SCALE: f64 = 30.0;

/// Labeled feature vectors, one row per item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDataset {
    classes: usize,
    features: DenseMatrix,
    labels: Vec<usize>,
}

impl EmbeddingDataset {
    pub fn new(classes: usize, features: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {classes}")));
        }
        if features.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "embeddings vs labels",
                left: features.rows(),
                right: labels.len(),
            });
        }
        if features.cols() == 0 {
            return Err(Error::config("embedding dimension must be at least 1"));
        }
        if !features.is_finite() {
            return Err(Error::config("embeddings contain non-finite values"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::config(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            classes,
            features,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Row indices per class, ascending within each class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PrototypeMode {
    #[default]
    Full,
    FewShot { per_class: usize, seed: u64 },
}

/// Cosine classifier over per-class mean vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeClassifier {
    pub prototypes: Parameter,
    logit_scale: f64,
}

impl PrototypeClassifier {
    pub fn new(prototypes: DenseMatrix, logit_scale: f64, trainable: bool) -> Result<Self> {
        if !(logit_scale > 0.0) || !logit_scale.is_finite() {
            return Err(Error::config(format!("logit scale must be finite and positive, got {logit_scale}")));
        }
        for (c, n) in prototypes.row_norms().iter().enumerate() {
            if !(*n > 0.0) {
                return Err(Error::ZeroPrototype { class: c });
            }
        }
        Ok(Self {
            prototypes: Parameter::new(prototypes, trainable),
            logit_scale,
        })
    }

    pub fn classes(&self) -> usize {
        self.prototypes.tensor.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.tensor.cols()
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn trainable(&self) -> bool {
        self.prototypes.requires_grad
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.prototypes.requires_grad = on;
    }
}

/// Class means of `source`, either over every item or over a seeded subset.
pub fn build_prototypes(
    source: &EmbeddingDataset,
    mode: PrototypeMode,
    logit_scale: f64,
) -> Result<PrototypeClassifier> {
    let groups = source.indices_by_class();
    let mut rng = match mode {
        PrototypeMode::Full => None,
        PrototypeMode::FewShot { per_class, seed } => {
            if per_class == 0 {
                return Err(Error::config("few-shot sample count must be at least 1"));
            }
            Some((per_class, ChaCha8Rng::seed_from_u64(seed)))
        }
    };
    let d = source.dim();
    let mut protos = DenseMatrix::zeros(source.classes(), d);
    for (c, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyClass { class: c });
        }
        let chosen: Vec<usize> = match rng.as_mut() {
            Some((n, rng)) if *n < members.len() => {
                let mut picks = sample(rng, members.len(), *n).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|k| members[k]).collect()
            }
            _ => members.clone(),
        };
        let row = protos.row_mut(c);
        for &i in &chosen {
            for (acc, &v) in row.iter_mut().zip(source.embedding(i)) {
                *acc += v;
            }
        }
        let count = chosen.len() as f64;
        row.iter_mut().for_each(|v| *v /= count);
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroPrototype { class: c });
        }
    }
    PrototypeClassifier::new(protos, logit_scale, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    /// `W`, `gamma` and `beta` all trainable.
    Full,
    /// Only `gamma` and `beta` trainable; `W` stays at identity.
    NormOnly,
    /// Identity map, no trainable parameters.
    Frozen,
}

/// `x ↦ gamma ⊙ (W x) + beta`, applied row-wise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineAdapter {
    pub weight: Parameter,
    pub gamma: Parameter,
    pub beta: Parameter,
    mode: AdapterMode,
}

/// Tape handles for an adapter's three tensors.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub weight: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl AffineAdapter {
    pub fn identity(dim: usize, mode: AdapterMode) -> Self {
        let mut a = Self {
            weight: Parameter::new(DenseMatrix::identity(dim), false),
            gamma: Parameter::new(DenseMatrix::filled(1, dim, 1.0), false),
            beta: Parameter::new(DenseMatrix::zeros(1, dim), false),
            mode,
        };
        a.set_mode(mode);
        a
    }

    pub fn dim(&self) -> usize {
        self.weight.tensor.rows()
    }

    pub fn mode(&self) -> AdapterMode {
        self.mode
    }

    /// Switches which tensors accept gradients. Values are left untouched.
    pub fn set_mode(&mut self, mode: AdapterMode) {
        self.mode = mode;
        self.weight.requires_grad = mode == AdapterMode::Full;
        self.gamma.requires_grad = mode != AdapterMode::Frozen;
        self.beta.requires_grad = mode != AdapterMode::Frozen;
    }

    pub fn apply(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        if batch.cols() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "adapter",
                left: batch.shape(),
                right: self.weight.shape(),
            });
        }
        let mut out = batch.matmul_nt(&self.weight.tensor)?;
        let g = self.gamma.tensor.values();
        let b = self.beta.tensor.values();
        for r in 0..out.rows() {
            for ((x, &gv), &bv) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *x = *x * gv + bv;
            }
        }
        Ok(out)
    }

    pub fn vars(&self, tape: &mut Tape) -> AdapterVars {
        AdapterVars {
            weight: tape.param(&self.weight),
            gamma: tape.param(&self.gamma),
            beta: tape.param(&self.beta),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 3] {
        [&mut self.weight, &mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Parameter; 3] {
        [&self.weight, &self.gamma, &self.beta]
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            p.tensor.feed_hash(&mut h);
        }
        hex(&h.finalize())
    }
}

/// Adapter forward pass on a tape. Same arithmetic as [`AffineAdapter::apply`].
pub fn adapter_forward(tape: &mut Tape, vars: AdapterVars, batch: Var) -> Result<Var> {
    let lin = tape.matmul_nt(batch, vars.weight)?;
    let scaled = tape.mul_row_broadcast(lin, vars.gamma)?;
    tape.add_row_broadcast(scaled, vars.beta)
}

/// `softmax(σ · cos(features, prototypes))` on a tape.
pub fn classifier_forward(tape: &mut Tape, features: Var, prototypes: Var, logit_scale: f64) -> Result<Var> {
    let f = tape.normalize_rows(features, "features")?;
    let p = tape.normalize_rows(prototypes, "prototypes")?;
    let cos = tape.matmul_nt(f, p)?;
    let logits = tape.scale(cos, logit_scale);
    Ok(tape.softmax_rows(logits))
}

/// Class probabilities for a batch.
pub fn predict(
    adapter: &AffineAdapter,
    classifier: &PrototypeClassifier,
    batch: &DenseMatrix,
) -> Result<DenseMatrix> {
    let feats = adapter.apply(batch)?;
    probs_from_features(&feats, classifier)
}

pub fn probs_from_features(features: &DenseMatrix, classifier: &PrototypeClassifier) -> Result<DenseMatrix> {
    let (f, _) = features.normalize_rows("features")?;
    let (p, _) = classifier.prototypes.tensor.normalize_rows("prototypes")?;
    let cos = f.matmul_nt(&p)?;
    Ok(cos.scale(classifier.logit_scale).softmax_rows())
}

/// A frozen SSL branch and the trainable target branch initialized from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPair {
    pub ssl_adapter: AffineAdapter,
    pub ssl_classifier: PrototypeClassifier,
    pub target_adapter: AffineAdapter,
    pub target_classifier: PrototypeClassifier,
}

impl ModelPair {
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for a in [&self.ssl_adapter, &self.target_adapter] {
            for p in a.params() {
                p.tensor.feed_hash(&mut h);
            }
        }
        self.ssl_classifier.prototypes.tensor.feed_hash(&mut h);
        self.target_classifier.prototypes.tensor.feed_hash(&mut h);
        hex(&h.finalize())
    }

    pub fn dim(&self) -> usize {
        self.ssl_adapter.dim()
    }

    pub fn classes(&self) -> usize {
        self.ssl_classifier.classes()
    }
}

/// Deep-copies the SSL classifier into a fresh target branch with an identity adapter.
pub fn init_target_from_ssl(
    ssl_classifier: &PrototypeClassifier,
    dim: usize,
    adapter_mode: AdapterMode,
) -> Result<ModelPair> {
    if ssl_classifier.dim() != dim {
        return Err(Error::ShapeMismatch {
            op: "init_target_from_ssl",
            left: (ssl_classifier.classes(), ssl_classifier.dim()),
            right: (ssl_classifier.classes(), dim),
        });
    }
    if adapter_mode == AdapterMode::Frozen {
        return Err(Error::config("target adapter must be trainable (full or norm_only)"));
    }
    let mut target_classifier = ssl_classifier.clone();
    target_classifier.set_trainable(true);
    target_classifier.prototypes.zero_grad();
    Ok(ModelPair {
        ssl_adapter: AffineAdapter::identity(dim, AdapterMode::Frozen),
        ssl_classifier: ssl_classifier.clone(),
        target_adapter: AffineAdapter::identity(dim, adapter_mode),
        target_classifier,
    })
}
