use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::model::EmbeddingDataset;
use crate::report::LabelKey;

/// Ground-truth labels for a domain, one vector per batch. They can only be
/// read by presenting a [`LabelKey`], which the adaptation loop never holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLabels(Vec<Vec<usize>>);

impl HiddenLabels {
    pub fn reveal(&self, _key: &LabelKey) -> &[Vec<usize>] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub batches: Vec<DenseMatrix>,
    pub labels: HiddenLabels,
}

impl Domain {
    pub fn len(&self) -> usize {
        self.batches.iter().map(|b| b.rows()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered target domains, each an ordered list of unlabeled batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStream {
    pub dim: usize,
    pub classes: usize,
    pub domains: Vec<Domain>,
}

impl DomainStream {
    pub fn total_items(&self) -> usize {
        self.domains.iter().map(Domain::len).sum()
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    /// The first `first` domains and the remainder, order preserved.
    pub fn split_at(&self, first: usize) -> (DomainStream, DomainStream) {
        let first = first.min(self.domains.len());
        let head = DomainStream {
            dim: self.dim,
            classes: self.classes,
            domains: self.domains[..first].to_vec(),
        };
        let tail = DomainStream {
            dim: self.dim,
            classes: self.classes,
            domains: self.domains[first..].to_vec(),
        };
        (head, tail)
    }
}

/// Turns each dataset into one domain: items shuffled with `seed`, cut into
/// `batch_size` chunks, last partial chunk kept.
pub fn assemble_stream(
    datasets: &[(String, EmbeddingDataset)],
    batch_size: usize,
    seed: u64,
) -> Result<DomainStream> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let Some((_, first)) = datasets.first() else {
        return Err(Error::config("stream needs at least one domain"));
    };
    let (dim, classes) = (first.dim(), first.classes());
    let mut domains = Vec::with_capacity(datasets.len());
    for (idx, (name, ds)) in datasets.iter().enumerate() {
        if ds.dim() != dim {
            return Err(Error::ShapeMismatch {
                op: "assemble_stream",
                left: (0, dim),
                right: (idx, ds.dim()),
            });
        }
        if ds.classes() != classes {
            return Err(Error::config(format!(
                "domain {name} has {} classes, expected {classes}",
                ds.classes()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let mut batches = Vec::new();
        let mut labels = Vec::new();
        for chunk in order.chunks(batch_size) {
            batches.push(ds.features().select_rows(chunk));
            labels.push(chunk.iter().map(|&i| ds.labels()[i]).collect());
        }
        domains.push(Domain {
            name: name.clone(),
            batches,
            labels: HiddenLabels(labels),
        });
    }
    Ok(DomainStream { dim, classes, domains })
}
