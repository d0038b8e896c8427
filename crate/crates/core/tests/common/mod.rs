#![allow(dead_code)]

pub mod fd;
pub mod oracle;

use collab_tta::math::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let v = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    DenseMatrix::from_vec(rows, cols, v).unwrap()
}

/// Rows of a softmax over standard-normal logits times `temp`.
pub fn probs(rows: usize, cols: usize, temp: f64, rng: &mut ChaCha8Rng) -> DenseMatrix {
    normal(rows, cols, rng).scale(temp).softmax_rows()
}

pub fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}
