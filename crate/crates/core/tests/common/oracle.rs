//! Reference evaluators written directly from the definitions, sharing no
//! code with the library.

use std::collections::BTreeSet;

use collab_tta::losses::{self, contrastive_loss, pairwise_indicator, ContrastiveMode, PairIndicator};
use collab_tta::math::{DenseMatrix, Tape, LOG_FLOOR};
use rand::Rng;

use super::{normal, probs, rng, to_rows};

pub fn ln_floor(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Top-m class set by descending probability, lower index first on ties.
fn top_set(row: &[f64], m: usize) -> BTreeSet<usize> {
    let mut order: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    order.into_iter().take(m).map(|(_, c)| c).collect()
}

pub fn indicator(p: &[Vec<f64>], k: usize, n: usize) -> Vec<Vec<i8>> {
    let b = p.len();
    let mut out = vec![vec![0i8; b]; b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let (ki, kj) = (top_set(&p[i], k), top_set(&p[j], k));
            let (ni, nj) = (top_set(&p[i], n), top_set(&p[j], n));
            out[i][j] = if ki.intersection(&kj).next().is_some() {
                1
            } else if ni.intersection(&nj).next().is_none() {
                -1
            } else {
                0
            };
        }
    }
    out
}

pub fn table(ind: &PairIndicator) -> Vec<Vec<i8>> {
    let b = ind.size();
    (0..b).map(|i| (0..b).map(|j| ind.get(i, j)).collect()).collect()
}

pub fn mutual_information(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    let (b, c) = (p.len(), p[0].len());
    let mut hist = vec![vec![0.0; c]; c];
    for i in 0..b {
        for x in 0..c {
            for y in 0..c {
                hist[x][y] += p[i][x] * q[i][y] / b as f64;
            }
        }
    }
    let mut sym = vec![vec![0.0; c]; c];
    let mut total = 0.0;
    for x in 0..c {
        for y in 0..c {
            sym[x][y] = 0.5 * (hist[x][y] + hist[y][x]);
            total += sym[x][y];
        }
    }
    let joint: Vec<Vec<f64>> = sym.iter().map(|r| r.iter().map(|v| v / total).collect()).collect();
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..c).map(|y| joint.iter().map(|r| r[y]).sum()).collect();
    let mut mi = 0.0;
    for x in 0..c {
        for y in 0..c {
            mi += joint[x][y] * (ln_floor(joint[x][y]) - ln_floor(px[x]) - ln_floor(py[y]));
        }
    }
    mi
}

/// Cosine similarities, self excluded from each row's normalizer.
fn log_s(f: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b = f.len();
    let cos = |i: usize, j: usize| {
        let dot: f64 = f[i].iter().zip(&f[j]).map(|(a, c)| a * c).sum();
        let ni: f64 = f[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        let nj: f64 = f[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (ni * nj)
    };
    (0..b)
        .map(|i| {
            let z: f64 = (0..b).filter(|&k| k != i).map(|k| cos(i, k).exp()).sum();
            (0..b).map(|j| if i == j { 0.0 } else { cos(i, j) - z.ln() }).collect()
        })
        .collect()
}

pub fn contrastive(f: &[Vec<f64>], ind: &[Vec<i8>], mode: ContrastiveMode) -> f64 {
    let ls = log_s(f);
    let b = f.len();
    match mode {
        ContrastiveMode::Separated => {
            let mut total = 0.0;
            let mut rows = 0;
            for i in 0..b {
                let pos: Vec<usize> = (0..b).filter(|&j| ind[i][j] == 1).collect();
                let neg: Vec<usize> = (0..b).filter(|&j| ind[i][j] == -1).collect();
                if pos.is_empty() && neg.is_empty() {
                    continue;
                }
                rows += 1;
                if !pos.is_empty() {
                    total -= pos.iter().map(|&j| ls[i][j]).sum::<f64>() / pos.len() as f64;
                }
                if !neg.is_empty() {
                    total += neg.iter().map(|&j| ls[i][j]).sum::<f64>() / neg.len() as f64;
                }
            }
            if rows == 0 {
                0.0
            } else {
                total / rows as f64
            }
        }
        ContrastiveMode::Literal => {
            let mut total = 0.0;
            for i in 0..b {
                let norm: f64 = ind[i].iter().map(|&v| f64::from(v)).sum();
                if norm <= 0.0 {
                    continue;
                }
                for j in 0..b {
                    total -= f64::from(ind[i][j]) * ls[i][j] / norm;
                }
            }
            total
        }
    }
}


/// Tables on which the library indicator differs from the set oracle.
pub fn indicator_mismatches(tables: usize) -> Vec<String> {
    let mut r = rng(2024);
    let mut bad = Vec::new();
    for t in 0..tables {
        let b = r.random_range(1..=8);
        let c = r.random_range(2..=6);
        let k = r.random_range(1..c);
        let n = r.random_range(k + 1..=c);
        // Coarse values every third table so ties occur.
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                let raw: Vec<f64> = (0..c)
                    .map(|_| {
                        let u: f64 = r.random();
                        if t % 3 == 0 {
                            (u * 3.0).floor() + 1.0
                        } else {
                            u + 1e-3
                        }
                    })
                    .collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let ind = pairwise_indicator(&DenseMatrix::from_rows(&rows).unwrap(), k, n).unwrap();
        if table(&ind) != indicator(&rows, k, n) {
            bad.push(format!("table {t}: b={b} c={c} k={k} n={n}"));
        }
    }
    bad
}

/// Largest |library - histogram| over `instances` random pairs of tables.
pub fn mutual_information_gap(instances: usize) -> f64 {
    let mut r = rng(77);
    let mut worst = 0.0f64;
    for t in 0..instances {
        let b = r.random_range(1..=16);
        let c = r.random_range(2..=10);
        let temp = [0.5, 2.0, 6.0][t % 3];
        let (p, q) = (probs(b, c, temp, &mut r), probs(b, c, temp, &mut r));
        let mut tape = Tape::new();
        let (pv, qv) = (tape.constant(p.clone()), tape.constant(q.clone()));
        let got = losses::mutual_information(&mut tape, pv, qv).unwrap().value;
        worst = worst.max((got - mutual_information(&to_rows(&p), &to_rows(&q))).abs());
    }
    worst
}

/// Largest |library - direct expression| over `instances`, both modes.
pub fn contrastive_gap(instances: usize) -> f64 {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let b = r.random_range(2..=8);
        let c = r.random_range(3..=6);
        let d = r.random_range(2..=12);
        let p = probs(b, c, 2.0, &mut r);
        let ind = pairwise_indicator(&p, 1, 2).unwrap();
        let f = normal(b, d, &mut r);
        for mode in [ContrastiveMode::Separated, ContrastiveMode::Literal] {
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let got = contrastive_loss(&mut tape, fv, &ind, mode).unwrap().value;
            worst = worst.max((got - contrastive(&to_rows(&f), &table(&ind), mode)).abs());
        }
    }
    worst
}
