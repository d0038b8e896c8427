//! Adaptation objectives.
//!
//! Every loss records itself on a [`Tape`] and returns a [`ScalarLoss`], so
//! terms can be combined and differentiated together. Branches that act as
//! fixed targets (teacher probabilities, SSL features, pseudo labels) are
//! detached inside the loss that consumes them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{DenseMatrix, ScalarLoss, Tape, Var};

/// Tolerance on row sums for inputs that must be probability vectors.
pub const PROBABILITY_TOLERANCE: f64 = 1e-6;

/// Symmetric {-1, 0, +1} relation between batch items derived from top-k /
/// top-n prediction overlap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairIndicator {
    size: usize,
    entries: Vec<i8>,
    pub k: usize,
    pub n: usize,
}

impl PairIndicator {
    pub fn zeros(size: usize, k: usize, n: usize) -> Self {
        Self {
            size,
            entries: vec![0; size * size],
            k,
            n,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.size + j]
    }

    /// Sets both (i, j) and (j, i). Diagonal writes are ignored.
    pub fn set_pair(&mut self, i: usize, j: usize, v: i8) {
        if i != j {
            self.entries[i * self.size + j] = v;
            self.entries[j * self.size + i] = v;
        }
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|&&v| v == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.entries.iter().filter(|&&v| v == -1).count()
    }
}

/// Indices of the `m` largest entries of `row`; ties go to the lower index.
pub fn top_m(row: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

fn overlaps(a: &[usize], b: &[usize]) -> bool {
    a.iter().any(|x| b.contains(x))
}

pub fn pairwise_indicator(probs: &DenseMatrix, k: usize, n: usize) -> Result<PairIndicator> {
    let classes = probs.cols();
    if k == 0 || k >= n || n > classes {
        return Err(Error::config(format!(
            "indicator needs 1 <= k < n <= C, got k={k}, n={n}, C={classes}"
        )));
    }
    let b = probs.rows();
    let top_k: Vec<Vec<usize>> = probs.iter_rows().map(|r| top_m(r, k)).collect();
    let top_n: Vec<Vec<usize>> = probs.iter_rows().map(|r| top_m(r, n)).collect();
    let mut out = PairIndicator::zeros(b, k, n);
    for i in 0..b {
        for j in (i + 1)..b {
            let v = if overlaps(&top_k[i], &top_k[j]) {
                1
            } else if !overlaps(&top_n[i], &top_n[j]) {
                -1
            } else {
                0
            };
            out.set_pair(i, j, v);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    /// Positives and negatives averaged separately, rows averaged.
    #[default]
    Separated,
    /// Weights `1_ij / Σ_j 1_ij`, rows with a non-positive weight sum skipped.
    Literal,
}

/// Per-pair weights `w` such that the loss is `-Σ_ij w_ij log s_ij`.
/// Returns `None` when no row participates.
pub fn contrastive_weights(ind: &PairIndicator, mode: ContrastiveMode) -> Option<DenseMatrix> {
    let b = ind.size();
    let mut w = DenseMatrix::zeros(b, b);
    let mut active = 0usize;
    for i in 0..b {
        let (mut pos, mut neg) = (0usize, 0usize);
        for j in 0..b {
            match ind.get(i, j) {
                1 => pos += 1,
                -1 => neg += 1,
                _ => {}
            }
        }
        match mode {
            ContrastiveMode::Separated => {
                if pos == 0 && neg == 0 {
                    continue;
                }
                active += 1;
                for j in 0..b {
                    match ind.get(i, j) {
                        1 => w.set(i, j, 1.0 / pos as f64),
                        -1 => w.set(i, j, -1.0 / neg as f64),
                        _ => {}
                    }
                }
            }
            ContrastiveMode::Literal => {
                let total = pos as f64 - neg as f64;
                if total <= 0.0 {
                    continue;
                }
                active += 1;
                for j in 0..b {
                    let v = ind.get(i, j);
                    if v != 0 {
                        w.set(i, j, v as f64 / total);
                    }
                }
            }
        }
    }
    if active == 0 {
        return None;
    }
    if mode == ContrastiveMode::Separated {
        w = w.scale(1.0 / active as f64);
    }
    Some(w)
}

fn zero_loss(tape: &mut Tape) -> ScalarLoss {
    let z = tape.constant(DenseMatrix::scalar(0.0));
    tape.loss(z)
}

/// Contrastive loss over a batch of features. Similarities are plain cosines;
/// each row's softmax runs over the other items only.
pub fn contrastive_loss(
    tape: &mut Tape,
    features: Var,
    ind: &PairIndicator,
    mode: ContrastiveMode,
) -> Result<ScalarLoss> {
    let b = tape.value(features).rows();
    if ind.size() != b {
        return Err(Error::LengthMismatch {
            what: "indicator vs batch",
            left: ind.size(),
            right: b,
        });
    }
    let Some(weights) = contrastive_weights(ind, mode) else {
        return Ok(zero_loss(tape));
    };
    let f = tape.normalize_rows(features, "features")?;
    let sim = tape.matmul_nt(f, f)?;
    let log_s = tape.log_softmax_rows(sim, true)?;
    let weighted = tape.mul_const(log_s, weights)?;
    let total = tape.sum_all(weighted);
    let loss = tape.scale(total, -1.0);
    Ok(tape.loss(loss))
}

/// Mean distance between unit-normalized target and SSL features. The SSL side
/// is detached.
pub fn kd_loss(tape: &mut Tape, target_feats: Var, ssl_feats: Var) -> Result<ScalarLoss> {
    let (ts, ss) = (tape.value(target_feats).shape(), tape.value(ssl_feats).shape());
    if ts != ss {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            left: ts,
            right: ss,
        });
    }
    let ssl = tape.detach(ssl_feats);
    let t = tape.normalize_rows(target_feats, "target features")?;
    let s = tape.normalize_rows(ssl, "ssl features")?;
    let diff = tape.sub(t, s)?;
    let norms = tape.row_norms(diff);
    let total = tape.sum_all(norms);
    let loss = tape.scale(total, 1.0 / ts.0 as f64);
    Ok(tape.loss(loss))
}

pub fn check_probability_rows(p: &DenseMatrix) -> Result<()> {
    for (row, r) in p.iter_rows().enumerate() {
        let sum = r.iter().fold(0.0, |a, &v| a + v);
        if !((sum - 1.0).abs() <= PROBABILITY_TOLERANCE) || r.iter().any(|&v| v < 0.0) {
            return Err(Error::NotProbability { row, sum });
        }
    }
    Ok(())
}

/// Mutual information of the batch joint `(1/B) Σ_i p_i ⊗ q_i`, symmetrized and
/// renormalized, with floored logarithms.
pub fn mutual_information(tape: &mut Tape, p: Var, q: Var) -> Result<ScalarLoss> {
    let (ps, qs) = (tape.value(p).shape(), tape.value(q).shape());
    if ps != qs {
        return Err(Error::ShapeMismatch {
            op: "mutual_information",
            left: ps,
            right: qs,
        });
    }
    check_probability_rows(tape.value(p))?;
    check_probability_rows(tape.value(q))?;
    let pt = tape.transpose(p);
    let qt = tape.transpose(q);
    let outer = tape.matmul_nt(pt, qt)?;
    let joint = tape.scale(outer, 1.0 / ps.0 as f64);
    let joint_t = tape.transpose(joint);
    let sym = tape.add(joint, joint_t)?;
    let sym = tape.scale(sym, 0.5);
    let mass = tape.sum_all(sym);
    let joint = tape.div_scalar(sym, mass)?;

    let row_marg = tape.row_sums(joint);
    let col_marg = tape.col_sums(joint);
    let log_joint = tape.log_floor(joint);
    let log_row = tape.log_floor(row_marg);
    let log_col = tape.log_floor(col_marg);
    let neg_row = tape.scale(log_row, -1.0);
    let neg_col = tape.scale(log_col, -1.0);
    let ratio = tape.add_col_broadcast(log_joint, neg_row)?;
    let ratio = tape.add_row_broadcast(ratio, neg_col)?;
    let terms = tape.mul(joint, ratio)?;
    let mi = tape.sum_all(terms);
    Ok(tape.loss(mi))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiSign {
    /// Target term is `-I`, so descending the loss raises the mutual information.
    #[default]
    Maximize,
    /// Target term is `+I`.
    Literal,
}

impl MiSign {
    pub fn factor(self) -> f64 {
        match self {
            MiSign::Maximize => -1.0,
            MiSign::Literal => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MutualTerms {
    /// Cross-entropy of the SSL branch against target pseudo labels.
    pub ssl_term: ScalarLoss,
    /// Signed mutual information between target and (detached) SSL predictions.
    pub target_term: ScalarLoss,
}

/// `-(1/B) Σ_i log⌊probs[i][labels[i]]⌋`.
fn cross_entropy_to_labels(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<ScalarLoss> {
    let (b, c) = tape.value(probs).shape();
    let mut onehot = DenseMatrix::zeros(b, c);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(i, l, 1.0);
    }
    let logp = tape.log_floor(probs);
    let picked = tape.mul_const(logp, onehot)?;
    let total = tape.sum_all(picked);
    let loss = tape.scale(total, -1.0 / b as f64);
    Ok(tape.loss(loss))
}

pub fn mutual_learning_loss(tape: &mut Tape, p_ssl: Var, p_t: Var, sign: MiSign) -> Result<MutualTerms> {
    let (ss, ts) = (tape.value(p_ssl).shape(), tape.value(p_t).shape());
    if ss != ts {
        return Err(Error::ShapeMismatch {
            op: "mutual_learning_loss",
            left: ss,
            right: ts,
        });
    }
    check_probability_rows(tape.value(p_ssl))?;
    let pseudo = tape.value(p_t).argmax_rows();
    let ssl_term = cross_entropy_to_labels(tape, p_ssl, &pseudo)?;
    let ssl_fixed = tape.detach(p_ssl);
    let mi = mutual_information(tape, p_t, ssl_fixed)?;
    let signed = tape.scale(mi.var, sign.factor());
    Ok(MutualTerms {
        ssl_term,
        target_term: tape.loss(signed),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub lambda_ml: f64,
    pub enable_cl: bool,
    pub enable_kd: bool,
    pub enable_ml: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_kd: 0.01,
            lambda_ml: 0.4,
            enable_cl: true,
            enable_kd: true,
            enable_ml: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_kd", self.lambda_kd), ("lambda_ml", self.lambda_ml)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn uses_cl(&self) -> bool {
        self.enable_cl
    }

    pub fn uses_kd(&self) -> bool {
        self.enable_kd && self.lambda_kd != 0.0
    }

    pub fn uses_ml(&self) -> bool {
        self.enable_ml && self.lambda_ml != 0.0
    }
}

/// `L_cl + λ_kd L_kd + λ_ml (ssl_term + target_term)`; a disabled or
/// zero-weighted term is left out of the graph entirely.
pub fn total_loss(
    tape: &mut Tape,
    cl: Option<ScalarLoss>,
    kd: Option<ScalarLoss>,
    ml: Option<MutualTerms>,
    w: &LossWeights,
) -> Result<ScalarLoss> {
    let mut acc: Option<Var> = None;
    let mut push = |tape: &mut Tape, v: Var| -> Result<()> {
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
        Ok(())
    };
    if let (true, Some(cl)) = (w.uses_cl(), cl) {
        push(tape, cl.var)?;
    }
    if let (true, Some(kd)) = (w.uses_kd(), kd) {
        let v = tape.scale(kd.var, w.lambda_kd);
        push(tape, v)?;
    }
    if let (true, Some(ml)) = (w.uses_ml(), ml) {
        let both = tape.add(ml.ssl_term.var, ml.target_term.var)?;
        let v = tape.scale(both, w.lambda_ml);
        push(tape, v)?;
    }
    Ok(match acc {
        Some(v) => tape.loss(v),
        None => zero_loss(tape),
    })
}

/// Mean Shannon entropy of the rows.
pub fn entropy_loss(tape: &mut Tape, probs: Var) -> Result<ScalarLoss> {
    check_probability_rows(tape.value(probs))?;
    let b = tape.value(probs).rows();
    let logp = tape.log_floor(probs);
    let plogp = tape.mul(probs, logp)?;
    let total = tape.sum_all(plogp);
    let loss = tape.scale(total, -1.0 / b as f64);
    Ok(tape.loss(loss))
}

/// Cross-entropy of the student against the teacher's hard labels. The
/// teacher is detached.
pub fn consistency_loss(tape: &mut Tape, student: Var, teacher: Var) -> Result<ScalarLoss> {
    let (ss, ts) = (tape.value(student).shape(), tape.value(teacher).shape());
    if ss != ts {
        return Err(Error::ShapeMismatch {
            op: "consistency_loss",
            left: ss,
            right: ts,
        });
    }
    check_probability_rows(tape.value(student))?;
    check_probability_rows(tape.value(teacher))?;
    let fixed = tape.detach(teacher);
    let labels = tape.value(fixed).argmax_rows();
    cross_entropy_to_labels(tape, student, &labels)
}
