//! Central-difference checks of every objective against the tape. Each
//! check returns the worst relative error over its instances.

use collab_tta::losses::{
    consistency_loss, contrastive_loss, entropy_loss, kd_loss, mutual_learning_loss, pairwise_indicator, total_loss,
    ContrastiveMode, LossWeights, MiSign, MutualTerms, PairIndicator,
};
use collab_tta::math::{default_step, finite_difference_check, DenseMatrix, Parameter, Tape, Var};
use collab_tta::model::{adapter_forward, classifier_forward, AdapterMode, AffineAdapter};
use collab_tta::Result;
use super::{normal, probs, rng};

pub const INSTANCES: usize = 24;
const SIGMA: f64 = 5.0;

#[derive(Clone, Copy, Debug)]
struct Shape {
    b: usize,
    c: usize,
    d: usize,
}

fn shape(i: usize) -> Shape {
    Shape {
        b: [2, 4, 8][i % 3],
        c: [3, 5, 10][(i / 3) % 3],
        d: [4, 16][(i / 9) % 2],
    }
}

fn kn(c: usize) -> (usize, usize) {
    if c <= 3 {
        (1, 2)
    } else {
        (1, 3)
    }
}

fn check(worst: &mut f64, params: Vec<Parameter>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let err = finite_difference_check(f, &params, default_step(&params)).unwrap();
    *worst = worst.max(err);
}

fn param(m: DenseMatrix) -> Parameter {
    Parameter::new(m, true)
}

fn fixed(m: DenseMatrix) -> Parameter {
    Parameter::new(m, false)
}

fn indicator(s: Shape, seed: u64) -> PairIndicator {
    let (k, n) = kn(s.c);
    pairwise_indicator(&probs(s.b, s.c, 2.0, &mut rng(seed)), k, n).unwrap()
}

pub fn contrastive(mode: ContrastiveMode) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let s = shape(i);
        let ind = indicator(s, 1000 + i as u64);
        let feats = normal(s.b, s.d, &mut rng(i as u64));
        check(&mut worst, vec![param(feats)], |t, v| Ok(contrastive_loss(t, v[0], &ind, mode)?.var));
    }
    worst
}

pub fn kd() -> f64 {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let s = shape(i);
        let mut r = rng(i as u64);
        let (ft, fs) = (normal(s.b, s.d, &mut r), normal(s.b, s.d, &mut r));
        check(&mut worst, vec![param(ft), fixed(fs)], |t, v| Ok(kd_loss(t, v[0], v[1])?.var));
    }
    worst
}

/// Probabilities from logit parameters; `ssl_side` picks which one is probed.
fn mutual_term(sign: MiSign, ssl_side: bool) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let s = shape(i);
        let mut r = rng(50 + i as u64);
        let (ls, lt) = (normal(s.b, s.c, &mut r), normal(s.b, s.c, &mut r));
        let params = if ssl_side {
            vec![param(ls), fixed(lt)]
        } else {
            vec![fixed(ls), param(lt)]
        };
        check(&mut worst, params, |t, v| {
            let (ps, pt) = (t.softmax_rows(v[0]), t.softmax_rows(v[1]));
            let terms = mutual_learning_loss(t, ps, pt, sign)?;
            Ok(if ssl_side { terms.ssl_term.var } else { terms.target_term.var })
        });
    }
    worst
}

pub fn ssl_term(sign: MiSign) -> f64 {
    mutual_term(sign, true)
}

pub fn target_term(sign: MiSign) -> f64 {
    mutual_term(sign, false)
}

pub fn entropy() -> f64 {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let s = shape(i);
        let a = normal(s.b, s.c, &mut rng(90 + i as u64));
        check(&mut worst, vec![param(a)], |t, v| {
            let p = t.softmax_rows(v[0]);
            Ok(entropy_loss(t, p)?.var)
        });
    }
    worst
}

pub fn consistency() -> f64 {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let s = shape(i);
        let mut r = rng(190 + i as u64);
        let (a, b) = (normal(s.b, s.c, &mut r), normal(s.b, s.c, &mut r));
        check(&mut worst, vec![param(a), fixed(b)], |t, v| {
            let (ps, pt) = (t.softmax_rows(v[0]), t.softmax_rows(v[1]));
            Ok(consistency_loss(t, ps, pt)?.var)
        });
    }
    worst
}

/// Full objective through the target adapter and both classifiers. A
/// moderate logit scale keeps the softmax away from saturation, where
/// relative error is dominated by roundoff in vanishing entries.
pub fn combined() -> f64 {
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let s = shape(i);
        let mut r = rng(300 + i as u64);
        let x = normal(s.b, s.d, &mut r);
        let mut adapter = AffineAdapter::identity(s.d, AdapterMode::Full);
        adapter.weight.tensor = DenseMatrix::identity(s.d).add(&normal(s.d, s.d, &mut r).scale(0.1)).unwrap();
        adapter.gamma.tensor = normal(1, s.d, &mut r).scale(0.1).map(|v| 1.0 + v);
        adapter.beta.tensor = normal(1, s.d, &mut r).scale(0.1);
        let mu_t = normal(s.c, s.d, &mut r);
        let mu_s = mu_t.add(&normal(s.c, s.d, &mut r).scale(0.2)).unwrap();
        let ind = indicator(s, 700 + i as u64);
        let (wt, wg, wb) = (adapter.weight.tensor.clone(), adapter.gamma.tensor.clone(), adapter.beta.tensor.clone());
        let weights = LossWeights {
            lambda_kd: 0.3,
            lambda_ml: 0.4,
            ..LossWeights::default()
        };
        // Central differences cannot see a stop-gradient, so the target term
        // reads SSL probabilities from the unperturbed prototypes.
        let (x0, mu_s0) = (x.clone(), mu_s.clone());
        let p_s_frozen = |t: &mut Tape| -> Result<Var> {
            let (xv, mv) = (t.constant(x0.clone()), t.constant(mu_s0.clone()));
            classifier_forward(t, xv, mv, SIGMA)
        };
        let params = vec![fixed(x), param(wt), param(wg), param(wb), param(mu_t), param(mu_s)];
        check(&mut worst, params, |t, v| {
            let feats = adapter_forward(
                t,
                collab_tta::model::AdapterVars {
                    weight: v[1],
                    gamma: v[2],
                    beta: v[3],
                },
                v[0],
            )?;
            let p_t = classifier_forward(t, feats, v[4], SIGMA)?;
            let p_s = classifier_forward(t, v[0], v[5], SIGMA)?;
            let cl = contrastive_loss(t, feats, &ind, ContrastiveMode::Separated)?;
            let kd = kd_loss(t, feats, v[0])?;
            let ml = mutual_learning_loss(t, p_s, p_t, MiSign::Maximize)?;
            let ml = MutualTerms {
                ssl_term: ml.ssl_term,
                target_term: {
                    let frozen = p_s_frozen(t)?;
                    mutual_learning_loss(t, frozen, p_t, MiSign::Maximize)?.target_term
                },
            };
            Ok(total_loss(t, Some(cl), Some(kd), Some(ml), &weights)?.var)
        });
    }
    worst
}

/// Every check with its label.
pub fn all() -> Vec<(&'static str, f64)> {
    vec![
        ("contrastive (separated)", contrastive(ContrastiveMode::Separated)),
        ("contrastive (literal)", contrastive(ContrastiveMode::Literal)),
        ("kd", kd()),
        ("ssl_term (maximize)", ssl_term(MiSign::Maximize)),
        ("ssl_term (literal)", ssl_term(MiSign::Literal)),
        ("target_term (maximize)", target_term(MiSign::Maximize)),
        ("target_term (literal)", target_term(MiSign::Literal)),
        ("combined objective", combined()),
        ("entropy", entropy()),
        ("consistency", consistency()),
    ]
}
