use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::config::{EvalModel, IndicatorSource, Method, MethodConfig, RunConfig};
use super::optimizer::{ema_update, sgd_momentum_step, OptimizerState};
use crate::error::{Error, Result};
use crate::losses::{
    consistency_loss, contrastive_loss, entropy_loss, kd_loss, mutual_learning_loss, pairwise_indicator, total_loss,
};
use crate::math::{DenseMatrix, Parameter, ScalarLoss, Tape, Var, LOG_FLOOR};
use crate::model::{adapter_forward, classifier_forward, predict, AffineAdapter, ModelPair, PrototypeClassifier};

/// RNG stream reserved for CR feature jitter.
const JITTER_STREAM: u64 = 0x6a17;

/// Label-free result of one online step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    /// Evaluated-model predictions, computed before any update.
    pub predictions: Vec<usize>,
    /// Shannon entropy of each evaluated prediction (natural log).
    pub entropy: Vec<f64>,
    /// Hard labels the method trained on this step (its own argmax for
    /// none/em/aws, the teacher's argmax for cr).
    pub pseudo_labels: Vec<usize>,
    /// Objective value, `None` when the method does not optimize.
    pub loss: Option<f64>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug)]
struct Teacher {
    adapter: AffineAdapter,
    classifier: PrototypeClassifier,
}

/// Mutable state of one online run: the model pair, optimizer buffers, the
/// CR teacher and the jitter RNG.
#[derive(Clone, Debug)]
pub struct OnlineLearner {
    pair: ModelPair,
    cfg: MethodConfig,
    target_opt: OptimizerState,
    ssl_opt: OptimizerState,
    teacher: Option<Teacher>,
    rng: ChaCha8Rng,
}

pub(crate) fn row_entropy(p: &DenseMatrix) -> Vec<f64> {
    p.iter_rows()
        .map(|row| -row.iter().map(|&v| v * v.max(LOG_FLOOR).ln()).sum::<f64>())
        .collect()
}

fn target_group(pair: &ModelPair) -> [&Parameter; 4] {
    let [w, g, b] = pair.target_adapter.params();
    [w, g, b, &pair.target_classifier.prototypes]
}

fn target_group_mut(pair: &mut ModelPair) -> [&mut Parameter; 4] {
    let [w, g, b] = pair.target_adapter.params_mut();
    [w, g, b, &mut pair.target_classifier.prototypes]
}

fn all_finite(params: &[&Parameter]) -> bool {
    params.iter().all(|p| p.tensor.is_finite())
}

impl OnlineLearner {
    /// Configures trainability for `cfg.method.method` and zeroes optimizer
    /// state. `batch_size` feeds the learning-rate scaling rule.
    pub fn new(mut pair: ModelPair, cfg: &RunConfig, batch_size: usize, seed: u64) -> Result<Self> {
        cfg.validate(pair.classes())?;
        let m = &cfg.method;
        let adapts = m.method != Method::None;
        pair.target_adapter.set_mode(m.method.adapter_mode());
        if !adapts {
            for p in pair.target_adapter.params_mut() {
                p.requires_grad = false;
            }
        }
        pair.target_classifier
            .set_trainable(matches!(m.method, Method::Cr | Method::Aws));
        pair.ssl_classifier
            .set_trainable(m.method == Method::Aws && m.update_ssl_classifier);
        for p in target_group_mut(&mut pair) {
            p.zero_grad();
        }
        pair.ssl_classifier.prototypes.zero_grad();

        let lr = cfg.optimizer.learning_rate(batch_size);
        let ssl_lr = cfg.optimizer.ssl_learning_rate(batch_size);
        let target_opt = OptimizerState::new(lr, cfg.optimizer.momentum, &target_group(&pair))?;
        let ssl_opt = OptimizerState::new(ssl_lr, cfg.optimizer.momentum, &[&pair.ssl_classifier.prototypes])?;
        let teacher = (m.method == Method::Cr).then(|| Teacher {
            adapter: pair.target_adapter.clone(),
            classifier: pair.target_classifier.clone(),
        });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(JITTER_STREAM);
        Ok(Self {
            pair,
            cfg: m.clone(),
            target_opt,
            ssl_opt,
            teacher,
            rng,
        })
    }

    pub fn pair(&self) -> &ModelPair {
        &self.pair
    }

    pub fn into_pair(self) -> ModelPair {
        self.pair
    }

    pub fn config(&self) -> &MethodConfig {
        &self.cfg
    }

    pub fn target_learning_rate(&self) -> f64 {
        self.target_opt.learning_rate
    }

    /// Probabilities of the evaluated model under the current parameters.
    pub fn evaluate(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        let p = &self.pair;
        match self.cfg.eval_model {
            EvalModel::Target => predict(&p.target_adapter, &p.target_classifier, batch),
            EvalModel::Ssl => predict(&p.ssl_adapter, &p.ssl_classifier, batch),
            EvalModel::Ensemble => {
                let a = predict(&p.target_adapter, &p.target_classifier, batch)?;
                let b = predict(&p.ssl_adapter, &p.ssl_classifier, batch)?;
                Ok(a.add(&b)?.scale(0.5))
            }
        }
    }

    /// Predicts on `batch`, then applies one update of the configured
    /// method. `(domain, batch_index)` only labels errors.
    pub fn adapt_step(&mut self, batch: &DenseMatrix, domain: usize, batch_index: usize) -> Result<StepOutput> {
        if batch.rows() == 0 {
            return Err(Error::config("empty batch"));
        }
        let start = Instant::now();
        let probs = self.evaluate(batch)?;
        let predictions = probs.argmax_rows();
        let entropy = row_entropy(&probs);

        let (loss, pseudo_labels) = match self.cfg.method {
            Method::None => (None, predictions.clone()),
            Method::Em => self.em_update(batch)?,
            Method::Cr => self.cr_update(batch)?,
            Method::Aws => self.aws_update(batch)?,
        };
        if let Some(v) = loss {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    domain,
                    batch: batch_index,
                    value: v,
                });
            }
        }
        let p = &self.pair;
        let mut watched = target_group(p).to_vec();
        watched.extend(p.ssl_adapter.params());
        watched.push(&p.ssl_classifier.prototypes);
        if !all_finite(&watched) {
            return Err(Error::NonFiniteParameter {
                domain,
                batch: batch_index,
            });
        }
        Ok(StepOutput {
            predictions,
            entropy,
            pseudo_labels,
            loss,
            wall_time_secs: start.elapsed().as_secs_f64(),
        })
    }

    fn target_forward(&self, tape: &mut Tape, x: Var) -> Result<([Var; 4], Var, Var)> {
        let vars = self.pair.target_adapter.vars(tape);
        let feats = adapter_forward(tape, vars, x)?;
        let protos = tape.param(&self.pair.target_classifier.prototypes);
        let probs = classifier_forward(tape, feats, protos, self.pair.target_classifier.logit_scale())?;
        Ok(([vars.weight, vars.gamma, vars.beta, protos], feats, probs))
    }

    fn step_target(&mut self, tape: &Tape, loss: &ScalarLoss, vars: [Var; 4]) -> Result<()> {
        let grads = tape.gradients(loss.var)?;
        let mut group = target_group_mut(&mut self.pair);
        for (v, p) in vars.iter().zip(group.iter_mut()) {
            grads.accumulate_into(*v, p)?;
        }
        sgd_momentum_step(&mut group, &mut self.target_opt)
    }

    fn em_update(&mut self, batch: &DenseMatrix) -> Result<(Option<f64>, Vec<usize>)> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let (vars, _, probs) = self.target_forward(&mut tape, x)?;
        let pseudo = tape.value(probs).argmax_rows();
        let loss = entropy_loss(&mut tape, probs)?;
        self.step_target(&tape, &loss, vars)?;
        Ok((Some(loss.value), pseudo))
    }

    fn cr_update(&mut self, batch: &DenseMatrix) -> Result<(Option<f64>, Vec<usize>)> {
        let teacher = self.teacher.as_ref().expect("cr learner has a teacher");
        let views = self.cfg.cr_views;
        let std = self.cfg.cr_jitter_std;
        let mut avg = DenseMatrix::zeros(batch.rows(), self.pair.classes());
        for _ in 0..views {
            let mut noisy = batch.clone();
            for v in noisy.values_mut() {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                *v += std * z;
            }
            avg.add_assign(&predict(&teacher.adapter, &teacher.classifier, &noisy)?)?;
        }
        let avg = avg.scale(1.0 / views as f64);
        let pseudo = avg.argmax_rows();

        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let (vars, _, probs) = self.target_forward(&mut tape, x)?;
        let t = tape.constant(avg);
        let loss = consistency_loss(&mut tape, probs, t)?;
        self.step_target(&tape, &loss, vars)?;

        let alpha = self.cfg.ema_alpha;
        let teacher = self.teacher.as_mut().expect("cr learner has a teacher");
        let [tw, tg, tb] = teacher.adapter.params_mut();
        let student = target_group(&self.pair);
        ema_update(
            &mut [tw, tg, tb, &mut teacher.classifier.prototypes],
            &student,
            alpha,
        )?;
        Ok((Some(loss.value), pseudo))
    }

    fn aws_update(&mut self, batch: &DenseMatrix) -> Result<(Option<f64>, Vec<usize>)> {
        let cfg = self.cfg.clone();
        let w = &cfg.weights;
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let (vars, f_t, p_t) = self.target_forward(&mut tape, x)?;
        let ssl_vars = self.pair.ssl_adapter.vars(&mut tape);
        let f_s = adapter_forward(&mut tape, ssl_vars, x)?;
        let mu_s = tape.param(&self.pair.ssl_classifier.prototypes);
        let p_s = classifier_forward(&mut tape, f_s, mu_s, self.pair.ssl_classifier.logit_scale())?;
        let pseudo = tape.value(p_t).argmax_rows();

        let cl = if w.uses_cl() {
            let source = match cfg.indicator_source {
                IndicatorSource::Target => tape.value(p_t),
                IndicatorSource::Ssl => tape.value(p_s),
            };
            let ind = pairwise_indicator(source, cfg.k, cfg.n)?;
            Some(contrastive_loss(&mut tape, f_t, &ind, cfg.cl_mode)?)
        } else {
            None
        };
        let kd = if w.uses_kd() {
            Some(kd_loss(&mut tape, f_t, f_s)?)
        } else {
            None
        };
        let ml = if w.uses_ml() {
            Some(mutual_learning_loss(&mut tape, p_s, p_t, cfg.mi_sign)?)
        } else {
            None
        };
        let loss = total_loss(&mut tape, cl, kd, ml, w)?;

        let grads = tape.gradients(loss.var)?;
        grads.accumulate_into(mu_s, &mut self.pair.ssl_classifier.prototypes)?;
        {
            let mut group = target_group_mut(&mut self.pair);
            for (v, p) in vars.iter().zip(group.iter_mut()) {
                grads.accumulate_into(*v, p)?;
            }
            sgd_momentum_step(&mut group, &mut self.target_opt)?;
        }
        if cfg.update_ssl_classifier {
            sgd_momentum_step(&mut [&mut self.pair.ssl_classifier.prototypes], &mut self.ssl_opt)?;
        }
        if cfg.update_ssl_encoder {
            let [sw, sg, sb] = self.pair.ssl_adapter.params_mut();
            let [tw, tg, tb] = self.pair.target_adapter.params();
            ema_update(&mut [sw, sg, sb], &[tw, tg, tb], cfg.ema_alpha)?;
        }
        Ok((Some(loss.value), pseudo))
    }
}
