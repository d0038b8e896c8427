use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::step::{row_entropy, OnlineLearner, StepOutput};
use crate::data::DomainStream;
use crate::error::{Error, Result};
use crate::model::ModelPair;

/// Everything recorded while streaming through one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTrace {
    pub name: String,
    pub steps: Vec<StepOutput>,
    /// Per-batch predictions of the evaluated model as it was before the run.
    pub initial_predictions: Vec<Vec<usize>>,
    pub start_fingerprint: String,
    pub end_fingerprint: String,
    pub ssl_adapter_fingerprint: String,
}

/// Label-free record of an online run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub config: RunConfig,
    pub seed: u64,
    pub learning_rate: f64,
    pub initial_ssl_adapter_fingerprint: String,
    pub domains: Vec<DomainTrace>,
    pub wall_time_secs: f64,
}

/// Online adapt-on-some-domains, frozen-evaluate-on-the-rest record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationTrace {
    pub adapt: RunTrace,
    pub heldout: Vec<DomainTrace>,
    pub fingerprint_before_holdout: String,
    pub fingerprint_after_holdout: String,
}

fn nominal_batch_size(stream: &DomainStream) -> usize {
    stream
        .domains
        .iter()
        .flat_map(|d| d.batches.iter().map(|b| b.rows()))
        .max()
        .unwrap_or(0)
}

fn check_stream(pair: &ModelPair, stream: &DomainStream) -> Result<()> {
    if stream.domains.is_empty() || stream.total_items() == 0 {
        return Err(Error::config("stream has no target data"));
    }
    if stream.dim != pair.dim() {
        return Err(Error::ShapeMismatch {
            op: "run_ctta",
            left: (pair.classes(), pair.dim()),
            right: (stream.classes, stream.dim),
        });
    }
    if stream.classes != pair.classes() {
        return Err(Error::config(format!(
            "stream has {} classes, model has {}",
            stream.classes,
            pair.classes()
        )));
    }
    Ok(())
}

impl OnlineLearner {
    /// Streams every domain in order through [`OnlineLearner::adapt_step`]
    /// without resetting anything at domain boundaries.
    pub fn run_stream(&mut self, stream: &DomainStream) -> Result<Vec<DomainTrace>> {
        let initial = self.clone();
        let mut out = Vec::with_capacity(stream.domains.len());
        for (di, domain) in stream.domains.iter().enumerate() {
            let start_fingerprint = self.pair().fingerprint();
            let mut steps = Vec::with_capacity(domain.batches.len());
            let mut initial_predictions = Vec::with_capacity(domain.batches.len());
            for (bi, batch) in domain.batches.iter().enumerate() {
                initial_predictions.push(initial.evaluate(batch)?.argmax_rows());
                steps.push(self.adapt_step(batch, di, bi)?);
            }
            out.push(DomainTrace {
                name: domain.name.clone(),
                steps,
                initial_predictions,
                start_fingerprint,
                end_fingerprint: self.pair().fingerprint(),
                ssl_adapter_fingerprint: self.pair().ssl_adapter.fingerprint(),
            });
        }
        Ok(out)
    }

    /// Predictions on every batch with no parameter updates.
    pub fn evaluate_stream(&self, stream: &DomainStream) -> Result<Vec<DomainTrace>> {
        let fp = self.pair().fingerprint();
        let ssl_fp = self.pair().ssl_adapter.fingerprint();
        stream
            .domains
            .iter()
            .map(|domain| {
                let mut steps = Vec::with_capacity(domain.batches.len());
                for batch in &domain.batches {
                    let start = Instant::now();
                    let probs = self.evaluate(batch)?;
                    let predictions = probs.argmax_rows();
                    let entropy = row_entropy(&probs);
                    steps.push(StepOutput {
                        pseudo_labels: predictions.clone(),
                        predictions,
                        entropy,
                        loss: None,
                        wall_time_secs: start.elapsed().as_secs_f64(),
                    });
                }
                Ok(DomainTrace {
                    name: domain.name.clone(),
                    initial_predictions: steps.iter().map(|s| s.predictions.clone()).collect(),
                    steps,
                    start_fingerprint: fp.clone(),
                    end_fingerprint: fp.clone(),
                    ssl_adapter_fingerprint: ssl_fp.clone(),
                })
            })
            .collect()
    }
}

fn start_run(pair: &ModelPair, stream: &DomainStream, cfg: &RunConfig, seed: u64) -> Result<OnlineLearner> {
    check_stream(pair, stream)?;
    OnlineLearner::new(pair.clone(), cfg, nominal_batch_size(stream), seed)
}

fn trace_of(learner: &mut OnlineLearner, stream: &DomainStream, cfg: &RunConfig, seed: u64) -> Result<RunTrace> {
    let start = Instant::now();
    let initial_ssl_adapter_fingerprint = learner.pair().ssl_adapter.fingerprint();
    let domains = learner.run_stream(stream)?;
    Ok(RunTrace {
        config: cfg.clone(),
        seed,
        learning_rate: learner.target_learning_rate(),
        initial_ssl_adapter_fingerprint,
        domains,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Continual online adaptation over `stream`. `pair` is copied, so the
/// caller's model is never modified.
pub fn run_ctta(pair: &ModelPair, stream: &DomainStream, cfg: &RunConfig, seed: u64) -> Result<RunTrace> {
    let mut learner = start_run(pair, stream, cfg, seed)?;
    trace_of(&mut learner, stream, cfg, seed)
}

/// Adapts online on `adapt`, then evaluates the frozen result on `heldout`.
pub fn run_domain_generalization(
    pair: &ModelPair,
    adapt: &DomainStream,
    heldout: &DomainStream,
    cfg: &RunConfig,
    seed: u64,
) -> Result<GeneralizationTrace> {
    let seen: HashSet<&str> = adapt.domains.iter().map(|d| d.name.as_str()).collect();
    if let Some(dup) = heldout.domains.iter().find(|d| seen.contains(d.name.as_str())) {
        return Err(Error::config(format!("domain `{}` is in both adapt and heldout lists", dup.name)));
    }
    check_stream(pair, heldout)?;
    let mut learner = start_run(pair, adapt, cfg, seed)?;
    let adapt_trace = trace_of(&mut learner, adapt, cfg, seed)?;
    let fingerprint_before_holdout = learner.pair().fingerprint();
    let heldout_traces = learner.evaluate_stream(heldout)?;
    Ok(GeneralizationTrace {
        adapt: adapt_trace,
        heldout: heldout_traces,
        fingerprint_before_holdout,
        fingerprint_after_holdout: learner.pair().fingerprint(),
    })
}
