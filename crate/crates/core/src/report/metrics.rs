use serde::{Deserialize, Serialize};

use crate::data::{Domain, DomainStream};
use crate::engine::{DomainTrace, GeneralizationTrace, RunTrace};
use crate::error::{Error, Result};
use crate::model::{predict, AffineAdapter, EmbeddingDataset, PrototypeClassifier};

/// Capability required to read ground-truth stream labels. Only evaluation
/// code constructs one.
#[derive(Debug)]
pub struct LabelKey {
    _private: (),
}

impl LabelKey {
    pub fn evaluator() -> Self {
        LabelKey { _private: () }
    }
}

/// One graded online step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub domain_index: usize,
    pub batch_index: usize,
    pub predictions: Vec<usize>,
    pub true_labels: Vec<usize>,
    pub entropy_per_sample: Vec<f64>,
    pub pseudo_label_correct: Vec<bool>,
    pub wall_time_secs: f64,
}

/// Per-step counts kept in a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub domain_index: usize,
    pub batch_index: usize,
    pub size: usize,
    pub errors: usize,
    pub pseudo_label_errors: usize,
    pub mean_entropy: f64,
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainError {
    pub domain: String,
    /// Percent, full precision.
    pub error: f64,
}

/// 2×2 tally of initial vs final correctness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftMatrix {
    pub correct_to_correct: u64,
    pub correct_to_incorrect: u64,
    pub incorrect_to_correct: u64,
    pub incorrect_to_incorrect: u64,
}

impl ShiftMatrix {
    pub fn total(&self) -> u64 {
        self.correct_to_correct + self.correct_to_incorrect + self.incorrect_to_correct + self.incorrect_to_incorrect
    }

    pub fn merge(&mut self, other: &ShiftMatrix) {
        self.correct_to_correct += other.correct_to_correct;
        self.correct_to_incorrect += other.correct_to_incorrect;
        self.incorrect_to_correct += other.incorrect_to_correct;
        self.incorrect_to_incorrect += other.incorrect_to_incorrect;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftTable {
    pub per_domain: Vec<(String, ShiftMatrix)>,
    pub total: ShiftMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Fraction of wrong predictions in the bin; `None` when empty.
    pub error_rate: Option<f64>,
}

/// Wall-clock fields, kept apart so the rest of a report is reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time_total_secs: f64,
    pub step_wall_time_secs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub config: crate::engine::RunConfig,
    pub learning_rate: f64,
    pub per_domain_error: Vec<DomainError>,
    pub mean_error: f64,
    pub baseline_mean: Option<f64>,
    /// `baseline_mean - mean_error`, percent.
    pub gain_vs_baseline: Option<f64>,
    pub source_accuracy: Option<f64>,
    pub shifts: ShiftTable,
    pub entropy_profile: Vec<EntropyBin>,
    pub step_records: Vec<StepSummary>,
    pub timing: Timing,
}

impl RunReport {
    /// Copy with timing cleared, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunReport {
        RunReport {
            timing: Timing::default(),
            ..self.clone()
        }
    }

    /// Pretty JSON with timing cleared.
    pub fn deterministic_json(&self) -> String {
        serde_json::to_string_pretty(&self.without_timing()).expect("report serializes")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.per_domain_error.iter().map(|d| d.domain.clone()).collect()
    }
}

/// Frozen-evaluation result on unseen domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub adapt: RunReport,
    pub unseen_error: Vec<DomainError>,
    pub unseen_mean: f64,
    pub fingerprint_before_holdout: String,
    pub fingerprint_after_holdout: String,
}

impl GeneralizationReport {
    pub fn holdout_was_frozen(&self) -> bool {
        self.fingerprint_before_holdout == self.fingerprint_after_holdout
    }
}

pub fn gain(baseline_mean: f64, method_mean: f64) -> f64 {
    baseline_mean - method_mean
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn percent_wrong(pred: &[usize], truth: &[usize]) -> (usize, usize) {
    let wrong = pred.iter().zip(truth).filter(|(p, t)| p != t).count();
    (wrong, pred.len())
}

fn match_domain<'a>(trace: &DomainTrace, domain: &'a Domain) -> Result<&'a [Vec<usize>]> {
    if trace.name != domain.name {
        return Err(Error::config(format!(
            "trace domain `{}` does not match stream domain `{}`",
            trace.name, domain.name
        )));
    }
    let labels = domain.labels.reveal(&LabelKey::evaluator());
    if labels.len() != trace.steps.len() {
        return Err(Error::LengthMismatch {
            what: "batches",
            left: trace.steps.len(),
            right: labels.len(),
        });
    }
    for (s, l) in trace.steps.iter().zip(labels) {
        if s.predictions.len() != l.len() {
            return Err(Error::LengthMismatch {
                what: "batch predictions",
                left: s.predictions.len(),
                right: l.len(),
            });
        }
    }
    Ok(labels)
}

fn check_lengths(traces: &[DomainTrace], stream: &DomainStream) -> Result<()> {
    if traces.len() != stream.domains.len() {
        return Err(Error::LengthMismatch {
            what: "domains",
            left: traces.len(),
            right: stream.domains.len(),
        });
    }
    if traces.is_empty() {
        return Err(Error::config("report needs at least one domain"));
    }
    Ok(())
}

/// Attaches ground truth to every recorded step.
pub fn grade(traces: &[DomainTrace], stream: &DomainStream) -> Result<Vec<StepRecord>> {
    check_lengths(traces, stream)?;
    let mut out = Vec::new();
    for (di, (trace, domain)) in traces.iter().zip(&stream.domains).enumerate() {
        let labels = match_domain(trace, domain)?;
        for (bi, (step, truth)) in trace.steps.iter().zip(labels).enumerate() {
            out.push(StepRecord {
                domain_index: di,
                batch_index: bi,
                predictions: step.predictions.clone(),
                true_labels: truth.clone(),
                entropy_per_sample: step.entropy.clone(),
                pseudo_label_correct: step.pseudo_labels.iter().zip(truth).map(|(p, t)| p == t).collect(),
                wall_time_secs: step.wall_time_secs,
            });
        }
    }
    Ok(out)
}

pub fn prediction_shift(initial: &[usize], last: &[usize], labels: &[usize]) -> Result<ShiftMatrix> {
    if initial.len() != labels.len() || last.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "prediction shift inputs",
            left: initial.len().max(last.len()),
            right: labels.len(),
        });
    }
    let mut m = ShiftMatrix::default();
    for ((&a, &b), &t) in initial.iter().zip(last).zip(labels) {
        match (a == t, b == t) {
            (true, true) => m.correct_to_correct += 1,
            (true, false) => m.correct_to_incorrect += 1,
            (false, true) => m.incorrect_to_correct += 1,
            (false, false) => m.incorrect_to_incorrect += 1,
        }
    }
    Ok(m)
}

fn shift_table(traces: &[DomainTrace], stream: &DomainStream) -> Result<ShiftTable> {
    let mut table = ShiftTable::default();
    for (trace, domain) in traces.iter().zip(&stream.domains) {
        let labels = match_domain(trace, domain)?;
        let mut m = ShiftMatrix::default();
        for ((init, step), truth) in trace.initial_predictions.iter().zip(&trace.steps).zip(labels) {
            m.merge(&prediction_shift(init, &step.predictions, truth)?);
        }
        table.total.merge(&m);
        table.per_domain.push((trace.name.clone(), m));
    }
    Ok(table)
}

pub const ENTROPY_BINS: usize = 10;

/// Error rate in 10 equal-width entropy bins over `[0, ln C]`.
pub fn entropy_accuracy_profile(records: &[StepRecord], classes: usize) -> Result<Vec<EntropyBin>> {
    if records.is_empty() {
        return Err(Error::config("entropy profile needs at least one step"));
    }
    if classes < 2 {
        return Err(Error::config("entropy profile needs at least two classes"));
    }
    let width = (classes as f64).ln() / ENTROPY_BINS as f64;
    let mut counts = [0usize; ENTROPY_BINS];
    let mut wrong = [0usize; ENTROPY_BINS];
    for r in records {
        for ((&h, &p), &t) in r.entropy_per_sample.iter().zip(&r.predictions).zip(&r.true_labels) {
            let b = ((h.max(0.0) / width) as usize).min(ENTROPY_BINS - 1);
            counts[b] += 1;
            wrong[b] += usize::from(p != t);
        }
    }
    Ok((0..ENTROPY_BINS)
        .map(|b| EntropyBin {
            lo: b as f64 * width,
            hi: (b + 1) as f64 * width,
            count: counts[b],
            error_rate: (counts[b] > 0).then(|| wrong[b] as f64 / counts[b] as f64),
        })
        .collect())
}

fn domain_errors(traces: &[DomainTrace], stream: &DomainStream) -> Result<Vec<DomainError>> {
    check_lengths(traces, stream)?;
    traces
        .iter()
        .zip(&stream.domains)
        .map(|(trace, domain)| {
            let labels = match_domain(trace, domain)?;
            let (mut wrong, mut total) = (0, 0);
            for (s, t) in trace.steps.iter().zip(labels) {
                let (w, n) = percent_wrong(&s.predictions, t);
                wrong += w;
                total += n;
            }
            Ok(DomainError {
                domain: trace.name.clone(),
                error: 100.0 * wrong as f64 / total.max(1) as f64,
            })
        })
        .collect()
}

/// Grades a trace against the stream's hidden labels.
pub fn summarize(
    trace: &RunTrace,
    stream: &DomainStream,
    baseline_mean: Option<f64>,
    source_accuracy: Option<f64>,
) -> Result<RunReport> {
    let per_domain_error = domain_errors(&trace.domains, stream)?;
    let mean_error = mean(per_domain_error.iter().map(|d| d.error));
    let records = grade(&trace.domains, stream)?;
    let entropy_profile = entropy_accuracy_profile(&records, stream.classes)?;
    let shifts = shift_table(&trace.domains, stream)?;
    let losses = trace.domains.iter().flat_map(|d| d.steps.iter().map(|s| s.loss));
    let step_records = records
        .iter()
        .zip(losses)
        .map(|(r, loss)| StepSummary {
            domain_index: r.domain_index,
            batch_index: r.batch_index,
            size: r.predictions.len(),
            errors: percent_wrong(&r.predictions, &r.true_labels).0,
            pseudo_label_errors: r.pseudo_label_correct.iter().filter(|c| !**c).count(),
            mean_entropy: mean(r.entropy_per_sample.iter().copied()),
            loss,
        })
        .collect();
    Ok(RunReport {
        method: trace.config.method.method.name().to_string(),
        seed: trace.seed,
        config: trace.config.clone(),
        learning_rate: trace.learning_rate,
        per_domain_error,
        mean_error,
        baseline_mean,
        gain_vs_baseline: baseline_mean.map(|b| gain(b, mean_error)),
        source_accuracy,
        shifts,
        entropy_profile,
        step_records,
        timing: Timing {
            wall_time_total_secs: trace.wall_time_secs,
            step_wall_time_secs: records.iter().map(|r| r.wall_time_secs).collect(),
        },
    })
}

pub fn summarize_generalization(
    trace: &GeneralizationTrace,
    adapt: &DomainStream,
    heldout: &DomainStream,
) -> Result<GeneralizationReport> {
    let report = summarize(&trace.adapt, adapt, None, None)?;
    let unseen_error = domain_errors(&trace.heldout, heldout)?;
    let unseen_mean = mean(unseen_error.iter().map(|d| d.error));
    Ok(GeneralizationReport {
        adapt: report,
        unseen_error,
        unseen_mean,
        fingerprint_before_holdout: trace.fingerprint_before_holdout.clone(),
        fingerprint_after_holdout: trace.fingerprint_after_holdout.clone(),
    })
}

/// Top-1 accuracy (percent) of a model on a labeled dataset.
pub fn accuracy(adapter: &AffineAdapter, classifier: &PrototypeClassifier, data: &EmbeddingDataset) -> Result<f64> {
    let preds = predict(adapter, classifier, data.features())?.argmax_rows();
    let (wrong, n) = percent_wrong(&preds, data.labels());
    Ok(100.0 * (n - wrong) as f64 / n.max(1) as f64)
}
