use crate::data::{generate_synthetic_suite, DomainStream, SyntheticSuiteConfig};
use crate::engine::{run_ctta, run_domain_generalization, Method, RunConfig};
use crate::error::{Error, Result};
use crate::model::{build_prototypes, init_target_from_ssl, AdapterMode, EmbeddingDataset, ModelPair};

use super::metrics::{accuracy, summarize, summarize_generalization, GeneralizationReport, RunReport};

/// Labeled source data plus a target stream.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub source: EmbeddingDataset,
    pub stream: DomainStream,
}

impl Experiment {
    pub fn synthetic(cfg: &SyntheticSuiteConfig) -> Result<Self> {
        let (source, stream) = generate_synthetic_suite(cfg)?;
        Ok(Self { source, stream })
    }

    /// Prototypes from a source forward pass, target branch copied from them.
    pub fn initial_pair(&self, cfg: &RunConfig) -> Result<ModelPair> {
        let clf = build_prototypes(&self.source, cfg.prototypes, cfg.method.sigma)?;
        init_target_from_ssl(&clf, self.source.dim(), AdapterMode::Full)
    }

    pub fn source_accuracy(&self, pair: &ModelPair) -> Result<f64> {
        accuracy(&pair.target_adapter, &pair.target_classifier, &self.source)
    }

    pub fn run(&self, cfg: &RunConfig, seed: u64, baseline_mean: Option<f64>) -> Result<RunReport> {
        let pair = self.initial_pair(cfg)?;
        let trace = run_ctta(&pair, &self.stream, cfg, seed)?;
        summarize(&trace, &self.stream, baseline_mean, Some(self.source_accuracy(&pair)?))
    }

    pub fn mean_error(&self, cfg: &RunConfig, seed: u64) -> Result<f64> {
        Ok(self.run(cfg, seed, None)?.mean_error)
    }

    /// `cfg` with `method` replaced by the no-adaptation baseline.
    pub fn baseline_config(cfg: &RunConfig) -> RunConfig {
        let mut b = cfg.clone();
        b.method.method = Method::None;
        b
    }

    /// Runs the no-adapt baseline, then `cfg`, reporting gain against it.
    pub fn run_with_baseline(&self, cfg: &RunConfig, seed: u64) -> Result<(RunReport, RunReport)> {
        let base = self.run(&Self::baseline_config(cfg), seed, None)?;
        let base = RunReport {
            gain_vs_baseline: Some(0.0),
            baseline_mean: Some(base.mean_error),
            ..base
        };
        let run = self.run(cfg, seed, Some(base.mean_error))?;
        Ok((base, run))
    }

    /// Adapt on the first `adapt_first` domains, evaluate frozen on the next `holdout`.
    pub fn generalization(
        &self,
        cfg: &RunConfig,
        seed: u64,
        adapt_first: usize,
        holdout: usize,
    ) -> Result<GeneralizationReport> {
        let n = self.stream.domains.len();
        if adapt_first == 0 || holdout == 0 || adapt_first + holdout > n {
            return Err(Error::config(format!(
                "need adapt_first >= 1, holdout >= 1 and adapt_first + holdout <= {n}"
            )));
        }
        let (adapt, rest) = self.stream.split_at(adapt_first);
        let (heldout, _) = rest.split_at(holdout);
        let pair = self.initial_pair(cfg)?;
        let trace = run_domain_generalization(&pair, &adapt, &heldout, cfg, seed)?;
        summarize_generalization(&trace, &adapt, &heldout)
    }
}
