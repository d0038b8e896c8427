use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ContrastiveMode, LossWeights, MiSign};
use crate::model::{AdapterMode, PrototypeMode, DEFAULT_LOGIT_SCALE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Em,
    Cr,
    Aws,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::None, Method::Em, Method::Cr, Method::Aws];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Em => "em",
            Method::Cr => "cr",
            Method::Aws => "aws",
        }
    }

    /// Target adapter mode this method trains.
    pub fn adapter_mode(self) -> AdapterMode {
        match self {
            Method::Em => AdapterMode::NormOnly,
            _ => AdapterMode::Full,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Method::None),
            "em" => Ok(Method::Em),
            "cr" => Ok(Method::Cr),
            "aws" => Ok(Method::Aws),
            other => Err(Error::config(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorSource {
    #[default]
    Target,
    Ssl,
}

/// Which branch produces the reported online predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    #[default]
    Target,
    Ssl,
    /// Mean of the target and SSL probabilities.
    Ensemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub method: Method,
    pub weights: LossWeights,
    /// Top-k size for positive pairs.
    pub k: usize,
    /// Top-n size for negative pairs, `n > k`.
    pub n: usize,
    /// Logit scale used when building prototype classifiers.
    pub sigma: f64,
    /// EMA retention for the CR teacher (and the SSL encoder ablation).
    pub ema_alpha: f64,
    /// Std of the Gaussian feature jitter for CR teacher views.
    pub cr_jitter_std: f64,
    pub cr_views: usize,
    pub indicator_source: IndicatorSource,
    pub mi_sign: MiSign,
    pub cl_mode: ContrastiveMode,
    pub update_ssl_classifier: bool,
    /// Ablation: EMA-track the target adapter with the SSL encoder.
    pub update_ssl_encoder: bool,
    pub eval_model: EvalModel,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            method: Method::Aws,
            weights: LossWeights::default(),
            k: 1,
            n: 5,
            sigma: DEFAULT_LOGIT_SCALE,
            ema_alpha: 0.999,
            cr_jitter_std: 0.05,
            cr_views: 2,
            indicator_source: IndicatorSource::Target,
            mi_sign: MiSign::Maximize,
            cl_mode: ContrastiveMode::Separated,
            update_ssl_classifier: true,
            update_ssl_encoder: false,
            eval_model: EvalModel::Target,
        }
    }
}

impl MethodConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Range checks for every field, whether or not the method uses it.
    pub fn validate(&self, classes: usize) -> Result<()> {
        self.weights.validate()?;
        if self.k == 0 || self.k >= self.n || self.n > classes {
            return Err(Error::config(format!(
                "need 1 <= k < n <= classes, got k={}, n={}, classes={classes}",
                self.k, self.n
            )));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::config("sigma must be finite and positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::config("ema_alpha must lie in [0, 1]"));
        }
        if !(self.cr_jitter_std >= 0.0) || !self.cr_jitter_std.is_finite() {
            return Err(Error::config("cr_jitter_std must be finite and non-negative"));
        }
        if self.cr_views == 0 {
            return Err(Error::config("cr_views must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    /// Use `base_lr × batch_size / 64` as the step size.
    pub scale_lr_by_batch: bool,
    /// Separate base step size for the SSL classifier; shares `base_lr` when unset.
    pub ssl_base_lr: Option<f64>,
}

pub const LR_REFERENCE_BATCH: usize = 64;

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            momentum: 0.9,
            scale_lr_by_batch: true,
            ssl_base_lr: None,
        }
    }
}

impl OptimizerConfig {
    fn scaled(&self, base: f64, batch_size: usize) -> f64 {
        if self.scale_lr_by_batch {
            base * batch_size as f64 / LR_REFERENCE_BATCH as f64
        } else {
            base
        }
    }

    pub fn learning_rate(&self, batch_size: usize) -> f64 {
        self.scaled(self.base_lr, batch_size)
    }

    pub fn ssl_learning_rate(&self, batch_size: usize) -> f64 {
        self.scaled(self.ssl_base_lr.unwrap_or(self.base_lr), batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        for lr in std::iter::once(self.base_lr).chain(self.ssl_base_lr) {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::config(format!("learning rate must be finite and non-negative, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Everything a run needs besides data and seed. This is the `--config` JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: MethodConfig,
    pub optimizer: OptimizerConfig,
    pub prototypes: PrototypeMode,
}

impl RunConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method: MethodConfig::for_method(method),
            ..Self::default()
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        self.method.validate(classes)?;
        self.optimizer.validate()
    }
}
